"""Tests for the run registry models and DBContext."""

import pytest
import tempfile
import os
from sqlalchemy import text

from Model import DBContext, ExperimentRun, EpisodeRecord


@pytest.fixture
def temp_db_context():
    """Create a temporary database context for testing."""
    with tempfile.NamedTemporaryFile(mode='w', delete=False, suffix='.db') as f:
        db_path = f.name

    db_context = DBContext(db_path)
    yield db_context

    db_context.close()
    if os.path.exists(db_path):
        os.unlink(db_path)


def _outcome(index, classification='reach', mode='safeguarded'):
    return {
        'episode_index': index,
        'mode': mode,
        'classification': classification,
        'steps': 100 + index,
        'v_peak': 2.5,
        'recovery_fraction': 0.1,
        'min_ra_value': -0.4,
        'max_ra_value': 0.2,
    }


class TestExperimentRunModel:
    """Tests for the ExperimentRun model."""

    def test_create_run(self, temp_db_context):
        """A new run starts in the running state with its provenance."""
        run = temp_db_context.create_run('phase1', 'a' * 64, 7, '/tmp/run')

        assert run.id is not None
        assert run.phase == 'phase1'
        assert run.config_hash == 'a' * 64
        assert run.seed == 7
        assert run.status == 'running'
        assert run.finished_at is None

    def test_full_width_seed_round_trips(self, temp_db_context):
        """Seeds up to 2**64 - 1 are stored and read back unchanged."""
        run = temp_db_context.create_run('phase1', 'f' * 64, 2 ** 64 - 1, '/tmp/run')

        with temp_db_context.get_session() as session:
            stored = session.get(ExperimentRun, run.id)
            assert stored.seed == 2 ** 64 - 1

    def test_out_of_range_seed_rejected(self):
        """Seeds must fit in an unsigned 64-bit integer."""
        with pytest.raises(ValueError, match="unsigned 64-bit"):
            ExperimentRun(phase='phase1', config_hash='c', seed=2 ** 64, output_dir='.')
        with pytest.raises(ValueError, match="unsigned 64-bit"):
            ExperimentRun(phase='phase1', config_hash='c', seed=-1, output_dir='.')

    def test_finish_run_stores_summary(self, temp_db_context):
        """Finishing a run stores its status and summary."""
        run = temp_db_context.create_run('phase2', 'b' * 64, 0, '/tmp/run')
        summary = {'net_table_gap': 0.05, 'contracting': True}

        finished = temp_db_context.finish_run(run.id, 'done', summary)

        assert finished.status == 'done'
        assert finished.finished_at is not None
        assert finished.get_summary() == summary

    def test_finish_missing_run(self, temp_db_context):
        """Finishing an unknown run returns None."""
        assert temp_db_context.finish_run(999, 'done') is None

    def test_invalid_status_rejected(self):
        """Only running, done and failed are valid statuses."""
        with pytest.raises(ValueError, match="Invalid run status"):
            ExperimentRun(phase='phase1', config_hash='c', seed=0, output_dir='.', status='paused')

    def test_invalid_summary_json_rejected(self):
        """Summary text must be valid JSON."""
        run = ExperimentRun(phase='phase1', config_hash='c', seed=0, output_dir='.')
        with pytest.raises(ValueError, match="Invalid JSON"):
            run.summary = '{not json'

    def test_to_dict(self, temp_db_context):
        """Converting a run to a dictionary keeps its fields."""
        run = temp_db_context.create_run('evaluate', 'd' * 64, 3, '/tmp/run', scenario='mass-shift')
        data = run.to_dict()

        assert data['phase'] == 'evaluate'
        assert data['scenario'] == 'mass-shift'
        assert data['seed'] == 3
        assert data['summary'] is None
        assert 'started_at' in data

    def test_repr(self, temp_db_context):
        run = temp_db_context.create_run('oracle', 'e' * 64, 0, '/tmp/run')
        assert "phase='oracle'" in repr(run)


class TestRunQueries:
    """Tests for reading and listing runs."""

    def test_read_run(self, temp_db_context):
        """A created run can be read back by ID."""
        run = temp_db_context.create_run('phase1', 'f' * 64, 1, '/tmp/run')
        loaded = temp_db_context.read_run(run.id)

        assert loaded is not None
        assert loaded.phase == 'phase1'

    def test_read_missing_run(self, temp_db_context):
        assert temp_db_context.read_run(12345) is None

    def test_list_runs_newest_first(self, temp_db_context):
        """Runs are listed newest first and can be filtered by phase."""
        first = temp_db_context.create_run('phase1', 'h', 0, '.')
        second = temp_db_context.create_run('phase2', 'h', 0, '.')
        third = temp_db_context.create_run('phase1', 'h', 0, '.')

        all_runs = temp_db_context.list_runs()
        assert [r.id for r in all_runs] == [third.id, second.id, first.id]

        phase1_runs = temp_db_context.list_runs(phase='phase1')
        assert [r.id for r in phase1_runs] == [third.id, first.id]

    def test_list_runs_by_hash_with_limit(self, temp_db_context):
        """Runs can be filtered by config hash and limited."""
        for _ in range(3):
            temp_db_context.create_run('phase1', 'x', 0, '.')
        temp_db_context.create_run('phase1', 'y', 0, '.')

        assert len(temp_db_context.list_runs(config_hash='x')) == 3
        assert len(temp_db_context.list_runs(config_hash='x', limit=2)) == 2

    def test_count(self, temp_db_context):
        """Counting runs."""
        assert temp_db_context.count() == 0
        temp_db_context.create_run('phase1', 'x', 0, '.')
        temp_db_context.create_run('phase2', 'x', 0, '.')
        assert temp_db_context.count() == 2


class TestEpisodeRecords:
    """Tests for evaluated episode records."""

    def test_add_episodes(self, temp_db_context):
        """Episode outcomes are stored per run."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.', scenario='randomized')
        stored = temp_db_context.add_episodes(run.id, [_outcome(0), _outcome(1, 'collision')])

        assert stored == 2
        counts = temp_db_context.count_outcomes(run.id)
        assert counts == {'collision': 1, 'reach': 1, 'timeout': 0}

    def test_count_outcomes_by_mode(self, temp_db_context):
        """Counts can be restricted to one batch label."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.', scenario='randomized')
        temp_db_context.add_episodes(run.id, [
            _outcome(0, 'reach', 'safeguarded'),
            _outcome(0, 'collision', 'agile_only'),
            _outcome(1, 'collision', 'agile_only'),
        ])

        assert temp_db_context.count_outcomes(run.id, mode='safeguarded')['collision'] == 0
        assert temp_db_context.count_outcomes(run.id, mode='agile_only')['collision'] == 2

    def test_missing_ra_values_allowed(self, temp_db_context):
        """Agile-only episodes have no value readings."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.')
        outcome = _outcome(0, mode='agile_only')
        outcome['min_ra_value'] = None
        outcome['max_ra_value'] = None

        assert temp_db_context.add_episodes(run.id, [outcome]) == 1

    def test_duplicate_episode_rejected(self, temp_db_context):
        """The same episode index and mode cannot be stored twice for one run."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.')
        temp_db_context.add_episodes(run.id, [_outcome(0)])

        with pytest.raises(ValueError, match="Duplicate episode record"):
            temp_db_context.add_episodes(run.id, [_outcome(0)])

    def test_unknown_run_rejected(self, temp_db_context):
        with pytest.raises(ValueError, match="Unknown run"):
            temp_db_context.add_episodes(999, [_outcome(0)])

    def test_deleting_run_cascades_in_sqlite(self, temp_db_context):
        """Foreign keys are enforced, so a raw DELETE removes the run's episodes."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.')
        temp_db_context.add_episodes(run.id, [_outcome(0), _outcome(1)])
        with temp_db_context.get_session() as session:
            session.execute(text('DELETE FROM "ExperimentRun" WHERE id = :id'), {'id': run.id})
        with temp_db_context.get_session() as session:
            assert session.query(EpisodeRecord).count() == 0

    def test_invalid_classification_rejected(self):
        with pytest.raises(ValueError, match="Invalid classification"):
            EpisodeRecord(run_id=1, episode_index=0, mode='safeguarded', classification='crash',
                          steps=1, v_peak=0.0, recovery_fraction=0.0)

    def test_episode_to_dict(self, temp_db_context):
        run = temp_db_context.create_run('evaluate', 'x', 0, '.')
        temp_db_context.add_episodes(run.id, [_outcome(4)])
        with temp_db_context.get_session() as session:
            record = session.query(EpisodeRecord).filter_by(run_id=run.id).one()
            data = record.to_dict()

        assert data['episode_index'] == 4
        assert data['steps'] == 104
        assert data['classification'] == 'reach'


class TestDBContext:
    """Tests for DBContext lifecycle."""

    def test_clear_all(self, temp_db_context):
        """Clearing removes runs and their episodes."""
        run = temp_db_context.create_run('evaluate', 'x', 0, '.')
        temp_db_context.add_episodes(run.id, [_outcome(0), _outcome(1)])
        temp_db_context.create_run('phase1', 'x', 0, '.')

        assert temp_db_context.clear_all() == 2
        assert temp_db_context.count() == 0
        assert temp_db_context.count_outcomes(run.id) == {'collision': 0, 'reach': 0, 'timeout': 0}

    def test_context_manager(self):
        """Test using DBContext as context manager."""
        with tempfile.TemporaryDirectory() as tmp:
            db_path = os.path.join(tmp, 'nested', 'runs.s3db')
            with DBContext(db_path) as db:
                db.create_run('phase1', 'x', 0, tmp)
                assert db.count() == 1
            assert os.path.exists(db_path)

    def test_session_rollback_on_error(self, temp_db_context):
        """A failing session leaves no partial writes."""
        with pytest.raises(RuntimeError):
            with temp_db_context.get_session() as session:
                session.add(ExperimentRun(phase='phase1', config_hash='x', seed=0, output_dir='.'))
                session.flush()
                raise RuntimeError("boom")

        assert temp_db_context.count() == 0
