"""Database context for the run registry."""

from typing import Optional, List, Dict, Any, Iterable
from pathlib import Path
from contextlib import contextmanager
from sqlalchemy import create_engine, desc, func
from sqlalchemy.orm import sessionmaker, Session
from sqlalchemy.exc import IntegrityError
from Model.base import Base, enable_foreign_keys, utc_now
from Model.experiment_run import ExperimentRun
from Model.episode_record import EpisodeRecord


class DBContext:
    """Database context for recording runs and evaluated episodes.

    This class provides a clean interface for database operations using
    SQLAlchemy ORM with proper session management and error handling.
    """

    def __init__(self, db_path: str = "runs.s3db"):
        """Initialize database context.

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = str(db_path)

        # Ensure directory exists
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)

        self.engine = create_engine(f'sqlite:///{self.db_path}', echo=False)
        enable_foreign_keys(self.engine)
        self.SessionLocal = sessionmaker(bind=self.engine, expire_on_commit=False)

        self._init_db()

    def _init_db(self):
        """Initialize database schema if it doesn't exist."""
        Base.metadata.create_all(self.engine)

    @contextmanager
    def get_session(self) -> Session:
        """Get a database session with automatic cleanup.

        Yields:
            SQLAlchemy session
        """
        session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except Exception:
            session.rollback()
            raise
        finally:
            session.close()

    def create_run(self, phase: str, config_hash: str, seed: int, output_dir: str,
                   scenario: Optional[str] = None) -> ExperimentRun:
        """Register a run in the 'running' state.

        Args:
            phase: Pipeline stage (phase1, phase2, phase3, evaluate, ...)
            config_hash: Hash of the resolved configuration
            seed: Root seed
            output_dir: Directory holding the run's artifacts
            scenario: Evaluation scenario, if any

        Returns:
            Created ExperimentRun
        """
        with self.get_session() as session:
            run = ExperimentRun(phase=phase, scenario=scenario, config_hash=config_hash,
                                seed=seed, output_dir=str(output_dir))
            session.add(run)
            session.flush()
            session.refresh(run)
            return run

    def finish_run(self, run_id: int, status: str = 'done',
                   summary: Optional[Dict[str, Any]] = None) -> Optional[ExperimentRun]:
        """Mark a run finished and store its summary.

        Returns:
            Updated ExperimentRun or None if not found
        """
        with self.get_session() as session:
            run = session.query(ExperimentRun).filter_by(id=run_id).first()
            if run is None:
                return None
            run.status = status
            run.set_summary(summary)
            run.finished_at = utc_now()
            session.flush()
            session.refresh(run)
            return run

    def read_run(self, run_id: int) -> Optional[ExperimentRun]:
        """Read a run by ID.

        Returns:
            ExperimentRun or None if not found
        """
        with self.get_session() as session:
            return session.query(ExperimentRun).filter_by(id=run_id).first()

    def list_runs(self, phase: Optional[str] = None, config_hash: Optional[str] = None,
                  limit: Optional[int] = None) -> List[ExperimentRun]:
        """List runs, newest first.

        Args:
            phase: Only runs of this phase
            config_hash: Only runs of this configuration
            limit: Maximum number of results
        """
        with self.get_session() as session:
            query = session.query(ExperimentRun)
            if phase is not None:
                query = query.filter_by(phase=phase)
            if config_hash is not None:
                query = query.filter_by(config_hash=config_hash)
            query = query.order_by(desc(ExperimentRun.id))
            if limit:
                query = query.limit(limit)
            return query.all()

    def add_episodes(self, run_id: int, outcomes: Iterable[Dict[str, Any]]) -> int:
        """Store episode outcomes for a run.

        Args:
            run_id: Owning run
            outcomes: Mappings with ``episode_index``, ``mode`` and the EpisodeOutcome fields

        Returns:
            Number of records stored

        Raises:
            ValueError: If the run does not exist or an episode is stored twice
                for the same run and mode
        """
        with self.get_session() as session:
            if session.get(ExperimentRun, run_id) is None:
                raise ValueError(f"Unknown run {run_id}")
            count = 0
            for outcome in outcomes:
                session.add(EpisodeRecord(
                    run_id=run_id,
                    episode_index=int(outcome['episode_index']),
                    mode=outcome['mode'],
                    classification=outcome['classification'],
                    steps=int(outcome['steps']),
                    v_peak=float(outcome['v_peak']),
                    recovery_fraction=float(outcome['recovery_fraction']),
                    min_ra_value=outcome.get('min_ra_value'),
                    max_ra_value=outcome.get('max_ra_value'),
                ))
                count += 1
            try:
                session.flush()
            except IntegrityError as e:
                raise ValueError(f"Duplicate episode record for run {run_id}") from e
            return count

    def count_outcomes(self, run_id: int, mode: Optional[str] = None) -> Dict[str, int]:
        """Episode counts per classification for a run."""
        with self.get_session() as session:
            query = session.query(EpisodeRecord.classification, func.count(EpisodeRecord.id)).filter_by(run_id=run_id)
            if mode is not None:
                query = query.filter_by(mode=mode)
            counts = {'collision': 0, 'reach': 0, 'timeout': 0}
            counts.update({name: int(n) for name, n in query.group_by(EpisodeRecord.classification).all()})
            return counts

    def count(self) -> int:
        """Get total count of runs."""
        with self.get_session() as session:
            return session.query(ExperimentRun).count()

    def clear_all(self) -> int:
        """Delete all runs and their episodes.

        Returns:
            Number of runs deleted
        """
        with self.get_session() as session:
            count = session.query(ExperimentRun).count()
            session.query(EpisodeRecord).delete()
            session.query(ExperimentRun).delete()
            return count

    def close(self):
        """Close database connection."""
        if hasattr(self, 'engine'):
            self.engine.dispose()

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.close()
