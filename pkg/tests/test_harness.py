"""End-to-end smoke test of the pipeline commands on the smoke config."""

import dataclasses
import json
from pathlib import Path

import pandas as pd
import pytest

from Model import DBContext
from mod import artifacts, harness
from mod.config import load_config
from mod.errors import DependencyError
from scripts.bas import main

SMOKE = Path(__file__).resolve().parent.parent / 'configs' / 'smoke.yaml'


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    """Smoke config run through all three phases once for the module."""
    out = tmp_path_factory.mktemp('run')
    cfg = load_config(SMOKE, output_dir=str(out))
    cfg = cfg.replace(evaluation=dataclasses.replace(cfg.evaluation, episodes=2))
    harness.phase1(cfg)
    harness.phase2(cfg)
    harness.phase3(cfg)
    return cfg


def test_phase2_needs_phase1(tmp_path):
    cfg = load_config(SMOKE, output_dir=str(tmp_path))
    with pytest.raises(DependencyError, match="phase1"):
        harness.phase2(cfg)


def test_failed_run_is_registered(tmp_path):
    cfg = load_config(SMOKE, output_dir=str(tmp_path))
    with pytest.raises(DependencyError):
        harness.phase2(cfg)
    with DBContext(str(tmp_path / harness.REGISTRY_NAME)) as db:
        runs = db.list_runs(phase='phase2')
        assert [r.status for r in runs] == ['failed']


def test_phase_artifacts(trained):
    out = Path(trained.output_dir)
    for name in ('phase1/agile.ckpt', 'phase1/recovery.ckpt', 'phase1/estimator.ckpt',
                 'phase2/table.ckpt', 'phase2/ranet.ckpt', 'phase3/estimator.ckpt', 'config.yaml'):
        assert (out / name).exists(), name
    header = artifacts.read_checkpoint(out / 'phase2' / 'table.ckpt').header
    assert header['config_hash'] == trained.hash()
    report = json.loads((out / 'phase3' / 'report.json').read_text(encoding='utf-8'))
    assert report['seed'] == trained.seed
    assert 'sign_test' in report


def test_evaluate_and_replay(trained):
    frame = harness.evaluate(trained, 'randomized')
    assert set(frame['label']) == {'safeguarded', 'agile_only'}

    out = Path(trained.output_dir) / 'evaluate' / 'randomized'
    episodes = pd.read_csv(out / 'episodes.csv')
    assert len(episodes) == 4
    assert set(episodes['classification']) <= {'collision', 'reach', 'timeout'}

    record = out / 'episodes.json'
    trace = harness.replay(trained, record, 0, 'safeguarded')
    assert len(trace) > 0

    with DBContext(str(Path(trained.output_dir) / harness.REGISTRY_NAME)) as db:
        run = db.list_runs(phase='evaluate', limit=1)[0]
        assert run.status == 'done'
        assert sum(db.count_outcomes(run.id).values()) == 4


def test_evaluate_is_reproducible(trained):
    """Two evaluations of the same config visit the same states."""
    out = Path(trained.output_dir) / 'evaluate' / 'agile_only'
    harness.evaluate(trained, 'agile_only')
    first = pd.read_csv(out / 'episodes.csv')['digest'].tolist()
    harness.evaluate(trained, 'agile_only')
    assert pd.read_csv(out / 'episodes.csv')['digest'].tolist() == first


def test_oracle(trained):
    report = harness.oracle(trained)
    for entry in report['masses'].values():
        assert entry['algebra_holds']
        assert entry['cells'] == 7 * 5
    assert (Path(trained.output_dir) / 'oracle' / 'mass_0_reach_avoid.pgm').exists()


def test_cli_missing_config_exit_code(tmp_path):
    assert main(['phase1', '--config', str(tmp_path / 'none.yaml')]) == 2


def test_cli_missing_prerequisite_exit_code(tmp_path):
    assert main(['phase3', '--config', str(SMOKE), '--out', str(tmp_path), '--quiet']) == 3


def test_analyze(trained):
    report = harness.analyze(trained)
    assert report.L_f_pi >= 0.0
    assert report.pairs > 0
    assert (Path(trained.output_dir) / 'analyze' / 'lipschitz.json').exists()


def test_heatmap(trained):
    report = harness.heatmap(trained)
    for kind in ('table', 'net'):
        assert set(report[kind]['forward_means']) == {'0', '4', '8', '12'}
    raster = artifacts.read_pgm(Path(trained.output_dir) / 'heatmap' / 'net_mass_0.pgm')
    assert raster.shape == (5, 5)


def test_fusion_ablation(trained):
    test = harness.fusion_ablation(trained, seeds=1)
    assert test.wins + test.losses + test.ties == 1
    assert (Path(trained.output_dir) / 'analyze' / 'fusion.csv').exists()


def test_joint_ablation(trained):
    test = harness.joint_ablation(trained, seeds=1)
    assert test.wins + test.losses + test.ties == 1
    frame = pd.read_csv(Path(trained.output_dir) / 'analyze' / 'joint.csv')
    assert list(frame.columns) == ['seed', 'configured', 'ablated']
    report = json.loads((Path(trained.output_dir) / 'analyze' / 'joint.json').read_text(encoding='utf-8'))
    assert report['ablated'] == 'separate'


def test_cli_rejects_seed_beyond_64_bits(tmp_path):
    assert main(['phase1', '--config', str(SMOKE), '--out', str(tmp_path), '--seed', str(2 ** 64)]) == 2
