"""Pipeline orchestration: training phases, evaluation scenarios and inspection tools.

Run directory layout under ``cfg.output_dir``::

    config.yaml            resolved configuration
    runs.s3db              run registry (one row per command, one per evaluated episode)
    phase1/                agile, recovery and estimator checkpoints, training traces
    phase2/                value table and network, residual and loss traces
    phase3/                fine-tuned estimator, before/after report
    evaluate/<scenario>/   episode CSV and JSON records, metrics, sample traces
    oracle/  analyze/  heatmap/  replay/

Every checkpoint and report carries the config hash and the root seed.
Every episode draws its world, parameters, start pose and noise from streams
labelled by scenario and index, so a batch does not depend on worker count.
"""

import functools
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from Model import DBContext
from mod import analysis, artifacts
from mod.config import SCENARIOS, SEED_LIMIT, ExperimentConfig, dump_config
from mod.dynamics import ESTIMATED_FIELDS, EnvParams, State, sample_params
from mod.errors import BASError, ConfigError, ContractError, DependencyError
from mod.estimator import SampleSet, finetune_on_policy, init_estimator
from mod.oracle import RobotClosedLoop, exact_values_many, sweep_sets
from mod.policies import AgilePolicy, GoalSeekingController, RecoveryPolicy, train_agile, train_recovery
from mod.pool import parallel_map
from mod.ravalue import (
    GridAxis, StateGrid, TransitionBatch, collect_transitions, fit_ra_network, init_ra_net, initial_table,
    net_table_gap, table_records, value_iteration,
)
from mod.safeguard import Components, EpisodeOutcome, ParamShift, run_episode
from mod.seeding import child_seed, stream
from mod.world import WorldSpec, sample_world, world_from_dict

logger = logging.getLogger(__name__)

REGISTRY_NAME = 'runs.s3db'
START_JITTER = (0.3, 0.3)
SHIFT_FIELDS = {'mass-shift': 'payload_mass', 'friction-shift': 'friction'}


def run_dir(cfg: ExperimentConfig, *parts: str) -> Path:
    return Path(cfg.output_dir).joinpath(*parts)


def _header(cfg: ExperimentConfig) -> Dict[str, Any]:
    return {'config_hash': cfg.hash(), 'seed': cfg.seed}


@contextmanager
def recorded_run(cfg: ExperimentConfig, phase: str,
                 scenario: Optional[str] = None) -> Iterator[Tuple[DBContext, int, Dict[str, Any]]]:
    """Register a command in the run registry and tag its errors with ``phase``.

    Yields:
        ``(db, run_id, summary)``; whatever the caller puts in ``summary`` is
        stored when the run finishes
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'config.yaml').write_text(dump_config(cfg), encoding='utf-8')
    with DBContext(str(out / REGISTRY_NAME)) as db:
        run = db.create_run(phase, cfg.hash(), cfg.seed, str(out), scenario)
        summary: Dict[str, Any] = {}
        logger.info("Starting %s%s (run %d, seed %d)", phase, f" [{scenario}]" if scenario else '', run.id, cfg.seed)
        try:
            yield db, run.id, summary
        except BASError as e:
            db.finish_run(run.id, 'failed', {'error': str(e)})
            raise e.with_phase(phase)
        except Exception as e:
            db.finish_run(run.id, 'failed', {'error': repr(e)})
            raise
        db.finish_run(run.id, 'done', json.loads(artifacts.dumps_json(summary)))
        logger.info("Finished %s (run %d)", phase, run.id)


# ---------------------------------------------------------------------------
# Checkpoint loading
# ---------------------------------------------------------------------------

def _check_provenance(path: Path, cfg: ExperimentConfig) -> None:
    header = artifacts.read_checkpoint(path).header
    if header.get('config_hash') != cfg.hash():
        logger.warning("%s was written under config %s (seed %s), current config is %s",
                       path, str(header.get('config_hash'))[:12], header.get('seed'), cfg.hash()[:12])


def load_phase1(cfg: ExperimentConfig) -> Tuple[AgilePolicy, RecoveryPolicy, Any]:
    """Agile policy, recovery policy and jointly trained estimator.

    Raises:
        DependencyError: If phase1 has not been run into ``cfg.output_dir``
    """
    out = run_dir(cfg, 'phase1')
    try:
        _check_provenance(out / 'agile.ckpt', cfg)
        agile = artifacts.load_policy(out / 'agile.ckpt')
        recovery = artifacts.load_policy(out / 'recovery.ckpt')
        estimator = artifacts.load_estimator(out / 'estimator.ckpt')
    except DependencyError as e:
        raise DependencyError(f"{e}; run phase1 first") from e
    return (AgilePolicy(agile, cfg.randomization, cfg.noise, cfg.dynamics),
            RecoveryPolicy(recovery, cfg.noise, cfg.dynamics, cfg.recovery.correction_scale),
            estimator)


def load_value_model(cfg: ExperimentConfig, kind: Optional[str] = None):
    """The phase2 table or network; ``kind`` defaults to ``cfg.safeguard.model``."""
    kind = kind or cfg.safeguard.model
    path = run_dir(cfg, 'phase2', 'table.ckpt' if kind == 'table' else 'ranet.ckpt')
    try:
        if kind == 'table':
            return artifacts.load_table(path)
        return artifacts.load_ranet(path, cfg.randomization)
    except DependencyError as e:
        raise DependencyError(f"{e}; run phase2 first") from e


def load_components(cfg: ExperimentConfig, need_model: bool = True, finetuned: bool = True) -> Components:
    """Trained closed-loop components.

    With ``finetuned`` the phase3 estimator replaces the phase1 one; it is
    required whenever the value model is.
    """
    agile, recovery, estimator = load_phase1(cfg)
    model = load_value_model(cfg) if need_model else None
    tuned_path = run_dir(cfg, 'phase3', 'estimator.ckpt')
    if finetuned and need_model:
        try:
            estimator = artifacts.load_estimator(tuned_path)
        except DependencyError as e:
            raise DependencyError(f"{e}; run phase3 first") from e
    elif finetuned and tuned_path.exists():
        estimator = artifacts.load_estimator(tuned_path)
    return Components(agile, recovery, estimator, model)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def _params_from_dict(data: Dict[str, Any]) -> EnvParams:
    return EnvParams(payload_mass=float(data['payload_mass']), friction=float(data['friction']),
                     com_shift=tuple(float(v) for v in data['com_shift']),
                     ext_force=tuple(float(v) for v in data['ext_force']))


@dataclass(frozen=True, eq=False)
class EpisodeSpec:
    """Everything that determines one episode besides the trained components."""

    labels: Tuple
    world: WorldSpec
    e_true: EnvParams
    start: State
    shift: Optional[ParamShift] = None
    random_estimate: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'labels': list(self.labels),
            'world': self.world.to_dict(),
            'e_true': self.e_true.to_dict(),
            'start': self.start.as_array().tolist(),
            'shift': None if self.shift is None else {'step': self.shift.step,
                                                      'params': self.shift.params.to_dict()},
            'random_estimate': self.random_estimate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EpisodeSpec':
        shift = data.get('shift')
        return cls(
            labels=tuple(data['labels']),
            world=world_from_dict(data['world']),
            e_true=_params_from_dict(data['e_true']),
            start=State(*(float(v) for v in data['start'])),
            shift=None if shift is None else ParamShift(int(shift['step']), _params_from_dict(shift['params'])),
            random_estimate=bool(data.get('random_estimate', False)),
        )


def build_spec(cfg: ExperimentConfig, scenario: str, labels: Tuple) -> EpisodeSpec:
    """Draw the episode setup of ``scenario`` from the stream ``labels``.

    Table value models only cover the verification world, so episodes run
    there when the safeguard uses the table.
    """
    rng = stream(cfg.seed, *labels)
    world = sample_world(rng, cfg.layout)
    e_true = sample_params(rng, cfg.randomization)
    start = cfg.context().start_state(rng, START_JITTER)
    if cfg.safeguard.model == 'table':
        world = cfg.verification_world()
    ev = cfg.evaluation
    shift = None
    if scenario == 'mass-shift':
        e_true = e_true.replace(payload_mass=ev.mass_shift[0])
        shift = ParamShift(ev.shift_step, e_true.replace(payload_mass=ev.mass_shift[1]))
    elif scenario == 'friction-shift':
        e_true = e_true.replace(friction=ev.friction_shift[0])
        shift = ParamShift(ev.shift_step, e_true.replace(friction=ev.friction_shift[1]))
    return EpisodeSpec(tuple(labels), world, e_true, start, shift, scenario == 'random_estimate')


@dataclass(frozen=True, eq=False)
class EpisodeJob:
    cfg: ExperimentConfig
    components: Components
    spec: EpisodeSpec
    mode: str
    keep_trace: bool = False
    collect_windows: bool = False


@dataclass
class EpisodeResult:
    outcome: EpisodeOutcome
    switch_events: List[Dict[str, Any]]
    digest: str
    estimates: np.ndarray
    trace: Optional[pd.DataFrame] = None
    samples: Optional[SampleSet] = None


def trajectory_digest(states: np.ndarray) -> str:
    """SHA-256 of the visited states as little-endian float64."""
    return hashlib.sha256(np.ascontiguousarray(states, dtype='<f8').tobytes()).hexdigest()


def _run_episode_job(job: EpisodeJob) -> EpisodeResult:
    cfg, spec = job.cfg, job.spec
    override = None
    if spec.random_estimate:
        lo, hi = cfg.randomization.bounds()
        draws = stream(cfg.seed, *spec.labels, 'random-estimate').uniform(
            lo, hi, size=(cfg.dynamics.horizon_steps, lo.size))
        override = lambda t: draws[min(t, len(draws) - 1)]  # noqa: E731
    rng = stream(cfg.seed, *spec.labels, 'noise')
    trajectory, outcome = run_episode(spec.world, spec.e_true, job.components, job.mode, rng, cfg.context(),
                                      cfg.safeguard, start=spec.start, shift=spec.shift,
                                      estimate_override=override, collect_windows=job.collect_windows)
    acting = trajectory.rows[:-1]
    estimates = np.array([[row[f'e_hat_{name}'] for name in ESTIMATED_FIELDS] for row in acting]).reshape(
        len(acting), len(ESTIMATED_FIELDS))
    return EpisodeResult(outcome, trajectory.switch_events, trajectory_digest(trajectory.states()), estimates,
                         trajectory.to_frame() if job.keep_trace else None, trajectory.samples)


def run_batch(cfg: ExperimentConfig, components: Components, specs: Sequence[EpisodeSpec], mode: str,
              trace_episodes: int = 0, collect_windows: bool = False) -> List[EpisodeResult]:
    jobs = [EpisodeJob(cfg, components, spec, mode, k < trace_episodes, collect_windows)
            for k, spec in enumerate(specs)]
    return parallel_map(_run_episode_job, jobs, cfg.workers)


def _concat_samples(sets: Sequence[SampleSet]) -> SampleSet:
    return functools.reduce(lambda a, b: a.concat(b), sets, SampleSet())


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def phase1(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Jointly train the agile policy and estimator, then train the recovery policy."""
    out = run_dir(cfg, 'phase1')
    with recorded_run(cfg, 'phase1') as (_, _, summary):
        ctx = cfg.context()
        estimator = init_estimator(stream(cfg.seed, 'phase1', 'estimator-init'), cfg.estimator)
        agile = train_agile(ctx, cfg.agile, estimator, workers=cfg.workers, label='agile',
                            validation_episodes=cfg.evaluation.validation_episodes)
        recovery = train_recovery(ctx, cfg.recovery, workers=cfg.workers, label='recovery')

        header = _header(cfg)
        artifacts.save_policy(out / 'agile.ckpt', agile.policy, header)
        artifacts.save_policy(out / 'recovery.ckpt', recovery.policy, header)
        artifacts.save_estimator(out / 'estimator.ckpt', agile.estimator, header)
        artifacts.write_csv(agile.trace, out / 'agile_trace.csv')
        artifacts.write_csv(recovery.trace, out / 'recovery_trace.csv')
        report = dict(header,
                      alpha_schedule=cfg.estimator.alpha_schedule,
                      estimator_validation_loss=agile.validation_loss,
                      condition_sensitivity=agile.sensitivity,
                      recovery_tracking_error=recovery.tracking_error,
                      proportional_tracking_error=recovery.baseline_error)
        artifacts.write_json(out / 'report.json', report)
        summary.update(report)
    return report


def phase2(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Solve the verification table and fit the value network.

    The network is fitted on agile-policy transition records plus the grid
    transitions of a table solved at the network's discount, and checked
    against that table.
    """
    out = run_dir(cfg, 'phase2')
    rv = cfg.ravalue
    with recorded_run(cfg, 'phase2') as (_, _, summary):
        agile, _, estimator = load_phase1(cfg)
        world = cfg.verification_world()
        table = initial_table(rv.grid(), world, rv, cfg.randomization)
        table, residuals = value_iteration(table, agile, cfg.dynamics, rv.tol, rv.max_sweeps)
        ratios = analysis.contraction_ratios(residuals)
        contracting = bool((ratios['max_ratio'] <= table.gamma + 1e-9).all())
        if not contracting:
            logger.warning("Residual ratio exceeded gamma=%.4f in some bin", table.gamma)

        if math.isclose(rv.gamma_net, rv.gamma_table):
            gap_table = table
        else:
            gap_table, _ = value_iteration(initial_table(rv.grid(), world, rv, cfg.randomization, rv.gamma_net),
                                           agile, cfg.dynamics, rv.tol, rv.max_sweeps)

        net = init_ra_net(stream(cfg.seed, 'phase2', 'net-init'), rv, cfg.randomization)
        batches = [table_records(gap_table, agile, net, cfg.dynamics)]
        if rv.record_episodes > 0:
            batches.insert(0, collect_transitions(agile, estimator, net, cfg.context(), rv.record_episodes,
                                                  label='phase2-records',
                                                  condition_on_truth=rv.condition_on_truth,
                                                  workers=cfg.workers))
        records = TransitionBatch.concat(batches)
        net, net_loss, loss_trace = fit_ra_network(records, net, rv, stream(cfg.seed, 'phase2', 'net-fit'))
        gap = net_table_gap(gap_table, net)
        if gap > rv.gap_bound:
            logger.warning("Net-table gap %.4f exceeds the configured bound %.4f", gap, rv.gap_bound)

        header = _header(cfg)
        artifacts.save_table(out / 'table.ckpt', table, header)
        artifacts.save_ranet(out / 'ranet.ckpt', net, header)
        artifacts.write_csv(residuals, out / 'residuals.csv')
        artifacts.write_csv(ratios, out / 'contraction.csv')
        artifacts.write_csv(loss_trace, out / 'net_loss.csv')
        report = dict(header,
                      gamma_table=table.gamma,
                      gamma_net=net.gamma,
                      bins=len(table.bins()),
                      cells=table.grid.n_cells,
                      max_sweeps_used=int(ratios['sweeps'].max()) if len(ratios) else 0,
                      max_residual_ratio=float(ratios['max_ratio'].max()) if len(ratios) else 0.0,
                      contracting=contracting,
                      records=len(records),
                      net_loss=net_loss,
                      net_table_gap=gap,
                      gap_bound=rv.gap_bound,
                      gap_ok=gap <= rv.gap_bound)
        artifacts.write_json(out / 'report.json', report)
        summary.update(report)
    return report


def phase3(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Fine-tune the estimator on windows from safeguarded rollouts.

    Held-out safeguarded episodes score the estimator before and after, per
    episode, with a paired sign test. A control fine-tune on agile-only
    windows is scored on the same held-out episodes.
    """
    out = run_dir(cfg, 'phase3')
    ec = cfg.estimator
    with recorded_run(cfg, 'phase3') as (_, _, summary):
        components = load_components(cfg, need_model=True, finetuned=False)

        def windows(kind: str, count: int, mode: str) -> List[SampleSet]:
            specs = [build_spec(cfg, 'randomized', ('phase3', kind, k)) for k in range(count)]
            return [r.samples for r in run_batch(cfg, components, specs, mode, collect_windows=True)]

        train_sets = windows('train', ec.finetune_episodes, 'safeguarded')
        heldout_sets = windows('heldout', ec.heldout_episodes, 'safeguarded')
        control_sets = windows('control', ec.finetune_episodes, 'agile_only')
        train, heldout, control = (_concat_samples(s) for s in (train_sets, heldout_sets, control_sets))
        if not len(heldout):
            raise ContractError("Held-out episodes produced no estimator windows")
        if ec.finetune_iterations > 0 and not (len(train) and len(control)):
            raise ContractError("Fine-tune episodes produced no estimator windows")

        base = components.estimator
        tuned, before, after = finetune_on_policy(train, heldout, base, cfg.randomization, ec,
                                                  stream(cfg.seed, 'phase3', 'finetune'))
        control_params, _, control_after = finetune_on_policy(control, heldout, base, cfg.randomization, ec,
                                                               stream(cfg.seed, 'phase3', 'control-finetune'))

        per_episode = pd.DataFrame({
            'episode': np.arange(len(heldout_sets)),
            'before': analysis.episode_losses(heldout_sets, base, cfg.randomization),
            'after': analysis.episode_losses(heldout_sets, tuned, cfg.randomization),
            'control': analysis.episode_losses(heldout_sets, control_params, cfg.randomization),
        })
        scored = per_episode.dropna()
        test = analysis.paired_sign_test(scored['before'], scored['after'])
        control_test = analysis.paired_sign_test(scored['before'], scored['control'])

        header = _header(cfg)
        artifacts.save_estimator(out / 'estimator.ckpt', tuned, header)
        artifacts.write_csv(per_episode, out / 'heldout_losses.csv')
        report = dict(header,
                      loss_before=before,
                      loss_after=after,
                      control_loss_after=control_after,
                      sign_test=asdict(test),
                      control_sign_test=asdict(control_test),
                      finetune_iterations=ec.finetune_iterations,
                      train_samples=len(train),
                      heldout_samples=len(heldout),
                      seeds={
                          'root': cfg.seed,
                          'train': [child_seed(cfg.seed, 'phase3', 'train', k) for k in range(ec.finetune_episodes)],
                          'heldout': [child_seed(cfg.seed, 'phase3', 'heldout', k)
                                      for k in range(ec.heldout_episodes)],
                      })
        artifacts.write_json(out / 'report.json', report)
        summary.update({k: v for k, v in report.items() if k != 'seeds'})
    return report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _batches(cfg: ExperimentConfig, scenario: str) -> Dict[str, Tuple[str, List[EpisodeSpec]]]:
    """Labelled batches of a scenario: ``label -> (mode, specs)``.

    Batches of one scenario share their episode setups so comparisons are paired.
    """
    specs = [build_spec(cfg, scenario, ('evaluate', k)) for k in range(cfg.evaluation.episodes)]
    if scenario == 'agile_only':
        return {'agile_only': ('agile_only', specs)}
    batches = {'safeguarded': ('safeguarded', specs)}
    if scenario == 'randomized':
        batches['agile_only'] = ('agile_only', specs)
    elif scenario in SHIFT_FIELDS:
        batches['static'] = ('safeguarded', [replace(spec, shift=None) for spec in specs])
    return batches


def _scenario_checks(cfg: ExperimentConfig, scenario: str, metrics: Dict[str, Dict[str, float]],
                     results: Dict[str, List[EpisodeResult]], specs: List[EpisodeSpec]) -> Dict[str, Any]:
    checks: Dict[str, Any] = {}
    if scenario == 'randomized':
        safe, agile = metrics['safeguarded'], metrics['agile_only']
        checks['collision_halved'] = safe['collision'] <= 0.5 * agile['collision']
        checks['reach_within_5pp'] = safe['reach'] >= agile['reach'] - 5.0
        if not (math.isnan(safe['v_peak']) or math.isnan(agile['v_peak'])):
            checks['agile_faster'] = agile['v_peak'] >= safe['v_peak']
    elif scenario in SHIFT_FIELDS:
        ev = cfg.evaluation
        index = ESTIMATED_FIELDS.index(SHIFT_FIELDS[scenario])
        moved = []
        for result, spec in zip(results['safeguarded'], specs):
            if result.outcome.steps <= ev.shift_step + 2:
                continue
            truth_after = spec.shift.params.estimated_vector()[index]
            moved.append(analysis.shift_adaptation(result.estimates[:, index], truth_after, ev.shift_step,
                                                   ev.trend_window).moved_toward)
        checks['adaptation_episodes'] = len(moved)
        checks['adaptation_fraction'] = float(np.mean(moved)) if moved else float('nan')
        checks['adaptation_ok'] = bool(moved) and float(np.mean(moved)) >= 0.8
        checks['shift_collision_within_2x'] = (metrics['safeguarded']['collision']
                                               <= 2.0 * metrics['static']['collision'])
    return checks


def evaluate(cfg: ExperimentConfig, scenario: str = 'randomized') -> pd.DataFrame:
    """Run the episode batches of ``scenario`` and write metrics and episode records.

    Returns:
        Metrics frame with one row per batch label
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"Unknown scenario '{scenario}', expected one of {SCENARIOS}")
    out = run_dir(cfg, 'evaluate', scenario)
    with recorded_run(cfg, 'evaluate', scenario) as (db, run_id, summary):
        components = load_components(cfg, need_model=scenario != 'agile_only')
        batches = _batches(cfg, scenario)
        header = _header(cfg)
        results: Dict[str, List[EpisodeResult]] = {}
        metrics: Dict[str, Dict[str, float]] = {}
        rows, records = [], []
        for label, (mode, specs) in batches.items():
            results[label] = run_batch(cfg, components, specs, mode, cfg.evaluation.trace_episodes)
            metrics[label] = analysis.aggregate_metrics(r.outcome for r in results[label])
            logger.info("%s/%s: collision %.2f%%, reach %.2f%%, timeout %.2f%%, v_peak %.3f", scenario, label,
                        metrics[label]['collision'], metrics[label]['reach'], metrics[label]['timeout'],
                        metrics[label]['v_peak'])
            for k, (result, spec) in enumerate(zip(results[label], specs)):
                trace_file = None
                if result.trace is not None:
                    trace_file = f'traces/{label}_{k:04d}.csv'
                    artifacts.write_csv(result.trace, out / trace_file)
                outcome = result.outcome.to_dict()
                rows.append({'episode': k, 'mode': label, **outcome,
                             'switches': len(result.switch_events), 'digest': result.digest})
                records.append(dict(header, scenario=scenario, index=k, mode=label, run_mode=mode,
                                    spec=spec.to_dict(), outcome=outcome, switch_events=result.switch_events,
                                    digest=result.digest, trace_file=trace_file))
            db.add_episodes(run_id, ({'episode_index': k, 'mode': label, **r.outcome.to_dict()}
                                     for k, r in enumerate(results[label])))

        frame = analysis.metrics_frame(metrics)
        first_specs = next(iter(batches.values()))[1]
        checks = _scenario_checks(cfg, scenario, metrics, results, first_specs)
        artifacts.write_csv(pd.DataFrame(rows), out / 'episodes.csv')
        artifacts.write_csv(frame, out / 'metrics.csv')
        artifacts.write_json(out / 'episodes.json', records)
        artifacts.write_json(out / 'metrics.json', dict(header, scenario=scenario, metrics=metrics, checks=checks))
        summary.update(metrics=metrics, checks=checks)
    return frame


def replay(cfg: ExperimentConfig, record_path, index: int, mode: str = 'safeguarded') -> pd.DataFrame:
    """Re-run a recorded episode and check that it retraces the same states.

    Raises:
        ContractError: If the record is missing or the replay diverges
    """
    records = artifacts.read_json(record_path)
    matches = [r for r in records if r['index'] == index and r['mode'] == mode]
    if not matches:
        raise ContractError(f"No episode {index} with mode '{mode}' in {record_path}")
    record = matches[0]
    if record['seed'] != cfg.seed:
        logger.warning("Record was produced with seed %s; replaying with it", record['seed'])
        cfg = cfg.replace(seed=int(record['seed']))
    with recorded_run(cfg, 'replay', record['scenario']) as (_, _, summary):
        spec = EpisodeSpec.from_dict(record['spec'])
        components = load_components(cfg, need_model=record['run_mode'] != 'agile_only')
        result = _run_episode_job(EpisodeJob(cfg, components, spec, record['run_mode'], keep_trace=True))
        if result.digest != record['digest']:
            raise ContractError(f"Replay of episode {index} diverged: digest {result.digest[:12]} "
                                f"!= recorded {record['digest'][:12]}")
        if result.outcome.classification != record['outcome']['classification']:
            raise ContractError(f"Replay of episode {index} ended in {result.outcome.classification}, "
                                f"recorded {record['outcome']['classification']}")
        path = run_dir(cfg, 'replay', f"{record['scenario']}_{mode}_{index:04d}.csv")
        artifacts.write_csv(result.trace, path)
        summary.update(index=index, mode=mode, digest=result.digest, trace=str(path))
        logger.info("Replayed episode %d (%s): %s, trace at %s", index, mode, result.outcome.classification, path)
    return result.trace


# ---------------------------------------------------------------------------
# Inspection tools
# ---------------------------------------------------------------------------

def _oracle_grid(cfg: ExperimentConfig) -> StateGrid:
    ev = cfg.evaluation
    return StateGrid((GridAxis('x', *ev.oracle_grid_x), GridAxis('y', *ev.oracle_grid_y)),
                     fixed=(0.0, 0.0, ev.oracle_heading, ev.oracle_speed, 0.0))


def _raster(mask: np.ndarray) -> np.ndarray:
    """``[ix, iy]`` grid to image orientation: rows are y, top row is the largest y."""
    return np.asarray(mask).T[::-1]


def oracle(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Brute-force set membership over an (x, y) grid, per payload mass.

    Also writes exact trajectory values on a subset of the grid and, when a
    phase2 table exists and the agile policy is used, its sign agreement with
    the reach-avoid membership.
    """
    ev = cfg.evaluation
    out = run_dir(cfg, 'oracle')
    with recorded_run(cfg, 'oracle') as (_, _, summary):
        world = cfg.verification_world()
        policy = load_phase1(cfg)[0] if ev.oracle_policy == 'agile' else GoalSeekingController(dynamics=cfg.dynamics)
        grid = _oracle_grid(cfg)
        states = grid.states()
        loops = [RobotClosedLoop(policy, EnvParams(payload_mass=m), world, cfg.dynamics) for m in ev.oracle_masses]
        sets = sweep_sets(states, loops, ev.oracle_horizon, grid.shape)

        table = None
        table_path = run_dir(cfg, 'phase2', 'table.ckpt')
        if ev.oracle_policy == 'agile' and table_path.exists():
            table = artifacts.load_table(table_path)
        gamma = table.gamma if table is not None else cfg.ravalue.gamma_table
        picks = np.unique(np.linspace(0, len(states) - 1, min(ev.oracle_value_states, len(states))).astype(int))

        report: Dict[str, Any] = dict(_header(cfg), policy=ev.oracle_policy, horizon=ev.oracle_horizon, masses={})
        frames, value_frames = [], []
        for mass, loop, membership in zip(ev.oracle_masses, loops, sets):
            name = f'mass_{mass:g}'
            for field_name in ('safe', 'reaches', 'reach_avoid'):
                artifacts.write_pgm(out / f'{name}_{field_name}.pgm', _raster(getattr(membership, field_name)))
            frames.append(pd.DataFrame({
                'mass': mass, 'x': states[:, 0], 'y': states[:, 1],
                'safe': membership.safe.ravel(), 'reaches': membership.reaches.ravel(),
                'reach_avoid': membership.reach_avoid.ravel(),
            }))
            values = exact_values_many(states[picks], loop, ev.oracle_horizon, gamma)
            ra = membership.reach_avoid.ravel()[picks]
            value_frames.append(pd.DataFrame({
                'mass': mass, 'x': states[picks, 0], 'y': states[picks, 1], 'reach_avoid': ra,
                'undiscounted': values[:, 0], 'discounted': values[:, 1], 'drabe': values[:, 2],
            }))
            entry = dict(membership.counts(), algebra_holds=membership.algebra_holds(),
                         sign_agreement=float(np.mean((values[:, 0] <= 0) == ra)))
            if table is not None:
                table_values, _ = table.value_batch(states, EnvParams(payload_mass=mass).estimated_vector())
                band = analysis.boundary_band(membership.reach_avoid)
                entry['table_agreement'] = analysis.membership_agreement(
                    table_values.reshape(grid.shape), membership.reach_avoid, band)
            report['masses'][f'{mass:g}'] = entry
        artifacts.write_csv(pd.concat(frames, ignore_index=True), out / 'membership.csv')
        artifacts.write_csv(pd.concat(value_frames, ignore_index=True), out / 'values.csv')
        artifacts.write_json(out / 'report.json', report)
        summary.update(report)
    return report


def analyze(cfg: ExperimentConfig) -> analysis.LipschitzReport:
    """Measure Lipschitz constants and compare the converged table with the bound.

    Margins enter the table scaled by ``margin_scale``, so the measured margin
    constants are divided by it before the bound is evaluated. When
    ``evaluation.lipschitz_gamma`` differs from the table discount, a table
    is solved at that discount first.
    """
    ev = cfg.evaluation
    out = run_dir(cfg, 'analyze')
    with recorded_run(cfg, 'analyze') as (_, _, summary):
        agile = load_phase1(cfg)[0]
        table = load_value_model(cfg, 'table')
        world = table.world
        L_l, L_zeta = analysis.estimate_margin_lipschitz(world, stream(cfg.seed, 'analyze', 'margins'))
        x_min, y_min, x_max, y_max = world.arena_bounds
        lo = [x_min, y_min, -math.pi, 0.0, -1.0]
        hi = [x_max, y_max, math.pi, cfg.dynamics.v_max, 1.0]
        dynamics_estimate = analysis.estimate_dynamics_lipschitz(
            analysis.closed_loop_transition(agile, world, cfg.dynamics), lo, hi, cfg.randomization,
            ev.lipschitz_budget, stream(cfg.seed, 'analyze', 'dynamics'))

        gamma = ev.lipschitz_gamma if ev.lipschitz_gamma is not None else table.gamma
        if not math.isclose(gamma, table.gamma):
            table, _ = value_iteration(initial_table(table.grid, world, cfg.ravalue, cfg.randomization, gamma),
                                       agile, cfg.dynamics, cfg.ravalue.tol, cfg.ravalue.max_sweeps)
        rng = stream(cfg.seed, 'analyze', 'probes')
        points = table.grid.states()
        probes = points[rng.choice(len(points), size=min(ev.lipschitz_probes, len(points)), replace=False)]
        e_pairs = analysis.make_e_pairs(stream(cfg.seed, 'analyze', 'pairs'), cfg.randomization, ev.lipschitz_probes)
        empirical = analysis.empirical_value_lipschitz(table, probes, e_pairs, cfg.randomization)

        scale = table.margin_scale
        report = analysis.lipschitz_report(L_l / scale, L_zeta / scale, dynamics_estimate.value, gamma, empirical,
                                           ev.bound_slack, dynamics_estimate.pairs)
        artifacts.write_json(out / 'lipschitz.json', dict(
            _header(cfg), **report.to_dict(), L_l_meters=L_l, L_zeta_meters=L_zeta, margin_scale=scale,
            dynamics_pairs_skipped=dynamics_estimate.skipped))
        summary.update(report.to_dict())
    return report


def _paired_agile_ablation(cfg: ExperimentConfig, study: str, seeds: Optional[int],
                           ablated: Dict[str, Any], details: Dict[str, Any]) -> analysis.SignTest:
    """Train the configured agile setup and an ablated one per seed and sign-test the losses.

    Each seed trains both variants from the same initial estimator; the sign
    test asks whether the configured setup ends with the lower estimator
    validation loss. ``ablated`` holds the ``train_agile`` keyword changes.
    """
    seeds = seeds or cfg.evaluation.fusion_seeds
    out = run_dir(cfg, 'analyze')
    with recorded_run(cfg, study) as (_, _, summary):
        rows = []
        for k in range(seeds):
            sub = cfg.replace(seed=(cfg.seed + k) % SEED_LIMIT)
            initial = init_estimator(stream(sub.seed, 'phase1', 'estimator-init'), cfg.estimator)
            base = {'schedule': cfg.estimator.alpha_schedule, 'joint': True}
            losses = {}
            for name, changes in (('configured', {}), ('ablated', ablated)):
                result = train_agile(sub.context(), cfg.agile, initial, workers=cfg.workers, label='agile',
                                     validation_episodes=cfg.evaluation.validation_episodes,
                                     **dict(base, **changes))
                losses[name] = result.validation_loss
            rows.append({'seed': sub.seed, **losses})
            logger.info("%s seed %d: configured %.5f, ablated %.5f", study.capitalize(), sub.seed,
                        losses['configured'], losses['ablated'])
        frame = pd.DataFrame(rows, columns=['seed', 'configured', 'ablated'])
        test = analysis.paired_sign_test(frame['ablated'], frame['configured'])
        artifacts.write_csv(frame, out / f'{study}.csv')
        artifacts.write_json(out / f'{study}.json', dict(_header(cfg), **details, sign_test=asdict(test)))
        summary.update(sign_test=asdict(test))
    return test


def fusion_ablation(cfg: ExperimentConfig, seeds: Optional[int] = None,
                    ablated: str = 'estimate_only') -> analysis.SignTest:
    """Agile training under the configured fusion schedule against ``ablated``, paired by seed."""
    return _paired_agile_ablation(cfg, 'fusion', seeds, {'schedule': ablated},
                                  {'schedule': cfg.estimator.alpha_schedule, 'ablated': ablated})


def joint_ablation(cfg: ExperimentConfig, seeds: Optional[int] = None) -> analysis.SignTest:
    """Joint policy and estimator training against separate training, paired by seed.

    The separate variant searches the policy on the true parameters and fits
    the estimator afterwards on rollouts of that privileged policy.
    """
    return _paired_agile_ablation(cfg, 'joint', seeds, {'joint': False},
                                  {'schedule': cfg.estimator.alpha_schedule, 'ablated': 'separate'})


def heatmap(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Value heatmaps over obstacle offsets for the table and the network."""
    ev = cfg.evaluation
    out = run_dir(cfg, 'heatmap')
    with recorded_run(cfg, 'heatmap') as (_, _, summary):
        offsets = np.linspace(-ev.heatmap_extent, ev.heatmap_extent, ev.heatmap_cells)
        x0, y0, _ = cfg.layout.start_pose
        probe = State(x0, y0, 0.0, ev.probe_speed, 0.0)
        report: Dict[str, Any] = dict(_header(cfg), probe=probe.as_array().tolist())
        for kind in ('table', 'net'):
            model = load_value_model(cfg, kind)
            result = analysis.heatmap(model, probe, offsets, offsets, ev.heatmap_masses,
                                      world=cfg.verification_world())
            artifacts.write_csv(result.to_frame(), out / f'{kind}.csv')
            lo = min(float(r.min()) for r in result.rasters.values())
            hi = max(float(r.max()) for r in result.rasters.values())
            for mass in result.masses:
                artifacts.write_pgm(out / f'{kind}_mass_{mass:g}.pgm', result.rasters[mass][::-1], lo, hi)
            report[kind] = {
                'forward_means': {f'{m:g}': v for m, v in result.forward_means().items()},
                'mass_monotone': result.mass_monotone(),
                'clamped_cells': int(result.clamped.sum()),
            }
            logger.info("%s heatmap: forward means %s, monotone in mass: %s", kind,
                        report[kind]['forward_means'], report[kind]['mass_monotone'])
        artifacts.write_json(out / 'summary.json', report)
        summary.update(report)
    return report
