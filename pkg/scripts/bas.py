"""Command-line entry point for the adaptive safety pipeline.

Examples:
    python scripts/bas.py phase1 --config configs/smoke.yaml --out runs/smoke
    python scripts/bas.py evaluate --config configs/default.yaml --scenario mass-shift --workers 8
    python scripts/bas.py replay --config configs/default.yaml --record runs/default/evaluate/randomized/episodes.json --index 3

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 contract
violation, 5 divergence or non-finite value, 6 oracle budget exceeded,
7 Lipschitz condition violated, 1 anything else.
"""

import logging
import sys
from pathlib import Path

# Add parent directory to path to allow importing mod and Model
repo_root = Path(__file__).parent.parent
sys.path.insert(0, str(repo_root))

from mod import harness  # noqa: E402
from mod.config import SCENARIOS, load_config  # noqa: E402
from mod.errors import BASError, ConfigError  # noqa: E402

logger = logging.getLogger('bas')

COMMANDS = ('phase1', 'phase2', 'phase3', 'evaluate', 'oracle', 'analyze', 'heatmap', 'replay')


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        description="Adaptive reach-avoid safety pipeline: training phases, evaluation and inspection tools"
    )
    parser.add_argument('command', choices=COMMANDS, help='Pipeline stage or inspection tool to run')
    parser.add_argument('--config', default='configs/default.yaml',
                        help='YAML configuration file (default: configs/default.yaml)')
    parser.add_argument('--seed', type=int, default=None, help='Override the root seed')
    parser.add_argument('--out', default=None, help='Override the output directory')
    parser.add_argument('--workers', type=int, default=None, help='Worker processes for episode batches')
    parser.add_argument('--scenario', choices=SCENARIOS, default='randomized',
                        help='Evaluation scenario (default: randomized)')
    parser.add_argument('--study', choices=('lipschitz', 'fusion', 'joint'), default='lipschitz',
                        help="analyze: Lipschitz bound check, fusion-schedule or joint-training ablation")
    parser.add_argument('--seeds', type=int, default=None, help='analyze ablations: number of paired seeds')
    parser.add_argument('--record', default=None, help='replay: episodes.json written by evaluate')
    parser.add_argument('--index', type=int, default=0, help='replay: episode index')
    parser.add_argument('--mode', default='safeguarded', help='replay: batch label of the episode')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='Log at DEBUG level')
    verbosity.add_argument('--quiet', action='store_true', help='Log warnings and errors only')
    return parser


def run(args) -> None:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out, workers=args.workers)
    if args.command == 'phase1':
        harness.phase1(cfg)
    elif args.command == 'phase2':
        harness.phase2(cfg)
    elif args.command == 'phase3':
        harness.phase3(cfg)
    elif args.command == 'evaluate':
        print(harness.evaluate(cfg, args.scenario).to_string(index=False))
    elif args.command == 'oracle':
        harness.oracle(cfg)
    elif args.command == 'analyze':
        if args.study in ('fusion', 'joint'):
            ablation = harness.fusion_ablation if args.study == 'fusion' else harness.joint_ablation
            test = ablation(cfg, args.seeds)
            print(f"{args.study.capitalize()} ablation: {test.wins} wins, {test.losses} losses, "
                  f"p = {test.p_value:.4g}")
        else:
            report = harness.analyze(cfg)
            print(f"L_f_pi = {report.L_f_pi:.4f}, condition holds: {report.condition_ok}, "
                  f"bound holds: {report.bound_holds}")
    elif args.command == 'heatmap':
        harness.heatmap(cfg)
    elif args.command == 'replay':
        if not args.record:
            raise ConfigError("replay needs --record")
        harness.replay(cfg, args.record, args.index, args.mode)


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        run(args)
    except BASError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception:
        logger.exception("Unexpected error")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
