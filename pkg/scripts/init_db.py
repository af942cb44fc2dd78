"""Run registry initialization script.

Creates the registry schema (ExperimentRun, EpisodeRecord). The pipeline
creates it on first use as well; this script is for setting up a registry
ahead of time or inspecting an existing one.
"""

import sys
from pathlib import Path

# Add parent directory to path to allow importing Model
repo_root = Path(__file__).parent.parent
sys.path.insert(0, str(repo_root))

from Model.db_context import DBContext  # noqa: E402


def init_db(db_path: str = "runs/default/runs.s3db", verbose: bool = True):
    """Initialize the registry schema.

    Args:
        db_path: Path to SQLite database file
        verbose: Print status messages

    Returns:
        True if successful, False otherwise
    """
    try:
        if verbose:
            print(f"Initializing run registry at: {db_path}")

        with DBContext(db_path) as db_context:
            if verbose:
                print("Registry schema created successfully!")
                print("Tables created:")
                print("  - ExperimentRun")
                print("  - EpisodeRecord")

                print(f"\nCurrent run count: {db_context.count()}")
                for run in db_context.list_runs(limit=5):
                    print(f"  {run!r}")

        return True

    except Exception as e:
        if verbose:
            print(f"Error initializing registry: {e}", file=sys.stderr)
        return False


def main():
    """Main entry point for the script."""
    import argparse

    parser = argparse.ArgumentParser(
        description="Initialize the run registry database"
    )
    parser.add_argument(
        '--db-path',
        default='runs/default/runs.s3db',
        help='Path to SQLite database file (default: runs/default/runs.s3db)'
    )
    parser.add_argument(
        '--quiet',
        action='store_true',
        help='Suppress output messages'
    )

    args = parser.parse_args()

    success = init_db(db_path=args.db_path, verbose=not args.quiet)

    if success:
        if not args.quiet:
            print("\nRegistry initialization completed successfully!")
        sys.exit(0)
    else:
        if not args.quiet:
            print("\nRegistry initialization failed!", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
