#!/usr/bin/env python3
"""
Main entry point for the emshape package.

This allows the package to be run directly with:
- emshape solve run.toml
- python -m emshape optimize run.toml
"""

import logging
import sys
from typing import List, Optional


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, configure logging and dispatch the subcommand."""
    try:
        from .cli import build_parser, dispatch

        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        return dispatch(args)

    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 1
    except ImportError as e:
        print(f"Failed to import emshape components: {e}")
        print("Make sure all dependencies are installed.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
