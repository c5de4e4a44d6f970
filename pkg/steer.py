#!/usr/bin/env python
"""Command-line launcher for the steering tools."""
import os
import sys


def main():
    # Make the repo root importable so that `from src.cli import ...` works
    # regardless of the current working directory.
    repo_root = os.path.dirname(os.path.abspath(__file__))
    if repo_root not in sys.path:
        sys.path.insert(0, repo_root)

    from src.cli import main as cli_main

    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
