#!/usr/bin/env python3
"""
Point2Insert - point-guided video object insertion at desk scale
Usage: python point2insert.py <subcommand> [options]
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
