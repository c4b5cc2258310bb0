#!/usr/bin/env python
"""Command-line entry point: python run.py <command> [options]"""
import sys
from pathlib import Path

# Add src to path for local development
sys.path.insert(0, str(Path(__file__).parent))

from src.cosst.cli import main

if __name__ == "__main__":
    sys.exit(main())
