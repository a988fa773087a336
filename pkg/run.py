#!/usr/bin/env python3
"""
Entry point for Impatient Networks.

This script sets up the Python path and starts the command-line interface.
"""

import sys
from pathlib import Path

# Make `src` importable when run from a checkout
sys.path.insert(0, str(Path(__file__).parent))

try:
    from src.main import main
except ImportError as e:
    print(f"Import error: {e}", file=sys.stderr)
    print("Make sure all dependencies are installed:", file=sys.stderr)
    print("pip install -r requirements.txt", file=sys.stderr)
    sys.exit(1)

if __name__ == "__main__":
    main()
