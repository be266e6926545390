#!/usr/bin/env python3
"""Run the rho-vae command line (train, compare, sample, check, synth)."""

import sys
from pathlib import Path

# Add the repository root to the Python path so the package imports without installation
repo_root = Path(__file__).resolve().parent.parent
if str(repo_root) not in sys.path:
    sys.path.insert(0, str(repo_root))

from rho_vae.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
