#!/usr/bin/env python3
"""Compare the learned linear-kernel policy against the exact quadratic solution."""

import sys
from pathlib import Path

from kernelpi.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(main(["oracle-compare", str(ROOT / "configs" / "oracle_lqr.yaml"), *sys.argv[1:]]))
