#!/usr/bin/env python3
"""Time solver iterations over a small scaling grid."""

import sys
from pathlib import Path

from kernelpi.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(main(["complexity-probe", str(ROOT / "configs" / "complexity_probe.yaml"), *sys.argv[1:]]))
