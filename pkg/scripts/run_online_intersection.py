#!/usr/bin/env python3
"""Reproduce the model-free mixed-traffic experiment from the shipped config."""

import sys
from pathlib import Path

from kernelpi.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(main(["online", str(ROOT / "configs" / "online_intersection.yaml"), *sys.argv[1:]]))
