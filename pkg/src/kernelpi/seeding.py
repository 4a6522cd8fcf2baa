"""Deterministic random substreams fanned out from a single run seed."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

__all__ = ["substreams"]


def substreams(seed: int, names: Sequence[str]) -> Dict[str, np.random.Generator]:
    """One independent generator per purpose, keyed by name.

    Streams are derived by spawn index in the order the names are given, so a
    consumer drawing more or fewer numbers never perturbs the other streams.
    Call sites must therefore keep their name tuples stable.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
