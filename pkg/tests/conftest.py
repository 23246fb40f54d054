"""Shared helpers: random signals and hypothesis strategies."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from coneregress import Signal

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_signal(rng: np.random.Generator, n: int, nonuniform: bool = False, weighted: bool = False,
                  scale: float = 1.0) -> Signal:
    z = np.cumsum(rng.uniform(0.2, 2.0, n)) if nonuniform else np.arange(1.0, n + 1)
    w = rng.uniform(0.5, 2.0, n) if weighted else None
    return Signal.from_values(scale * rng.standard_normal(n), z=z, w=w)


@st.composite
def signals(draw, min_n: int = 3, max_n: int = 12, nonuniform: bool | None = None, weighted: bool | None = None):
    """Hypothesis strategy for small signals, optionally with non-uniform z and weights."""
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    nonu = draw(st.booleans()) if nonuniform is None else nonuniform
    wt = draw(st.booleans()) if weighted is None else weighted
    return random_signal(np.random.default_rng(seed), n, nonu, wt, scale=draw(st.sampled_from([0.1, 1.0, 10.0])))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TRI = Signal.from_values([0.0, -1.0, 0.0])
TRI_X = np.full(3, -1.0 / 3.0)
