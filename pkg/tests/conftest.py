from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from segloop.geom import BitMask

settings.register_profile(
    "segloop",
    deadline=None,
    derandomize=True,
    max_examples=150,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("segloop")


@st.composite
def mask_pairs(draw, max_side: int = 16):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    cells = st.lists(st.booleans(), min_size=h * w, max_size=h * w)
    a = np.array(draw(cells), dtype=bool).reshape(h, w)
    b = np.array(draw(cells), dtype=bool).reshape(h, w)
    return BitMask(a), BitMask(b)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
