"""Shared fixtures: a 64-bit micro model for math tests and a small synthetic
suite for retrieval/training tests. Both are session-scoped because they are
deterministic and read-only; tests that mutate state make their own copies.
"""

from __future__ import annotations

import numpy as np
import pytest

from kic.model import T2TConfig, init_params
from kic.synth import build_synthetic_suite


@pytest.fixture(scope="session")
def micro_config():
    return T2TConfig(vocab_size=11, d_model=8, n_heads=2, n_enc_layers=1,
                     n_dec_layers=1, d_ff=16, max_positions=32, seed=0,
                     dtype="f64")


@pytest.fixture(scope="session")
def micro_params(micro_config):
    return init_params(micro_config)


@pytest.fixture(scope="session")
def small_suite():
    # 24 train + 12 held-out facts per task; builds in about a second
    return build_synthetic_suite(seed=0, n_train=24)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
