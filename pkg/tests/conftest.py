import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stab.model import ModelConfig, StabModel  # noqa: E402


def small_config(**kw) -> ModelConfig:
    base = dict(d=8, depth=1, heads=2, dropout=0.0, J=4, T_train=0.69, T_infer=0.01, N_infer=8, init_seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_model(n_numeric=2, cardinalities=(3,), **kw) -> StabModel:
    return StabModel(small_config(**kw), n_numeric, cardinalities)


def random_batch(model: StabModel, rows: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x_num = rng.standard_normal((rows, model.n_numeric))
    x_cat = np.stack([rng.integers(0, c, rows) for c in model.cardinalities], axis=1) if model.cardinalities else None
    return x_num, x_cat


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
