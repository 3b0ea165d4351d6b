import numpy as np
import pytest

from bidicap.model import ModelConfig, ParameterSet


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=11, feature_dim=5, d_model=8, d_k=4, d_v=4, d_ff=16,
                n_layers=1, n_heads=2, p_dropout=0.0, lam=0.1, af="relu", max_len=8)
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_model(seed=0, dtype=np.float64, **kw):
    cfg = tiny_config(**kw)
    params = ParameterSet.initialize(cfg, np.random.default_rng(seed), dtype=dtype)
    return params, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
