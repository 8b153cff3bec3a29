import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pairflow import tensor as T

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")



@pytest.fixture(autouse=True)
def test64_profile():
    prev = T.get_profile()
    T.set_profile("test64")
    yield
    T.set_profile(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(steps=3, **update):
    """A few-thousand-parameter model on 32x32 crops: fast enough for unit tests."""
    from pairflow.config import (EncoderConfig, LookupConfig, ModelConfig, TrainConfig,
                                 UpdateConfig)
    model = ModelConfig(
        features=EncoderConfig(out_dim=8, widths=(4, 6, 8)),
        context=EncoderConfig(out_dim=16, widths=(4, 6, 8), norm_kind="batch", context_split=(8, 8)),
        lookup=LookupConfig(radius=1, levels=2),
        update=UpdateConfig(hidden_dim=8, corr_widths=(8, 6), flow_widths=(4, 4), head_dim=8,
                            mask_dim=8, iterations_train=2, iterations_infer=3, **update))
    cfg = TrainConfig(model=model)
    cfg.optim.steps = steps
    cfg.optim.batch_size = 2
    cfg.data.height = cfg.data.width = 32
    cfg.val_every = 2
    cfg.val_samples = 2
    cfg.val_iters = 2
    return cfg


@pytest.fixture
def tiny():
    return tiny_config
