import numpy as np
import pytest

from mcwc.codec import CodecConfig
from mcwc.entropy import EntropyFitConfig
from mcwc.predictor import TrainConfig


def tiny_codec_config(**overrides) -> CodecConfig:
    """Fast desk-scale settings for round-trip tests."""
    base = dict(
        keyframe_interval=4, d_lat=16, d_emb=8,
        train=TrainConfig(steps=30, pred_phase_steps=20, warmup_steps=3, seed=0),
        entropy_fit=EntropyFitConfig(steps=50, seed=0),
    )
    base.update(overrides)
    return CodecConfig(**base)


def checkpoints_bit_equal(a, b) -> bool:
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if set(la.tensors) != set(lb.tensors):
            return False
        for name in la.tensors:
            ta, tb = la.tensors[name], lb.tensors[name]
            if ta.shape != tb.shape or ta.tobytes() != tb.tobytes():
                return False
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(0)
