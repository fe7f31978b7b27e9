"""Per-group learned scalar quantization of residuals and keyframe blocks.

Groups follow the block axis declared in the block spec (one group per block:
output channel for linear maps, head for attention). Values are handled as
(G, d) arrays so the element-to-group map is the row index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodeOutOfRange, EmptyGroup

STEP_FLOOR = 1e-8
RESIDUAL_QMAX = 127
KEYFRAME_QMAX = 255


@dataclass
class QuantizerParams:
    steps: np.ndarray   # (G,) float32, > 0
    means: np.ndarray   # (G,) float32
    q_max: int

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float32)
        self.means = np.asarray(self.means, dtype=np.float32)
        if self.q_max < 1:
            raise ValueError(f"q_max must be >= 1, got {self.q_max}")
        if np.any(self.steps <= 0):
            raise ValueError("step sizes must be positive")

    @property
    def groups(self) -> int:
        return int(self.steps.shape[0])


def init_quantizer(values: np.ndarray, gamma: float, q_max: int,
                   learned_means: bool = False, spread: str = "std") -> QuantizerParams:
    """Calibrate per-group steps from the data being coded.

    spread="std":   s = gamma * std(group), the residual-stream rule.
    spread="range": s = max|v - m| / q_max, so the clip range covers the data;
                    used for keyframe blocks where the wider code range buys
                    precision instead of headroom.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] == 0:
        raise EmptyGroup(f"need a (G, d) array with d >= 1, got shape {values.shape}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    means = values.mean(axis=1) if learned_means else np.zeros(values.shape[0])
    centered = values - means[:, None]
    if spread == "std":
        s = gamma * centered.std(axis=1)
    elif spread == "range":
        s = np.abs(centered).max(axis=1) / q_max
    else:
        raise ValueError(f"unknown spread rule {spread!r}")
    s = np.maximum(s, STEP_FLOOR)
    return QuantizerParams(steps=s.astype(np.float32),
                           means=means.astype(np.float32), q_max=int(q_max))


def quantize(values: np.ndarray, q: QuantizerParams) -> np.ndarray:
    """Round half away from zero, clamp to [-q_max, q_max]."""
    values = np.asarray(values, dtype=np.float64)
    scaled = (values - q.means[:, None].astype(np.float64)) / q.steps[:, None].astype(np.float64)
    rounded = np.trunc(scaled + np.copysign(0.5, scaled))
    return np.clip(rounded, -q.q_max, q.q_max).astype(np.int32)


def dequantize(codes: np.ndarray, q: QuantizerParams) -> np.ndarray:
    codes = np.asarray(codes)
    if np.any(np.abs(codes) > q.q_max):
        raise CodeOutOfRange(f"codes exceed clip range +-{q.q_max}")
    # float32 arithmetic: the decoder must reproduce these bytes exactly
    return (q.steps[:, None] * codes.astype(np.float32) + q.means[:, None]).astype(np.float32)


def clip_count(values: np.ndarray, q: QuantizerParams) -> int:
    """How many elements would land outside the clip range before clamping."""
    values = np.asarray(values, dtype=np.float64)
    scaled = (values - q.means[:, None].astype(np.float64)) / q.steps[:, None].astype(np.float64)
    rounded = np.trunc(scaled + np.copysign(0.5, scaled))
    return int(np.count_nonzero(np.abs(rounded) > q.q_max))
