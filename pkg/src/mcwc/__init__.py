"""mcwc: a weight-only checkpoint codec.

Aligns permutation-symmetric blocks across layers, predicts each layer from
previously decoded context, and entropy-codes quantized residuals into a
self-describing bitstream.
"""

from .align import AlignConfig
from .blocks import BlockMember, BlockTypeSpec, Permutation
from .codec import (
    CodecConfig,
    RateBreakdown,
    decode_checkpoint,
    decode_segments_parallel,
    encode_checkpoint,
    keyframe_indicator,
    rate_report,
)
from .container import Checkpoint, LayerTensors, load_checkpoint, param_count, save_checkpoint
from .entropy import EntropyFitConfig
from .predictor import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "BlockMember", "BlockTypeSpec", "Checkpoint", "CodecConfig",
    "EntropyFitConfig", "LayerTensors", "Permutation", "RateBreakdown",
    "TrainConfig", "decode_checkpoint", "decode_segments_parallel",
    "encode_checkpoint", "keyframe_indicator", "load_checkpoint", "param_count",
    "rate_report", "save_checkpoint",
]
