"""Parallax attention lab.

Dense references for the local-linear attention family, a tiled streaming
Parallax kernel with I/O accounting, closed-form gradients, Muon/AdamW, a
small trainable transformer on synthetic recall tasks, and diagnostics.
"""

from .family import AttnInputs, parallax_dense, softmax_attention_dense
from .streaming import TileConfig, parallax_stream_forward
from .backward import parallax_dense_backward, parallax_stream_backward

__version__ = "0.1.0"

__all__ = [
    "AttnInputs",
    "TileConfig",
    "parallax_dense",
    "parallax_dense_backward",
    "parallax_stream_backward",
    "parallax_stream_forward",
    "softmax_attention_dense",
]
