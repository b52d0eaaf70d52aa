"""splatpipe: budgeted capture-to-splats reconstruction.

Stages: information-gated frame selection, Schur-complement bundle
adjustment, single-reference plane-sweep MVS, surface-aligned Gaussian
seeding, and a fixed-budget differentiable splatting trainer with a
replay-cache backward pass.
"""

from .scene import (
    DenseCloud,
    Frame,
    GaussianModel,
    Intrinsics,
    PoseSE3,
    SparseMap,
    luma_of,
)

__all__ = [
    "DenseCloud",
    "Frame",
    "GaussianModel",
    "Intrinsics",
    "PoseSE3",
    "SparseMap",
    "luma_of",
]

__version__ = "0.1.0"
