"""Spatial false discovery rate control on 3-D statistic volumes.

The package fits a fully connected binary hidden random field to a volume
of z-statistics, computes per-voxel local indices of significance (LIS)
by mean-field inference, and rejects hypotheses with a step-up procedure
that controls the false discovery rate. The quadratic cost of the fully
connected field is avoided by approximate Gaussian filtering on a
permutohedral lattice, which keeps every message-passing sweep linear in
the number of voxels.
"""

from latticefdr.errors import (
    CheckpointFormatError,
    DegenerateInputError,
    LatticeFdrError,
    ProblemTooLargeError,
    VolumeFormatError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError",
    "DegenerateInputError",
    "LatticeFdrError",
    "ProblemTooLargeError",
    "VolumeFormatError",
    "__version__",
]
