"""MemWarp: discontinuity-preserving deformable registration with a
Laplacian pyramid warping network and memory-generated anatomical filters."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateMemoryError,
    MemWarpError,
    NumericError,
    UndefinedMetricError,
    UnsupportedModeError,
)
from .fieldops import (
    DisplacementField,
    GridShape,
    ImageVolume,
    LabelVolume,
    VelocityField,
    compose,
    identity_displacement,
    integrate_velocity,
    jacobian_determinant,
    upsample_scale2,
    warp,
)

__version__ = "0.1.0"
