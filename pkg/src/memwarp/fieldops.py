"""Deformation-field numerics: grids, warping, composition, integration,
upsampling and Jacobian analysis.

Conventions used throughout the package:

* Scalar volumes are arrays of shape ``(H, W, D)``; displacement and
  velocity fields carry a trailing 3-vector, shape ``(H, W, D, 3)``.
  Component ``c`` of a vector is an offset along array axis ``c`` and is
  expressed in voxels. Physical spacing enters metric computations only.
* Warping is a pull-back: ``out(x) = vol(x + u(x))``. Samples outside the
  grid clamp to the border voxel, so trilinear outputs are always convex
  combinations of input values.
* Tensor-level functions operate on channels-first batches,
  ``(B, C, H, W, D)`` for volumes/features and ``(B, 3, H, W, D)`` for
  fields, and are differentiable wherever that makes sense (trilinear
  sampling is differentiable w.r.t. both the volume and the field).

All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError

Spacing = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    s = tuple(float(v) for v in spacing)
    if len(s) != 3 or any(v <= 0 for v in s):
        raise ContractError(f"spacing must be 3 positive floats, got {spacing!r}")
    return s


@dataclass(frozen=True)
class GridShape:
    """Voxel lattice: dimensions plus physical spacing in mm per voxel."""

    height: int
    width: int
    depth: int
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = (self.height, self.width, self.depth)
        if any(int(d) != d or d < 2 for d in dims):
            raise ContractError(f"all grid dims must be integers >= 2, got {dims}")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.depth)

    @property
    def voxel_count(self) -> int:
        return self.height * self.width * self.depth


def _check_dims(data: np.ndarray, what: str, vector: bool = False):
    want = 4 if vector else 3
    if data.ndim != want:
        raise ContractError(f"{what} must be {want}-D, got shape {data.shape}")
    if vector and data.shape[-1] != 3:
        raise ContractError(f"{what} must end in a 3-vector axis, got {data.shape}")
    if any(d < 2 for d in data.shape[:3]):
        raise ContractError(f"{what} spatial dims must be >= 2, got {data.shape}")


@dataclass
class ImageVolume:
    """Scalar intensity grid. After preprocessing values lie in [0, 1]."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        _check_dims(self.data, "ImageVolume.data")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("ImageVolume contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.data.shape, spacing=self.spacing)


@dataclass
class LabelVolume:
    """Integer anatomical-label grid; label 0 is background."""

    data: np.ndarray
    num_classes: int
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ContractError(f"LabelVolume requires an integer dtype, got {self.data.dtype}")
        _check_dims(self.data, "LabelVolume.data")
        if self.num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise ContractError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"found range [{self.data.min()}, {self.data.max()}]"
            )
        self.spacing = _check_spacing(self.spacing)

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.data.shape, spacing=self.spacing)


@dataclass
class DisplacementField:
    """Per-voxel displacement u(x) in voxel units; phi(x) = x + u(x)."""

    vectors: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if not np.issubdtype(self.vectors.dtype, np.floating):
            self.vectors = self.vectors.astype(np.float32)
        _check_dims(self.vectors, "DisplacementField.vectors", vector=True)
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("DisplacementField contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.vectors.shape[:3], spacing=self.spacing)


@dataclass
class VelocityField:
    """Stationary velocity field in voxel units."""

    vectors: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if not np.issubdtype(self.vectors.dtype, np.floating):
            self.vectors = self.vectors.astype(np.float32)
        _check_dims(self.vectors, "VelocityField.vectors", vector=True)
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("VelocityField contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.vectors.shape[:3], spacing=self.spacing)


# ---------------------------------------------------------------------------
# Tensor-level core (channels-first batches)
# ---------------------------------------------------------------------------

def identity_grid_tensor(dims, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel coordinate grid, shape (3, H, W, D)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def _sample_at(vol: torch.Tensor, pos: torch.Tensor, mode: str) -> torch.Tensor:
    """Sample `vol` (B, C, H, W, D) at absolute voxel coordinates
    `pos` (B, 3, H', W', D'), clamping out-of-grid samples to the border.

    Trilinear sampling is differentiable w.r.t. both arguments; nearest is
    a hard gather (no gradient to `pos`).
    """
    B, C = vol.shape[:2]
    sizes = vol.shape[2:]
    out_spatial = pos.shape[2:]
    n = int(np.prod(out_spatial))
    flat_vol = vol.reshape(B, C, -1)

    if mode == "nearest":
        idx = [
            torch.floor(pos[:, a] + 0.5).long().clamp_(0, sizes[a] - 1).reshape(B, n)
            for a in range(3)
        ]
        flat_idx = (idx[0] * sizes[1] + idx[1]) * sizes[2] + idx[2]
        out = flat_vol.gather(2, flat_idx.reshape(B, 1, n).expand(B, C, n))
        return out.reshape(B, C, *out_spatial)

    if mode != "trilinear":
        raise ContractError(f"unknown interpolation mode {mode!r}")

    lo, hi, frac = [], [], []
    for a in range(3):
        p = pos[:, a].clamp(0, sizes[a] - 1)
        i0 = torch.floor(p).long().clamp_(0, max(sizes[a] - 2, 0))
        lo.append(i0.reshape(B, n))
        hi.append((i0 + 1).clamp_(max=sizes[a] - 1).reshape(B, n))
        frac.append((p - i0.to(p.dtype)).reshape(B, n))

    # all 8 corners in one gather: indices (B, 8, n), weights (B, 8, n)
    corners, weights = [], []
    for dx in (0, 1):
        wx = frac[0] if dx else 1.0 - frac[0]
        ix = hi[0] if dx else lo[0]
        for dy in (0, 1):
            wxy = wx * (frac[1] if dy else 1.0 - frac[1])
            ixy = ix * sizes[1] + (hi[1] if dy else lo[1])
            for dz in (0, 1):
                weights.append(wxy * (frac[2] if dz else 1.0 - frac[2]))
                corners.append(ixy * sizes[2] + (hi[2] if dz else lo[2]))
    idx = torch.stack(corners, dim=1).reshape(B, 1, 8 * n).expand(B, C, 8 * n)
    vals = flat_vol.gather(2, idx).reshape(B, C, 8, n)
    w = torch.stack(weights, dim=1).reshape(B, 1, 8, n)
    out = (vals * w).sum(dim=2)
    return out.reshape(B, C, *out_spatial)


def warp_tensor(vol: torch.Tensor, disp: torch.Tensor, mode: str = "trilinear") -> torch.Tensor:
    """Pull-back warp of (B, C, H, W, D) by a displacement (B, 3, H, W, D)."""
    if vol.shape[2:] != disp.shape[2:] or disp.shape[1] != 3:
        raise ContractError(
            f"volume {tuple(vol.shape)} and field {tuple(disp.shape)} do not share a grid"
        )
    base = identity_grid_tensor(vol.shape[2:], dtype=disp.dtype, device=disp.device)
    return _sample_at(vol, base.unsqueeze(0) + disp, mode)


def compose_tensor(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Displacement of phi_outer o phi_inner:
    u(x) = u_inner(x) + u_outer(x + u_inner(x))."""
    if outer.shape != inner.shape:
        raise ContractError(f"cannot compose fields of shapes {tuple(outer.shape)} and {tuple(inner.shape)}")
    return inner + warp_tensor(outer, inner)


def integrate_velocity_tensor(vel: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Scaling and squaring: u <- v / 2**steps, then u <- u o u, `steps` times."""
    if steps < 0:
        raise ContractError(f"integration steps must be >= 0, got {steps}")
    u = vel / (2.0 ** steps)
    for _ in range(steps):
        u = compose_tensor(u, u)
    return u


def resize2x_tensor(x: torch.Tensor, target_dims=None) -> torch.Tensor:
    """Trilinear doubling of spatial resolution: output voxel j samples the
    input at coordinate j/2, so even output voxels copy input voxels exactly.
    `target_dims` may crop the doubled grid (it can never exceed it)."""
    dims = x.shape[2:]
    out_dims = tuple(2 * d for d in dims)
    if target_dims is not None:
        target_dims = tuple(int(d) for d in target_dims)
        if any(t > o for t, o in zip(target_dims, out_dims)):
            raise ContractError(f"target dims {target_dims} exceed doubled dims {out_dims}")
        out_dims = target_dims
    pos = identity_grid_tensor(out_dims, dtype=x.dtype, device=x.device) * 0.5
    return _sample_at(x, pos.unsqueeze(0).expand(x.shape[0], -1, -1, -1, -1), "trilinear")


def upsample2_tensor(field: torch.Tensor, target_dims=None) -> torch.Tensor:
    """Upsample a displacement/velocity field to 2x resolution and double
    its vector magnitudes (coarse-level voxel offsets span two fine voxels)."""
    return resize2x_tensor(field, target_dims) * 2.0


def jacobian_determinant_tensor(disp: torch.Tensor) -> torch.Tensor:
    """det(I + grad u) per voxel for (B, 3, H, W, D); central differences at
    interior voxels, one-sided at borders. Returns (B, H, W, D)."""
    if any(d < 3 for d in disp.shape[2:]):
        raise ContractError(f"Jacobian needs >= 3 voxels per axis, got {tuple(disp.shape[2:])}")
    g = [torch.gradient(disp[:, c], dim=(1, 2, 3)) for c in range(3)]
    J = [[g[a][b] + (1.0 if a == b else 0.0) for b in range(3)] for a in range(3)]
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    return det


# ---------------------------------------------------------------------------
# Volume-level API
# ---------------------------------------------------------------------------

def field_to_tensor(field: DisplacementField | VelocityField | np.ndarray, dtype=None) -> torch.Tensor:
    vec = field.vectors if hasattr(field, "vectors") else np.asarray(field)
    t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(vec, -1, 0)))
    if dtype is not None:
        t = t.to(dtype)
    return t.unsqueeze(0)


def tensor_to_field(t: torch.Tensor, spacing: Spacing = (1.0, 1.0, 1.0), kind=DisplacementField):
    vec = np.moveaxis(t.detach().squeeze(0).cpu().numpy(), 0, -1)
    return kind(vectors=vec, spacing=spacing)


def identity_displacement(shape: GridShape) -> DisplacementField:
    """Zero displacement everywhere: phi(x) = x."""
    vec = np.zeros(shape.dims + (3,), dtype=np.float32)
    return DisplacementField(vectors=vec, spacing=shape.spacing)


def warp(vol, field: DisplacementField, interp: str = "trilinear"):
    """Warp an ImageVolume (trilinear or nearest) or LabelVolume (nearest
    only) by a displacement field on the same grid."""
    if isinstance(vol, LabelVolume):
        if interp != "nearest":
            raise ContractError("label volumes must be warped with nearest-neighbor interpolation")
        if vol.data.shape != field.vectors.shape[:3]:
            raise ContractError(f"volume {vol.data.shape} and field {field.vectors.shape[:3]} shapes differ")
        src = torch.from_numpy(vol.data.astype(np.float64)).reshape(1, 1, *vol.data.shape)
        out = _warp_np(src, field)
        return LabelVolume(
            data=np.rint(out).astype(vol.data.dtype),
            num_classes=vol.num_classes,
            spacing=vol.spacing,
        )
    if isinstance(vol, ImageVolume):
        data, spacing = vol.data, vol.spacing
    else:
        data, spacing = np.asarray(vol), field.spacing
    if data.shape != field.vectors.shape[:3]:
        raise ContractError(f"volume {data.shape} and field {field.vectors.shape[:3]} shapes differ")
    src = torch.from_numpy(data.astype(np.float64)).reshape(1, 1, *data.shape)
    out = _warp_np(src, field, interp).astype(data.dtype)
    if isinstance(vol, ImageVolume):
        return ImageVolume(data=out, spacing=spacing)
    return out


def _warp_np(src: torch.Tensor, field: DisplacementField, interp: str = "nearest") -> np.ndarray:
    disp = field_to_tensor(field, dtype=src.dtype)
    return warp_tensor(src, disp, mode=interp).squeeze(0).squeeze(0).numpy()


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """u_out(x) = u_inner(x) + u_outer(x + u_inner(x)), componentwise trilinear."""
    if outer.vectors.shape != inner.vectors.shape:
        raise ContractError("composed fields must share a grid shape")
    out = compose_tensor(
        field_to_tensor(outer, torch.float64), field_to_tensor(inner, torch.float64)
    )
    return tensor_to_field(out, spacing=inner.spacing)


def integrate_velocity(vel: VelocityField, steps: int = 7) -> DisplacementField:
    """Diffeomorphic layer: integrate a stationary velocity by scaling and
    squaring. steps=0 reinterprets the velocity as a displacement."""
    out = integrate_velocity_tensor(field_to_tensor(vel, torch.float64), steps)
    return tensor_to_field(out, spacing=vel.spacing)


def upsample_scale2(field: DisplacementField | VelocityField, target_dims=None):
    """Trilinear spatial upsampling to 2x resolution with vectors doubled."""
    out = upsample2_tensor(field_to_tensor(field, torch.float64), target_dims)
    return tensor_to_field(out, spacing=field.spacing, kind=type(field))


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Scalar grid of det(I3 + grad u); 1 everywhere for the identity."""
    det = jacobian_determinant_tensor(field_to_tensor(field, torch.float64))
    return det.squeeze(0).numpy()
