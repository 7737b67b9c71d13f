"""Training losses and the composite objective.

All reductions are means over voxels (and batch) so the smoothness weight
transfers across grid sizes. Soft Dice terms exclude the background class,
which would otherwise dominate by volume. Every term is differentiable and
nonnegative; disabled terms contribute an exact zero to the total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .fieldops import (
    DisplacementField,
    ImageVolume,
    LabelVolume,
    field_to_tensor,
    warp_tensor,
)
from .memory import segmentation_probs

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Composite-loss configuration: total = sim + dsc + smoothness * reg + rgn."""

    smoothness: float = 0.01
    dice_term: bool = True
    region_term: bool = True

    def __post_init__(self):
        if self.smoothness < 0:
            raise ContractError("smoothness weight must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar terms of one objective evaluation (torch scalars during
    training so the total can be backpropagated)."""

    sim: torch.Tensor
    dsc: torch.Tensor
    reg: torch.Tensor
    rgn: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict:
        return {
            k: float(getattr(self, k).detach())
            for k in ("sim", "dsc", "reg", "rgn", "total")
        }

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total)) and all(
            np.isfinite(v) for v in self.floats().values()
        )


def one_hot_volume(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, D) integer labels -> (B, N, H, W, D) indicator volume."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.permute(0, 4, 1, 2, 3).to(dtype)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"MSE inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def soft_dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    eps: float = DICE_EPS,
    include_background: bool = False,
) -> torch.Tensor:
    """1 - mean soft Dice over (foreground) classes of two probability
    volumes shaped (B, N, H, W, D)."""
    if pred.shape != target.shape:
        raise ContractError(
            f"class/shape mismatch in Dice: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    start = 0 if include_background else 1
    if pred.shape[1] <= start:
        raise ContractError("soft Dice needs at least one foreground class")
    p, q = pred[:, start:], target[:, start:]
    inter = (p * q).sum(dim=(2, 3, 4))
    denom = p.sum(dim=(2, 3, 4)) + q.sum(dim=(2, 3, 4))
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def warped_dice_loss(
    fixed_labels: torch.Tensor,
    moving_labels: torch.Tensor,
    disp: torch.Tensor,
    num_classes: int,
) -> torch.Tensor:
    """Soft Dice loss between the fixed mask and the moving mask warped as
    one-hot probabilities (trilinear, so the term stays differentiable)."""
    probs = one_hot_volume(moving_labels, num_classes, dtype=disp.dtype)
    warped = warp_tensor(probs, disp, mode="trilinear")
    target = one_hot_volume(fixed_labels, num_classes, dtype=disp.dtype)
    return soft_dice_loss(warped, target)


def gradient_l2(disp: torch.Tensor) -> torch.Tensor:
    """Mean squared spatial gradient of a displacement: forward differences
    per axis, vector components summed, voxels and batch averaged, axes
    summed. A linear field u = alpha*x scores 3*alpha**2."""
    if any(d < 2 for d in disp.shape[2:]):
        raise ContractError("smoothness needs >= 2 voxels per axis")
    total = disp.new_zeros(())
    for axis in (2, 3, 4):
        n = disp.shape[axis]
        d = disp.narrow(axis, 1, n - 1) - disp.narrow(axis, 0, n - 1)
        total = total + d.pow(2).sum(dim=1).mean()
    return total


def region_loss_tensor(addresses: list, fixed_onehot: torch.Tensor) -> torch.Tensor:
    """Deep supervision on memory address maps: per-level soft Dice loss
    against the fixed one-hot mask, upsampled to full resolution and
    weighted by 1 / 2**(level-1); finest level is index 0."""
    full_dims = fixed_onehot.shape[2:]
    total = fixed_onehot.new_zeros(())
    seen = False
    for idx, addr in enumerate(addresses):
        if addr is None:
            continue
        if addr.shape[1] != fixed_onehot.shape[1]:
            raise ContractError(
                f"address map has {addr.shape[1]} slots but mask has {fixed_onehot.shape[1]} classes"
            )
        up = segmentation_probs(addr, full_dims)
        total = total + soft_dice_loss(up, fixed_onehot) / (2.0 ** idx)
        seen = True
    if not seen:
        raise ContractError("region loss needs at least one address map")
    return total


def composite_loss(
    fixed_img: torch.Tensor,
    moving_img: torch.Tensor,
    disp: torch.Tensor,
    weights: LossWeights,
    fixed_labels: torch.Tensor | None = None,
    moving_labels: torch.Tensor | None = None,
    addresses: list | None = None,
    num_classes: int | None = None,
) -> LossBreakdown:
    """Total objective: similarity + mask Dice + weighted smoothness +
    region supervision. Disabled terms are exact zeros."""
    warped = warp_tensor(moving_img, disp, mode="trilinear")
    sim = mse(fixed_img, warped)
    reg = gradient_l2(disp)
    zero = disp.new_zeros(())

    if weights.dice_term:
        if fixed_labels is None or moving_labels is None or num_classes is None:
            raise ContractError("dice term enabled but masks are missing")
        dsc = warped_dice_loss(fixed_labels, moving_labels, disp, num_classes)
    else:
        dsc = zero

    if weights.region_term:
        if addresses is None or fixed_labels is None or num_classes is None:
            raise ContractError("region term enabled but address maps or masks are missing")
        rgn = region_loss_tensor(addresses, one_hot_volume(fixed_labels, num_classes, dtype=disp.dtype))
    else:
        rgn = zero

    total = sim + dsc + weights.smoothness * reg + rgn
    return LossBreakdown(sim=sim, dsc=dsc, reg=reg, rgn=rgn, total=total)


# ---------------------------------------------------------------------------
# Volume-level wrappers
# ---------------------------------------------------------------------------

def _vol_tensor(vol) -> torch.Tensor:
    data = vol.data if isinstance(vol, ImageVolume) else np.asarray(vol)
    return torch.from_numpy(data.astype(np.float64)).unsqueeze(0).unsqueeze(0)


def similarity_mse(fixed, warped_moving) -> float:
    """Mean squared voxel difference between two volumes."""
    return float(mse(_vol_tensor(fixed), _vol_tensor(warped_moving)))


def dice_loss(fixed_mask: LabelVolume, moving_mask: LabelVolume, field: DisplacementField) -> float:
    """Soft Dice loss of the warped moving mask against the fixed mask."""
    if fixed_mask.num_classes != moving_mask.num_classes:
        raise ContractError("masks disagree on class count")
    fixed_t = torch.from_numpy(fixed_mask.data.astype(np.int64)).unsqueeze(0)
    moving_t = torch.from_numpy(moving_mask.data.astype(np.int64)).unsqueeze(0)
    disp = field_to_tensor(field, dtype=torch.float64)
    return float(warped_dice_loss(fixed_t, moving_t, disp, fixed_mask.num_classes))


def smoothness_reg(field: DisplacementField) -> float:
    """Mean squared forward-difference gradient of the field."""
    return float(gradient_l2(field_to_tensor(field, dtype=torch.float64)))


def region_loss(address_maps: list, fixed_mask: LabelVolume) -> float:
    """Level-weighted address-map Dice loss against a fixed label volume."""
    labels = torch.from_numpy(fixed_mask.data.astype(np.int64)).unsqueeze(0)
    onehot = one_hot_volume(labels, fixed_mask.num_classes, dtype=torch.float64)
    maps = [a.to(torch.float64) if a is not None else None for a in address_maps]
    return float(region_loss_tensor(maps, onehot))
