"""Memory network: prototypical per-region slot vectors and the per-voxel
dynamic filters they generate.

Shapes:

* memory matrix ``M``: ``(3C, N)``, one column per anatomical slot;
* address map ``J``: ``(..., N)``, a softmax over slots per voxel
  (rows are nonnegative and sum to 1);
* filter field ``w``: ``(..., 3, C)``, a convex combination of slot
  vectors reshaped per voxel.

Addressing normalizes each slot column to unit L2 norm before the
query product, so the address map is invariant to positive per-column
rescaling of ``M``. Filter generation uses the unnormalized ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DegenerateMemoryError
from .fieldops import LabelVolume, resize2x_tensor


@dataclass(frozen=True)
class MemoryConfig:
    """Slot count and MLP sizing for the memory banks."""

    slots: int = 4
    hidden_factor: int = 4  # hidden width = hidden_factor * 3C

    def __post_init__(self):
        if self.slots < 2:
            raise ContractError(f"memory needs >= 2 slots, got {self.slots}")
        if self.hidden_factor < 1:
            raise ContractError("hidden_factor must be >= 1")


class MemoryBank(nn.Module):
    """Produces the memory matrix M = g(I_N) from learned slot embeddings.

    g is an MLP applied to each column of the N x N identity, mapping a
    one-hot slot indicator to a feature_dim-dimensional prototype.
    """

    def __init__(self, feature_dim: int, slots: int, hidden: int | None = None):
        super().__init__()
        self.feature_dim = feature_dim
        self.slots = slots
        hidden = hidden if hidden is not None else 4 * feature_dim
        self.g = nn.Sequential(
            nn.Linear(slots, hidden),
            nn.SiLU(),
            nn.Linear(hidden, feature_dim),
        )
        # small prototypes keep the initial flow near zero
        nn.init.normal_(self.g[-1].weight, std=1e-2)
        nn.init.zeros_(self.g[-1].bias)

    def matrix(self) -> torch.Tensor:
        """Memory matrix, shape (feature_dim, slots); column k = g(e_k)."""
        p = self.g[0].weight
        eye = torch.eye(self.slots, dtype=p.dtype, device=p.device)
        return self.g(eye).T


def address(query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Soft-address the memory: softmax over slots of the query against
    L2-normalized slot columns.

    query: (..., 3C); memory: (3C, N). Returns (..., N).
    """
    if query.shape[-1] != memory.shape[0]:
        raise ContractError(
            f"query dim {query.shape[-1]} does not match memory rows {memory.shape[0]}"
        )
    norms = torch.linalg.vector_norm(memory, dim=0, keepdim=True)
    if float(norms.detach().min()) <= 0.0:
        raise DegenerateMemoryError("memory matrix has a zero-norm slot column")
    logits = query @ (memory / norms)
    return torch.softmax(logits, dim=-1)


def generate_filters(addresses: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Per-voxel dynamic filters w = reshape(J M^T): (..., N) -> (..., 3, C)."""
    feature_dim, slots = memory.shape
    if addresses.shape[-1] != slots:
        raise ContractError(
            f"address maps have {addresses.shape[-1]} slots, memory has {slots}"
        )
    if feature_dim % 3 != 0:
        raise ContractError(f"memory feature dim {feature_dim} is not a multiple of 3")
    flat = addresses @ memory.T
    return flat.reshape(*addresses.shape[:-1], 3, feature_dim // 3)


def apply_dynamic_filters(filters: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
    """Per-voxel matrix-vector product: (..., 3, C) applied to (..., C) -> (..., 3)."""
    if filters.shape[:-2] != context.shape[:-1] or filters.shape[-1] != context.shape[-1]:
        raise ContractError(
            f"filter field {tuple(filters.shape)} does not match context {tuple(context.shape)}"
        )
    return torch.einsum("...ij,...j->...i", filters, context)


def segmentation_probs(address_grid: torch.Tensor, full_dims) -> torch.Tensor:
    """Upsample a (B, N, h, w, d) address grid to the full grid by repeated
    trilinear doubling. Rows stay on the probability simplex."""
    probs = address_grid
    guard = 0
    while tuple(probs.shape[2:]) != tuple(full_dims):
        if guard > 16 or any(p > f for p, f in zip(probs.shape[2:], full_dims)):
            raise ContractError(
                f"address grid {tuple(address_grid.shape[2:])} cannot be upsampled to {tuple(full_dims)}"
            )
        target = tuple(min(2 * p, f) for p, f in zip(probs.shape[2:], full_dims))
        probs = resize2x_tensor(probs, target_dims=target)
        guard += 1
    return probs


def segmentation_from_address(address_grid: torch.Tensor, full_dims, spacing=(1.0, 1.0, 1.0)):
    """Finest-level address map -> (soft probabilities, hard labels).

    Returns a float array of shape (H, W, D, N) and a LabelVolume whose
    labels are the per-voxel argmax; ties break toward the lowest slot.
    """
    probs = segmentation_probs(address_grid, full_dims)
    arr = probs.detach().squeeze(0).cpu().numpy()  # (N, H, W, D)
    soft = np.moveaxis(arr, 0, -1)
    hard = np.argmax(arr, axis=0).astype(np.int16)  # first max wins: lowest slot
    labels = LabelVolume(data=hard, num_classes=arr.shape[0], spacing=spacing)
    return soft, labels
