"""Memory network walkthrough: slot prototypes, soft addressing, and
per-voxel dynamic filters.

A small memory bank produces one prototype vector per anatomical region.
Feature vectors address the memory through L2-normalized slot columns and
a softmax; the resulting per-voxel filters are convex combinations of
prototypes, applied to context vectors to produce flow residuals.

Run:  python demos/02_memory_anatomical_filters.py
"""

import torch

from memwarp.memory import MemoryBank, address, apply_dynamic_filters, generate_filters

torch.manual_seed(0)

C = 4  # context channels; query dim is 3C
bank = MemoryBank(feature_dim=3 * C, slots=4)
M = bank.matrix().detach()
print(f"memory matrix: {tuple(M.shape)} (features x slots)")

print("\n== addressing ==")
queries = torch.randn(5, 3 * C)
J = address(queries, M)
print(f"rows sum to {J.sum(dim=-1).tolist()}")

aligned = 50.0 * M[:, 2] / M[:, 2].norm()
print(f"query aligned with slot 2 -> weights {address(aligned.unsqueeze(0), M).squeeze().tolist()}")

print("\n== positive rescaling of a slot column leaves addressing unchanged ==")
M2 = M.clone()
M2[:, 1] *= 10.0
print(f"max |J - J_rescaled| = {(address(queries, M) - address(queries, M2)).abs().max():.1e}")

print("\n== dynamic filters ==")
filters = generate_filters(J, M)
print(f"filters: {tuple(filters.shape)} (voxels x 3 x C), convex combinations of slots")
ctx = torch.randn(5, C)
flow = apply_dynamic_filters(filters, ctx)
print(f"flow residuals: {tuple(flow.shape)}")
one_hot = torch.zeros(1, 4)
one_hot[0, 3] = 1.0
w = generate_filters(one_hot, M).reshape(-1)
print(f"one-hot address reproduces slot 3 exactly: {torch.equal(w, M[:, 3])}")
