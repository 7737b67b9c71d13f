"""Backbone feature extraction plus the pyramid warping decoder.

Moving and fixed images are stacked along the batch axis and encoded by
shared weights; they are never channel-concatenated in the encoder. Each
decoder level warps the moving-stream features by the previous level's
upsampled fields, extracts features from both streams as one batch, and
feeds a flow generator that emits this level's residual field. The
cumulative field is the residual plus the upsampled-and-scaled cumulative
field from the coarser level; at the coarsest level the prior is an
identity grid. Residuals at every level except the finest pass through a
diffeomorphic (scaling and squaring) layer.

Level indices follow the convention that level 1 is the finest (full
resolution) and level n the coarsest; python lists are indexed level-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, ContractError
from .fieldops import (
    integrate_velocity_tensor,
    resize2x_tensor,
    upsample2_tensor,
    warp_tensor,
)
from .memory import MemoryBank, MemoryConfig, address, apply_dynamic_filters, generate_filters


def min_pyramid_levels(d_max: float) -> int:
    """Smallest pyramid depth n with 2**(n-1) > d_max, the maximum expected
    displacement magnitude in voxels."""
    if d_max < 0:
        raise ContractError(f"d_max must be >= 0, got {d_max}")
    n = 1
    while 2 ** (n - 1) <= d_max:
        n += 1
    return n


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    encoder_channels lists C_1..C_n from fine to coarse; decoder features
    at level i carry 3*C_i channels and the flow-generator context C_i.
    """

    levels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    use_large_kernel: bool = False
    large_kernel: int = 5
    pyramid: bool = True
    integration_steps: int = 7
    # kernel plan: (unit1, unit2) sizes per block kind; pointwise second
    # decoder unit and pointwise channel-mixing first context unit keep the
    # full-resolution blocks affordable on CPU
    encoder_kernels: tuple[int, int] = (3, 3)
    decoder_kernels: tuple[int, int] = (3, 1)
    context_kernels: tuple[int, int] = (1, 3)

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"need at least 2 pyramid levels, got {self.levels}")
        chans = tuple(int(c) for c in self.encoder_channels)
        object.__setattr__(self, "encoder_channels", chans)
        if len(chans) != self.levels:
            raise ConfigError(
                f"encoder_channels has {len(chans)} entries for {self.levels} levels"
            )
        if any(c < 1 for c in chans):
            raise ConfigError("encoder channels must be positive")
        if self.integration_steps < 0:
            raise ConfigError("integration_steps must be >= 0")
        for plan in (self.encoder_kernels, self.decoder_kernels, self.context_kernels):
            if len(plan) != 2 or any(k < 1 or k % 2 == 0 for k in plan):
                raise ConfigError(f"kernel plans need two odd sizes, got {plan}")

    def validate_displacement_range(self, d_max: float):
        """Pyramid-depth rule: the coarsest level must see sub-voxel motion."""
        if 2 ** (self.levels - 1) <= d_max:
            raise ConfigError(
                f"{self.levels} levels cover displacements below {2 ** (self.levels - 1)} voxels; "
                f"d_max={d_max} needs at least {min_pyramid_levels(d_max)} levels"
            )

    @property
    def head_levels(self) -> tuple[int, ...]:
        return tuple(range(1, self.levels + 1)) if self.pyramid else (1,)


class ConvUnit(nn.Module):
    """conv + instance norm + leaky ReLU."""

    def __init__(self, c_in, c_out, stride=1, kernel=3):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.InstanceNorm3d(c_out, affine=True)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class LargeKernelUnit(nn.Module):
    """Parallel 3x3x3 / kxkxk / 1x1x1 convolutions (plus identity when the
    channel count is preserved), summed before normalization."""

    def __init__(self, c_in, c_out, kernel=5, stride=1):
        super().__init__()
        self.conv3 = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1)
        self.convk = nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.conv1 = nn.Conv3d(c_in, c_out, 1, stride=stride)
        self.skip = c_in == c_out and stride == 1
        self.norm = nn.InstanceNorm3d(c_out, affine=True)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        y = self.conv3(x) + self.convk(x) + self.conv1(x)
        if self.skip:
            y = y + x
        return self.act(self.norm(y))


def _make_unit(config: NetworkConfig, c_in, c_out, stride=1, kernel=3):
    if config.use_large_kernel and kernel > 1:
        return LargeKernelUnit(c_in, c_out, kernel=config.large_kernel, stride=stride)
    return ConvUnit(c_in, c_out, stride=stride, kernel=kernel)


class ConvBlock(nn.Module):
    """Two convolution units following a (kernel1, kernel2) plan."""

    def __init__(self, config, c_in, c_out, kernels=(3, 3)):
        super().__init__()
        self.body = nn.Sequential(
            _make_unit(config, c_in, c_out, kernel=kernels[0]),
            _make_unit(config, c_out, c_out, kernel=kernels[1]),
        )

    def forward(self, x):
        return self.body(x)


class ConvFlowHead(nn.Module):
    """Conventional flow output: a single kernel-1 convolution of the
    context features, initialized near zero."""

    def __init__(self, context_channels):
        super().__init__()
        self.conv = nn.Conv3d(context_channels, 3, 1)
        nn.init.normal_(self.conv.weight, std=1e-5)
        nn.init.zeros_(self.conv.bias)

    def forward(self, fixed_feats, context):
        return self.conv(context), None


class MemoryFlowHead(nn.Module):
    """Dynamic-filter flow output: the fixed decoder features query the
    memory bank; the addressed filters map each voxel's context vector to
    a flow vector. Also returns the address map as soft region scores."""

    def __init__(self, feat_channels, context_channels, mem_config: MemoryConfig):
        super().__init__()
        if feat_channels != 3 * context_channels:
            raise ConfigError("memory head expects query channels = 3 * context channels")
        self.slots = mem_config.slots
        self.bank = MemoryBank(
            feature_dim=feat_channels,
            slots=mem_config.slots,
            hidden=mem_config.hidden_factor * feat_channels,
        )

    def forward(self, fixed_feats, context):
        b, fc = fixed_feats.shape[:2]
        dims = fixed_feats.shape[2:]
        mem = self.bank.matrix()
        query = fixed_feats.reshape(b, fc, -1).transpose(1, 2)
        addr = address(query, mem)
        filters = generate_filters(addr, mem)
        ctx = context.reshape(b, context.shape[1], -1).transpose(1, 2)
        flow = apply_dynamic_filters(filters, ctx)
        flow = flow.transpose(1, 2).reshape(b, 3, *dims)
        addr_grid = addr.transpose(1, 2).reshape(b, self.slots, *dims)
        return flow, addr_grid


@dataclass
class PyramidState:
    """Per-level outputs of one forward pass (lists indexed level-1).

    delta/cumulative are this level's residual and cumulative fields;
    *_up are their upsampled-and-scaled versions at the next finer level
    (None at level 1). raw_flow is the generator output before the
    diffeomorphic layer; addresses are memory address grids or None.
    """

    levels: int
    raw_flow: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)
    delta_up: list = field(default_factory=list)
    cumulative_up: list = field(default_factory=list)
    decoder_moving: list = field(default_factory=list)
    decoder_fixed: list = field(default_factory=list)
    addresses: list = field(default_factory=list)

    @property
    def disp(self) -> torch.Tensor:
        """Full-resolution deformation (B, 3, H, W, D)."""
        return self.cumulative[0]

    def finest_address(self):
        for a in self.addresses:
            if a is not None:
                return a
        return None

    def max_invariant_violation(self) -> float:
        """max |phi_i - (delta_i + upsampled phi_{i+1})| over all levels."""
        worst = 0.0
        for i in range(1, self.levels + 1):
            prior = 0.0 if i == self.levels else self.cumulative_up[i]
            resid = (self.cumulative[i - 1] - (self.delta[i - 1] + prior)).detach()
            worst = max(worst, float(resid.abs().max()))
        return worst


def integrate_residual(raw_flow: torch.Tensor, level: int, config: NetworkConfig) -> torch.Tensor:
    """Diffeomorphic layer placement: at pyramid levels other than the
    finest, the generator output is a stationary velocity and is integrated
    by scaling and squaring; the finest level uses it directly."""
    if config.pyramid and level >= 2:
        return integrate_velocity_tensor(raw_flow, config.integration_steps)
    return raw_flow


class LapWarp(nn.Module):
    """Pyramid warping network with optional memory-generated filters."""

    def __init__(self, config: NetworkConfig, memory: MemoryConfig | None = None):
        super().__init__()
        self.config = config
        self.memory_config = memory
        ch = config.encoder_channels
        n = config.levels

        self.enc_blocks = nn.ModuleList()
        self.enc_down = nn.ModuleList()
        for i in range(n):
            if i == 0:
                self.enc_down.append(nn.Identity())
                self.enc_blocks.append(
                    ConvBlock(config, config.in_channels, ch[0], config.encoder_kernels)
                )
            else:
                self.enc_down.append(_make_unit(config, ch[i - 1], ch[i], stride=2))
                self.enc_blocks.append(ConvBlock(config, ch[i], ch[i], config.encoder_kernels))

        self.decoders = nn.ModuleList()
        for i in range(n):  # index i -> level i+1
            c_in = ch[i] if i == n - 1 else ch[i] + 3 * ch[i + 1]
            self.decoders.append(ConvBlock(config, c_in, 3 * ch[i], config.decoder_kernels))

        self.contexts = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for lvl in config.head_levels:
            c = ch[lvl - 1]
            self.contexts[str(lvl)] = nn.Sequential(
                _make_unit(config, 6 * c, c, kernel=config.context_kernels[0]),
                _make_unit(config, c, c, kernel=config.context_kernels[1]),
            )
            if memory is not None:
                self.heads[str(lvl)] = MemoryFlowHead(3 * c, c, memory)
            else:
                self.heads[str(lvl)] = ConvFlowHead(c)

    @property
    def has_memory(self) -> bool:
        return self.memory_config is not None

    def encode(self, moving: torch.Tensor, fixed: torch.Tensor):
        """Shared-weight feature pyramids; returns [(moving_i, fixed_i)]
        for levels 1..n."""
        if moving.shape != fixed.shape:
            raise ContractError(
                f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} shapes differ"
            )
        if not (torch.isfinite(moving).all() and torch.isfinite(fixed).all()):
            raise ContractError("non-finite values in network input")
        b = moving.shape[0]
        x = torch.cat([moving, fixed], dim=0)
        feats = []
        for down, block in zip(self.enc_down, self.enc_blocks):
            x = block(down(x))
            feats.append((x[:b], x[b:]))
        return feats

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> PyramidState:
        feats = self.encode(moving, fixed)
        n = self.config.levels
        b = moving.shape[0]
        state = PyramidState(levels=n, **{
            k: [None] * n
            for k in (
                "raw_flow", "delta", "cumulative", "delta_up", "cumulative_up",
                "decoder_moving", "decoder_fixed", "addresses",
            )
        })

        prev_cum_up = prev_delta_up = None
        prev_dec_m_up = prev_dec_f_up = None
        for lvl in range(n, 0, -1):
            enc_m, enc_f = feats[lvl - 1]
            if lvl == n:
                in_m, in_f = enc_m, enc_f
            else:
                if self.config.pyramid:
                    in_m = torch.cat(
                        [warp_tensor(enc_m, prev_cum_up), warp_tensor(prev_dec_m_up, prev_delta_up)],
                        dim=1,
                    )
                else:
                    in_m = torch.cat([enc_m, prev_dec_m_up], dim=1)
                in_f = torch.cat([enc_f, prev_dec_f_up], dim=1)

            both = self.decoders[lvl - 1](torch.cat([in_m, in_f], dim=0))
            dec_m, dec_f = both[:b], both[b:]
            state.decoder_moving[lvl - 1] = dec_m
            state.decoder_fixed[lvl - 1] = dec_f

            key = str(lvl)
            if key in self.heads:
                ctx = self.contexts[key](torch.cat([dec_m, dec_f], dim=1))
                raw, addr = self.heads[key](dec_f, ctx)
                state.raw_flow[lvl - 1] = raw
                state.addresses[lvl - 1] = addr
                delta = integrate_residual(raw, lvl, self.config)
            else:
                delta = torch.zeros(
                    b, 3, *enc_m.shape[2:], dtype=moving.dtype, device=moving.device
                )
            state.delta[lvl - 1] = delta
            state.cumulative[lvl - 1] = delta if prev_cum_up is None else delta + prev_cum_up

            if lvl > 1:
                target = feats[lvl - 2][0].shape[2:]
                prev_cum_up = upsample2_tensor(state.cumulative[lvl - 1], target_dims=target)
                prev_delta_up = upsample2_tensor(state.delta[lvl - 1], target_dims=target)
                state.cumulative_up[lvl - 1] = prev_cum_up
                state.delta_up[lvl - 1] = prev_delta_up
                prev_dec_m_up = resize2x_tensor(dec_m, target_dims=target)
                prev_dec_f_up = resize2x_tensor(dec_f, target_dims=target)
        return state

    def segment(self, fixed: torch.Tensor) -> torch.Tensor:
        """Finest-level address grid for a fixed image. The fixed decoder
        stream never sees the moving image, so a self-pair is exact."""
        if not self.has_memory:
            raise ConfigError("model was built without the memory module")
        state = self.forward(fixed, fixed)
        return state.finest_address()
