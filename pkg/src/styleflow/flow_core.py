"""Invertible backbone: squeeze, actnorm, 1x1 convolution, subtractive coupling.

The network is a stack of blocks. Each block squeezes space into channels,
runs N flow steps (actnorm -> invertible 1x1 conv -> subtractive coupling),
and owns one style-aware normalization module that is applied only on the
inverse pass when a style vector is supplied. Every layer has an exact
inverse, so running forward then inverse (style bypassed) reproduces the
input up to floating-point rounding.
"""

from __future__ import annotations

import logging
from typing import List, Optional

import torch
from torch import nn

from .exceptions import (
    DegenerateScaleError,
    DimensionError,
    SingularMatrixError,
    StateError,
)
from .san import SanModule

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
DET_FLOOR = 1e-8


def squeeze(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Trade spatial extent for channels; a lossless index permutation.

    Each non-overlapping ``factor x factor`` neighborhood of an input channel
    is unrolled row-major into ``factor**2`` consecutive output channels, so
    output channel ``c*factor**2 + di*factor + dj`` holds input channel ``c``
    at spatial offset ``(di, dj)``.
    """
    if factor < 1:
        raise DimensionError(f"squeeze factor must be positive, got {factor}")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    if h % factor != 0:
        raise DimensionError(f"height {h} not divisible by squeeze factor {factor}")
    if w % factor != 0:
        raise DimensionError(f"width {w} not divisible by squeeze factor {factor}")
    x = x.view(b, c, h // factor, factor, w // factor, factor)
    x = x.permute(0, 1, 3, 5, 2, 4).contiguous()
    return x.view(b, c * factor * factor, h // factor, w // factor)


def unsqueeze(y: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Exact inverse of :func:`squeeze`; bitwise round trip."""
    if factor < 1:
        raise DimensionError(f"squeeze factor must be positive, got {factor}")
    if factor == 1:
        return y
    b, c, h, w = y.shape
    if c % (factor * factor) != 0:
        raise DimensionError(
            f"channel count {c} not divisible by factor**2 = {factor * factor}"
        )
    y = y.view(b, c // (factor * factor), factor, factor, h, w)
    y = y.permute(0, 1, 4, 2, 5, 3).contiguous()
    return y.view(b, c // (factor * factor), h * factor, w * factor)


class ActNorm(nn.Module):
    """Per-channel affine y = s*x + b with data-dependent initialization.

    The first batch seen by :meth:`initialize_` fixes (s, b) so that the
    post-actnorm activations have zero mean and unit variance per channel.
    Forward and inverse refuse to run before initialization.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.scale = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def initialize_(self, batch: torch.Tensor) -> None:
        """Set (s, b) from per-channel statistics of ``batch``.

        Channels with (population) std below 1e-6 fall back to s=1, b=-mean.
        """
        mean = batch.mean(dim=(0, 2, 3))
        std = batch.std(dim=(0, 2, 3), unbiased=False)
        degenerate = std < 1e-6
        if degenerate.any():
            logger.warning(
                "actnorm init: %d constant channel(s), falling back to unit scale",
                int(degenerate.sum()),
            )
        safe_std = torch.where(degenerate, torch.ones_like(std), std)
        scale = 1.0 / safe_std
        self.scale.copy_(scale)
        self.bias.copy_(torch.where(degenerate, -mean, -mean * scale))
        self.initialized.fill_(True)

    def set_identity_(self) -> None:
        """Mark initialized with s=1, b=0 (identity transform)."""
        with torch.no_grad():
            self.scale.fill_(1.0)
            self.bias.fill_(0.0)
            self.initialized.fill_(True)

    def _check(self) -> None:
        if not bool(self.initialized):
            raise StateError("actnorm used before data-dependent initialization")
        if (self.scale.abs() < SCALE_FLOOR).any():
            raise DegenerateScaleError(
                f"actnorm scale below {SCALE_FLOOR}; layer no longer invertible"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check()
        return x * self.scale.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        self._check()
        return (y - self.bias.view(1, -1, 1, 1)) / self.scale.view(1, -1, 1, 1)


class InvertibleConv1x1(nn.Module):
    """Channel-mixing 1x1 convolution, initialized to a random orthogonal matrix.

    The inverse applies the explicit matrix inverse; with at most a few dozen
    channels this is cheap and numerically safe while |det W| stays away
    from zero (checked on every inverse call).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        w = torch.linalg.qr(torch.randn(channels, channels))[0]
        self.weight = nn.Parameter(w)
        self._check_det()

    def _check_det(self) -> None:
        det = torch.linalg.det(self.weight.double())
        if det.abs().item() <= DET_FLOOR:
            raise SingularMatrixError(
                f"1x1 conv weight has |det| = {det.abs().item():.3e} <= {DET_FLOOR}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.conv2d(x, self.weight.view(self.channels, self.channels, 1, 1))

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        self._check_det()
        w_inv = torch.linalg.inv(self.weight.double()).to(y.dtype)
        return nn.functional.conv2d(y, w_inv.view(self.channels, self.channels, 1, 1))


class CouplingNet(nn.Module):
    """Default coupling function m: 3x3 conv, ReLU, 1x1 conv, ReLU, 3x3 conv.

    The last convolution is zero-initialized so the enclosing coupling layer
    starts as the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 600):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, kernel_size=1)
        self.conv3 = nn.Conv2d(hidden, out_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return self.conv3(h)


class SubtractiveCoupling(nn.Module):
    """Coupling layer y = (x1, x2 - m(x1)); inverse adds m back.

    The first channel partition passes through untouched, so m need not be
    invertible. Any module mapping d channels to C-d channels may be passed
    as ``m``; by default a :class:`CouplingNet` is built.
    """

    def __init__(self, channels: int, hidden: int = 600, m: Optional[nn.Module] = None):
        super().__init__()
        if channels % 2 != 0:
            raise DimensionError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.d = channels // 2
        self.m = m if m is not None else CouplingNet(self.d, channels - self.d, hidden)

    def _split(self, x: torch.Tensor):
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"coupling built for {self.channels} channels, got {x.shape[1]}"
            )
        return x[:, : self.d], x[:, self.d :]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1, x2 = self._split(x)
        return torch.cat([x1, x2 - self.m(x1)], dim=1)

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        y1, y2 = self._split(y)
        return torch.cat([y1, y2 + self.m(y1)], dim=1)


class FlowStep(nn.Module):
    """One reversible unit: actnorm -> 1x1 conv -> subtractive coupling."""

    def __init__(self, channels: int, hidden: int = 600):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvertibleConv1x1(channels)
        self.coupling = SubtractiveCoupling(channels, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.coupling(self.invconv(self.actnorm(x)))

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        return self.actnorm.inverse(self.invconv.inverse(self.coupling.inverse(y)))


class FlowBlock(nn.Module):
    """Squeeze followed by N flow steps, plus the block's SAN module."""

    def __init__(
        self,
        in_channels: int,
        n_flows: int,
        hidden: int = 600,
        style_dim: int = 1920,
        cga_hidden: int = 256,
    ):
        super().__init__()
        self.factor = 2
        self.channels = in_channels * self.factor**2
        self.steps = nn.ModuleList(FlowStep(self.channels, hidden) for _ in range(n_flows))
        self.san = SanModule(self.channels, style_dim=style_dim, hidden=cga_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = squeeze(x, self.factor)
        for step in self.steps:
            h = step(h)
        return h

    def inverse(self, h: torch.Tensor, style: Optional[torch.Tensor] = None) -> torch.Tensor:
        if h.shape[1] != self.channels:
            raise DimensionError(
                f"block inverse expects {self.channels} channels, got {h.shape[1]}"
            )
        if style is not None:
            h = self.san(h, style)
        for step in reversed(self.steps):
            h = step.inverse(h)
        return unsqueeze(h, self.factor)

    @torch.no_grad()
    def initialize_actnorm_(self, x: torch.Tensor) -> torch.Tensor:
        """Run the block forward, data-initializing each uninitialized actnorm."""
        h = squeeze(x, self.factor)
        for step in self.steps:
            if not bool(step.actnorm.initialized):
                step.actnorm.initialize_(h)
            h = step(h)
        return h


class FlowNetwork(nn.Module):
    """M blocks of (squeeze, N flow steps, SAN) with exact forward/inverse.

    Args:
        in_channels: image channels fed to the first block.
        blocks: number of blocks M.
        flows: flow steps per block N.
        hidden: hidden width of every coupling net.
        style_dim: length of the style vector consumed by the SAN modules.
        cga_hidden: hidden width of the SAN affine-parameter networks.
    """

    def __init__(
        self,
        in_channels: int = 3,
        blocks: int = 2,
        flows: int = 15,
        hidden: int = 600,
        style_dim: int = 1920,
        cga_hidden: int = 256,
    ):
        super().__init__()
        if blocks < 1 or flows < 1:
            raise DimensionError("need at least one block and one flow step")
        self.in_channels = in_channels
        self.n_blocks = blocks
        chans = in_channels
        block_list: List[FlowBlock] = []
        for _ in range(blocks):
            block = FlowBlock(chans, flows, hidden, style_dim, cga_hidden)
            block_list.append(block)
            chans = block.channels
        self.blocks = nn.ModuleList(block_list)

    @property
    def divisor(self) -> int:
        """Spatial dims must be divisible by this (2**M)."""
        return 2**self.n_blocks

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if x.shape[2] % self.divisor or x.shape[3] % self.divisor:
            raise DimensionError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by "
                f"2**{self.n_blocks} = {self.divisor}"
            )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Return every block's output; the last entry is the deep feature."""
        self._check_input(x)
        outputs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outputs.append(h)
        return outputs

    def inverse(
        self, features: torch.Tensor, style: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Map a deep feature back to image space.

        With ``style`` given, each block's SAN module restyles the incoming
        feature before that block is inverted; with ``style=None`` this is
        the exact inverse of :meth:`forward`.
        """
        if features.shape[1] != self.blocks[-1].channels:
            raise DimensionError(
                f"deep feature must have {self.blocks[-1].channels} channels, "
                f"got {features.shape[1]}"
            )
        h = features
        for block in reversed(self.blocks):
            h = block.inverse(h, style)
        return h

    @torch.no_grad()
    def initialize_actnorm_(self, x: torch.Tensor) -> None:
        """Data-dependent init of all actnorm layers from one batch."""
        self._check_input(x)
        h = x
        for block in self.blocks:
            h = block.initialize_actnorm_(h)

    @property
    def actnorm_initialized(self) -> bool:
        return all(
            bool(step.actnorm.initialized) for block in self.blocks for step in block.steps
        )


def parameter_count(module: nn.Module) -> int:
    """Total number of trainable parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
