"""Style-aware normalization: content/style statistics and the restyling transform.

Content of a feature map is its channel-wise normalized part; style is the
pair of per-channel mean and standard deviation. The SAN module swaps a
feature's statistics for affine parameters predicted from the feature itself
plus a target style vector, which leaves the normalized content untouched.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .exceptions import DimensionError

STAT_EPS = 1e-5
SIGMA_FLOOR = 1e-4


def channel_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel mean and population std over spatial dims.

    Returns two (B, C) tensors.
    """
    mu = f.mean(dim=(2, 3))
    sigma = f.std(dim=(2, 3), unbiased=False)
    return mu, sigma


def extract_content(f: torch.Tensor, eps: float = STAT_EPS) -> torch.Tensor:
    """Channel-wise normalize: (f - mu) / sigma, with sigma floored at ``eps``.

    Constant channels map to zero; all other channels come out with mean 0
    and std 1 (up to the floor).
    """
    mu, sigma = channel_stats(f)
    return (f - mu[:, :, None, None]) / sigma.clamp_min(eps)[:, :, None, None]


def extract_style(img: torch.Tensor, enc) -> torch.Tensor:
    """Concatenated per-channel means then stds of the encoder's four layers.

    Shape (B, 2 * sum(layer channels)); 1920 for the standard encoder.
    """
    from .perceptual import encode

    pyramid = enc if isinstance(enc, (list, tuple)) else encode(img, enc)
    means, stds = [], []
    for layer in pyramid:
        mu, sigma = channel_stats(layer)
        means.append(mu)
        stds.append(sigma)
    return torch.cat(means + stds, dim=1)


class SanModule(nn.Module):
    """Predicts content-guided affine parameters and applies them.

    The affine parameters depend on both the source feature (through its
    pooled channel statistics) and the target style vector, so two different
    source images restyled toward the same target generally receive
    different parameters. At construction the final layer is set so the
    predicted statistics are (0, 1), which is a near-identity on features
    that are already roughly normalized.
    """

    def __init__(self, channels: int, style_dim: int = 1920, hidden: int = 256):
        super().__init__()
        self.channels = channels
        self.style_dim = style_dim
        self.fc1 = nn.Linear(2 * channels + style_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias[:channels] = 0.0
            # softplus(raw) + floor == 1 at init
            self.fc2.bias[channels:] = math.log(math.expm1(1.0 - SIGMA_FLOOR))

    def cga(self, f_x: torch.Tensor, f_s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Content-guided affine (mu, sigma), each (B, C); sigma > 0."""
        if f_x.shape[1] != self.channels:
            raise DimensionError(
                f"SAN built for {self.channels} channels, got {f_x.shape[1]}"
            )
        if f_s.dim() != 2 or f_s.shape[1] != self.style_dim:
            raise DimensionError(
                f"style vector must be (B, {self.style_dim}), got {tuple(f_s.shape)}"
            )
        mu, sigma = channel_stats(f_x)
        h = torch.relu(self.fc1(torch.cat([mu, sigma, f_s], dim=1)))
        raw = self.fc2(h)
        cga_mu = raw[:, : self.channels]
        cga_sigma = nn.functional.softplus(raw[:, self.channels :]) + SIGMA_FLOOR
        return cga_mu, cga_sigma

    def forward(self, f_x: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        """Restyle: normalized content of f_x, rescaled to the predicted stats."""
        cga_mu, cga_sigma = self.cga(f_x, f_s)
        content = extract_content(f_x)
        return content * cga_sigma[:, :, None, None] + cga_mu[:, :, None, None]
