"""Training objective: content loss, aligned-style loss, smooth loss.

Total = content + lambda_style * aligned_style + smooth. The aligned-style
loss restricts the per-channel mean/std matching to the fraction k of
channels whose mean energies agree best between generated and reference
features, which tolerates semantic mismatch in unpaired data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch

from .exceptions import DimensionError, NumericError, ParameterError
from .perceptual import PerceptualEncoder, encode
from .san import extract_content, channel_stats

STYLE_LAYERS = (0, 1, 2)  # relu1_1, relu2_1, relu3_1
CONTENT_LAYER = 3  # relu4_1


@dataclass
class LossWeights:
    """Objective weights; k is the selected-channel fraction in (0, 1]."""

    lambda_style: float = 0.1
    lambda_smooth: float = 10.0
    k: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.k <= 1.0:
            raise ParameterError(f"k must be in (0, 1], got {self.k}")
        if self.lambda_style < 0 or self.lambda_smooth < 0:
            raise ParameterError("loss weights must be nonnegative")


@dataclass
class LossReport:
    """One step's loss components; values are 0-dim tensors during training."""

    content: torch.Tensor
    aligned_style: torch.Tensor
    smooth: torch.Tensor
    total: torch.Tensor
    selected_channel_counts: Tuple[int, ...] = field(default_factory=tuple)

    def float_dict(self) -> dict:
        return {
            "content": float(self.content),
            "aligned_style": float(self.aligned_style),
            "smooth": float(self.smooth),
            "total": float(self.total),
        }

    def log_line(self, step: int, k: float) -> str:
        rec = {"step": step, **self.float_dict(), "k": k,
               "selected": list(self.selected_channel_counts)}
        return json.dumps(rec)


def _check_same_size(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _content_from_features(gen_feat: torch.Tensor, src_feat: torch.Tensor) -> torch.Tensor:
    diff = extract_content(gen_feat) - extract_content(src_feat)
    # per-sample Euclidean norm, averaged over the batch
    return diff.flatten(1).norm(dim=1).mean()


def content_loss(gen: torch.Tensor, src: torch.Tensor, enc: PerceptualEncoder) -> torch.Tensor:
    """Euclidean distance between channel-normalized deepest-tap features."""
    _check_same_size(gen, src, "content_loss")
    gen_feat = encode(gen, enc)[CONTENT_LAYER]
    with torch.no_grad():
        src_feat = encode(src, enc)[CONTENT_LAYER]
    return _content_from_features(gen_feat, src_feat)


def select_channels(gen_layer: torch.Tensor, ref_layer: torch.Tensor, k: float) -> torch.Tensor:
    """Indices of the floor(k*N) channels with the smallest mean-energy gap.

    Energy per channel is |mu(gen) - mu(ref)|. At least one channel is always
    kept; ties are broken toward lower channel indices. Returns a (B, m)
    LongTensor with indices in ascending order per sample.
    """
    if not 0.0 < k <= 1.0:
        raise ParameterError(f"k must be in (0, 1], got {k}")
    if gen_layer.shape[1] != ref_layer.shape[1]:
        raise DimensionError(
            f"channel counts differ: {gen_layer.shape[1]} vs {ref_layer.shape[1]}"
        )
    with torch.no_grad():
        mu_g, _ = channel_stats(gen_layer)
        mu_r, _ = channel_stats(ref_layer)
        energy = (mu_g - mu_r).abs()
        n = energy.shape[1]
        m = max(1, math.floor(k * n))
        order = torch.argsort(energy, dim=1, stable=True)
        return order[:, :m].sort(dim=1).values


def _aligned_style_from_pyramids(
    gen_pyr: Sequence[torch.Tensor], ref_pyr: Sequence[torch.Tensor], k: float
) -> Tuple[torch.Tensor, torch.Tensor, Tuple[int, ...]]:
    """(mu term, sigma term, per-layer selected counts) over the style layers."""
    mu_term = gen_pyr[0].new_zeros(())
    sigma_term = gen_pyr[0].new_zeros(())
    counts = []
    for i in STYLE_LAYERS:
        idx = select_channels(gen_pyr[i], ref_pyr[i], k)
        mu_g, sigma_g = channel_stats(gen_pyr[i])
        mu_r, sigma_r = channel_stats(ref_pyr[i])
        mu_term = mu_term + (mu_g - mu_r).abs().gather(1, idx).sum(dim=1).mean()
        sigma_term = sigma_term + (sigma_g - sigma_r).abs().gather(1, idx).sum(dim=1).mean()
        counts.append(idx.shape[1])
    return mu_term, sigma_term, tuple(counts)


def aligned_style_loss(
    gen: torch.Tensor, ref: torch.Tensor, enc: PerceptualEncoder, k: float
) -> torch.Tensor:
    """Mean/std matching over the selected channels of the first three taps."""
    gen_pyr = encode(gen, enc)
    with torch.no_grad():
        ref_pyr = encode(ref, enc)
    mu_term, sigma_term, _ = _aligned_style_from_pyramids(gen_pyr, ref_pyr, k)
    return mu_term + sigma_term


def smooth_loss(gen: torch.Tensor, ref: torch.Tensor, lambda_smooth: float = 10.0) -> torch.Tensor:
    """Mean |grad gen| gated by exp(-lambda * |grad ref|).

    Gradients are forward differences along each spatial axis; the final
    row/column, where forward differences are undefined, is excluded.
    """
    _check_same_size(gen, ref, "smooth_loss")
    dx_g = (gen[:, :, :, 1:] - gen[:, :, :, :-1]).abs()
    dx_r = (ref[:, :, :, 1:] - ref[:, :, :, :-1]).abs()
    dy_g = (gen[:, :, 1:, :] - gen[:, :, :-1, :]).abs()
    dy_r = (ref[:, :, 1:, :] - ref[:, :, :-1, :]).abs()
    return (dx_g * torch.exp(-lambda_smooth * dx_r)).mean() + (
        dy_g * torch.exp(-lambda_smooth * dy_r)
    ).mean()


def total_loss(
    gen: torch.Tensor,
    src: torch.Tensor,
    ref: torch.Tensor,
    enc: PerceptualEncoder,
    w: LossWeights,
) -> LossReport:
    """Full objective; raises NumericError naming any non-finite component."""
    _check_same_size(gen, src, "total_loss")
    gen_pyr = encode(gen, enc)
    with torch.no_grad():
        src_feat = encode(src, enc)[CONTENT_LAYER]
        ref_pyr = encode(ref, enc)

    content = _content_from_features(gen_pyr[CONTENT_LAYER], src_feat)
    mu_term, sigma_term, counts = _aligned_style_from_pyramids(gen_pyr, ref_pyr, w.k)
    aligned = mu_term + sigma_term
    smooth = smooth_loss(gen, ref, w.lambda_smooth)
    total = content + w.lambda_style * aligned + smooth

    for name, value in (
        ("content", content),
        ("aligned_style", aligned),
        ("smooth", smooth),
        ("total", total),
    ):
        if not torch.isfinite(value):
            raise NumericError(f"loss component {name!r} is not finite")
    return LossReport(content, aligned, smooth, total, counts)
