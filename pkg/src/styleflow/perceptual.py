"""Frozen perceptual encoder producing the four-layer feature pyramid.

Two variants share one contract (taps with 64/128/256/512 channels, spatial
dims halving between taps):

* ``standard`` -- the conv prefix of VGG-19 through relu4_1, loaded from a
  weight archive with a shape manifest and checksum.
* ``stub:<seed>`` -- a small fixed-seed random-convolution pyramid so the
  whole test suite runs without downloading anything.

Encoder weights are frozen at load time and never receive gradients.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch
from torch import nn

from .exceptions import DimensionError, EncoderLoadError

TAP_CHANNELS = (64, 128, 256, 512)
STYLE_DIM = 2 * sum(TAP_CHANNELS)  # 1920

# Conv stack of VGG-19 through conv4_1; taps sit after the relu that follows
# conv1_1, conv2_1, conv3_1 and conv4_1.
VGG19_MANIFEST = {
    "conv1_1": (64, 3, 3, 3),
    "conv1_2": (64, 64, 3, 3),
    "conv2_1": (128, 64, 3, 3),
    "conv2_2": (128, 128, 3, 3),
    "conv3_1": (256, 128, 3, 3),
    "conv3_2": (256, 256, 3, 3),
    "conv3_3": (256, 256, 3, 3),
    "conv3_4": (256, 256, 3, 3),
    "conv4_1": (512, 256, 3, 3),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MANIFEST_KEY = "__manifest__"


class PerceptualEncoder(nn.Module):
    """Frozen four-tap feature pyramid over [0,1] RGB images."""

    def __init__(self, variant: str, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.variant = variant
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def freeze_(self) -> "PerceptualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def _preprocess(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise DimensionError(
                f"encoder expects (B, 3, H, W) images, got {tuple(img.shape)}"
            )
        return (img - self.mean) / self.std

    def forward(self, img: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError


class StandardEncoder(PerceptualEncoder):
    """VGG-19 conv prefix with taps at relu1_1, relu2_1, relu3_1, relu4_1."""

    GROUPS = (
        ("conv1_1",),
        ("conv1_2", "pool", "conv2_1"),
        ("conv2_2", "pool", "conv3_1"),
        ("conv3_2", "conv3_3", "conv3_4", "pool", "conv4_1"),
    )

    def __init__(self, weights: dict):
        super().__init__("standard", IMAGENET_MEAN, IMAGENET_STD)
        self.convs = nn.ModuleDict()
        for name, shape in VGG19_MANIFEST.items():
            conv = nn.Conv2d(shape[1], shape[0], kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(weights[name]))
                conv.bias.copy_(torch.as_tensor(weights[name + ".bias"]))
            self.convs[name] = conv
        self.pool = nn.MaxPool2d(2)
        self.freeze_()

    def forward(self, img: torch.Tensor) -> List[torch.Tensor]:
        h = self._preprocess(img)
        taps = []
        for group in self.GROUPS:
            for name in group:
                h = self.pool(h) if name == "pool" else torch.relu(self.convs[name](h))
            taps.append(h)
        return taps


class StubEncoder(PerceptualEncoder):
    """Seeded random-conv pyramid with the standard tap shapes.

    First two stages use 3x3 convolutions (the second strided) to keep some
    spatial mixing; the deeper stages use strided 1x1 projections, which is
    plenty for a test double and keeps encoding cheap.
    """

    def __init__(self, seed: int):
        super().__init__(f"stub:{seed}", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        specs = [(3, 64, 3, 1), (64, 128, 3, 2), (128, 256, 1, 2), (256, 512, 1, 2)]
        layers = []
        for cin, cout, k, stride in specs:
            conv = nn.Conv2d(cin, cout, kernel_size=k, stride=stride, padding=k // 2)
            with torch.no_grad():
                fan_in = cin * k * k
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.copy_(torch.rand(cout, generator=gen) * 0.1)
            layers.append(conv)
        self.stages = nn.ModuleList(layers)
        self.freeze_()

    def forward(self, img: torch.Tensor) -> List[torch.Tensor]:
        h = self._preprocess(img)
        taps = []
        for conv in self.stages:
            h = torch.relu(conv(h))
            taps.append(h)
        return taps


def _archive_checksum(tensors: dict) -> str:
    sha = hashlib.sha256()
    for name in sorted(tensors):
        sha.update(name.encode())
        sha.update(np.ascontiguousarray(tensors[name]).tobytes())
    return sha.hexdigest()


def save_encoder_weights(tensors: dict, path: Union[str, Path]) -> None:
    """Write a weight archive: named float32 arrays plus a JSON manifest."""
    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
    manifest = {
        "format": "styleflow-vgg19",
        "layers": {k: list(v.shape) for k, v in tensors.items()},
        "preprocessing": {"scale": "[0,1]", "mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
        "checksum": _archive_checksum(tensors),
    }
    np.savez(path, **tensors, **{MANIFEST_KEY: np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)})


def convert_torchvision_vgg19(state_dict: dict, out_path: Union[str, Path]) -> None:
    """Convert a torchvision ``vgg19().features`` state dict to our archive."""
    idx = [0, 2, 5, 7, 10, 12, 14, 16, 19]
    tensors = {}
    for i, name in zip(idx, VGG19_MANIFEST):
        tensors[name] = state_dict[f"features.{i}.weight"].cpu().numpy()
        tensors[name + ".bias"] = state_dict[f"features.{i}.bias"].cpu().numpy()
    save_encoder_weights(tensors, out_path)


def _resolve_weight_path(path: Union[str, Path]) -> Path:
    p = Path(path)
    if p.exists():
        return p
    cache = os.environ.get("STYLEFLOW_CACHE")
    if cache and (Path(cache) / p.name).exists():
        return Path(cache) / p.name
    raise EncoderLoadError(f"encoder weight file not found: {path}")


def load_encoder(spec: Union[str, Path]) -> PerceptualEncoder:
    """Build an encoder from ``"stub:<seed>"`` or a weight-archive path.

    The archive must contain every tensor named in the VGG-19 manifest with
    the right shape; the first discrepancy is reported in the error.
    """
    if isinstance(spec, str) and spec.startswith("stub:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError as e:
            raise EncoderLoadError(f"bad stub spec {spec!r}; expected stub:<int>") from e
        return StubEncoder(seed)

    path = _resolve_weight_path(spec)
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as e:
        raise EncoderLoadError(f"cannot read weight archive {path}: {e}") from e

    if MANIFEST_KEY not in archive:
        raise EncoderLoadError(f"{path}: missing manifest entry {MANIFEST_KEY!r}")
    manifest = json.loads(bytes(archive[MANIFEST_KEY]).decode())

    tensors = {}
    for name, shape in VGG19_MANIFEST.items():
        for key, want in ((name, shape), (name + ".bias", (shape[0],))):
            if key not in archive:
                raise EncoderLoadError(f"{path}: manifest diff, first missing tensor: {key}")
            arr = archive[key]
            if tuple(arr.shape) != want:
                raise EncoderLoadError(
                    f"{path}: tensor {key} has shape {tuple(arr.shape)}, expected {want}"
                )
            tensors[key] = arr

    recorded = manifest.get("checksum")
    if recorded is not None and recorded != _archive_checksum(tensors):
        raise EncoderLoadError(f"{path}: checksum mismatch; archive corrupt")
    return StandardEncoder(tensors)


def encode(img: torch.Tensor, enc: PerceptualEncoder) -> List[torch.Tensor]:
    """Four activation maps for an image batch in [0,1].

    Gradients flow to ``img`` but never to the encoder weights.
    """
    return enc(img)


def encoder_fingerprint(enc: PerceptualEncoder) -> str:
    """SHA-256 over all encoder weights; used to assert immutability."""
    sha = hashlib.sha256()
    for name, p in sorted(enc.state_dict().items()):
        sha.update(name.encode())
        sha.update(p.numpy().tobytes())
    return sha.hexdigest()
