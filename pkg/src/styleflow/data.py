"""Unpaired multi-domain image ingestion.

Each domain is a directory of images with its own resize policy. Sampling
draws a uniformly random source image, then a uniformly random target
domain and a uniformly random image within it; nothing ever pairs files by
index. Images come out as (1, 3, H, W) float32 tensors in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from .exceptions import DatasetError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

# Paper-scale resize presets; desk-scale configs routinely override.
RESIZE_STYLE_TRANSFER = (300, 400)
RESIZE_EVALUATION = (256, 256)
RESIZE_PHOTOREALISM = (800, 1000)


@dataclass
class DomainSpec:
    name: str
    root: Union[str, Path]
    role: str  # "source" | "target"
    resize: Tuple[int, int] = RESIZE_STYLE_TRANSFER  # (H, W)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise DatasetError(f"domain {self.name!r}: role must be source|target")


@dataclass
class DomainManifest:
    spec: DomainSpec
    files: Tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.files)


@dataclass
class SamplePair:
    source_img: torch.Tensor
    target_img: torch.Tensor
    target_domain_id: int


def scan_domain(spec: DomainSpec) -> DomainManifest:
    """Deterministic lexicographic manifest; non-image files are skipped."""
    root = Path(spec.root)
    if not root.is_dir():
        raise DatasetError(f"domain {spec.name!r}: not a directory: {root}")
    files = []
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            files.append(p.name)
        elif p.is_file():
            logger.warning("skipping unsupported file %s", p)
    if not files:
        raise DatasetError(f"domain {spec.name!r}: no images in {root}")
    return DomainManifest(spec, tuple(files))


def load_image(path: Union[str, Path], resize: Tuple[int, int]) -> torch.Tensor:
    """Decode, force RGB, bilinear-resize to (H, W), scale to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        h, w = resize
        if im.size != (w, h):
            im = im.resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def _draw(rng: np.random.Generator, manifest: DomainManifest, retries: int = 10) -> torch.Tensor:
    for _ in range(retries):
        name = manifest.files[int(rng.integers(manifest.count))]
        path = Path(manifest.spec.root) / name
        try:
            return load_image(path, manifest.spec.resize)
        except Exception as e:  # decode failure: warn and resample
            logger.warning("failed to decode %s (%s); resampling", path, e)
    raise DatasetError(
        f"domain {manifest.spec.name!r}: {retries} consecutive decode failures"
    )


def sample_pair(
    rng: np.random.Generator,
    source_manifest: DomainManifest,
    target_manifests: Sequence[DomainManifest],
) -> SamplePair:
    """One unpaired draw; fully reproducible from the rng state."""
    if not target_manifests:
        raise DatasetError("need at least one target domain")
    source = _draw(rng, source_manifest)
    domain_id = int(rng.integers(len(target_manifests)))
    target = _draw(rng, target_manifests[domain_id])
    return SamplePair(source, target, domain_id)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad bottom/right so H and W divide ``multiple``.

    Returns the padded tensor and the (pad_h, pad_w) needed by :func:`trim`.
    """
    h, w = x.shape[2], x.shape[3]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (0, 0)
    return torch.nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="reflect"), (pad_h, pad_w)


def trim(x: torch.Tensor, pad: Tuple[int, int]) -> torch.Tensor:
    """Remove padding applied by :func:`pad_to_multiple`."""
    pad_h, pad_w = pad
    h = x.shape[2] - pad_h
    w = x.shape[3] - pad_w
    return x[:, :, :h, :w]


def save_image(img: torch.Tensor, path: Union[str, Path]) -> None:
    """Write a (1,3,H,W) or (3,H,W) tensor in [0,1] as an 8-bit image file."""
    if img.dim() == 4:
        img = img[0]
    arr = (img.clamp(0, 1) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)


def list_images(directory: Union[str, Path]) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"not a directory: {d}")
    return [p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS]
