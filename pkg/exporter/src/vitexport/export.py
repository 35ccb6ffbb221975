"""Image-to-tensor export: run a backbone over images and write OSTF pairs."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import IMAGENET_MEAN, IMAGENET_STD, VitBackbone
from .ostf import KIND_ATTENTION_STACK, KIND_FEATURE_MAP, write_ostf

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp")


class ImageReadError(Exception):
    pass


@dataclass
class ExportManifest:
    """Record of an export run: backbone identity plus per-image outputs."""

    model_id: str
    patch_stride: int
    dim: int
    num_heads: int
    entries: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "model_id": self.model_id,
            "patch_stride": self.patch_stride,
            "dim": self.dim,
            "num_heads": self.num_heads,
            "entries": self.entries,
            "skipped": self.skipped,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_image_tensor(path: str | Path, patch_size: int) -> torch.Tensor:
    """Load an image as a normalized (1, 3, H, W) tensor, cropped from the
    top-left to patch-size multiples so the grid stays aligned with the
    original pixel coordinates. No resizing."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"{path}: {exc}") from exc
    h = (arr.shape[0] // patch_size) * patch_size
    w = (arr.shape[1] // patch_size) * patch_size
    if h == 0 or w == 0:
        raise ImageReadError(f"{path}: image smaller than one {patch_size}px patch")
    arr = arr[:h, :w]
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def export_image(image_path: str | Path, backbone: VitBackbone, out_dir: str | Path) -> dict:
    """Export one image to <stem>.feat and <stem>.attn; returns the manifest
    entry. Deterministic: re-exporting the same image with the same backbone
    writes identical bytes."""
    image_path = Path(image_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = load_image_tensor(image_path, backbone.patch_size)
    features, attention = backbone.extract(pixels)
    feat_path = out_dir / f"{image_path.stem}.feat"
    attn_path = out_dir / f"{image_path.stem}.attn"
    write_ostf(KIND_FEATURE_MAP, features, backbone.patch_size, feat_path)
    write_ostf(KIND_ATTENTION_STACK, attention, backbone.patch_size, attn_path)
    return {
        "image": image_path.name,
        "feat": feat_path.name,
        "attn": attn_path.name,
        "grid_h": features.shape[0],
        "grid_w": features.shape[1],
    }


def export_dataset(image_dir: str | Path, backbone: VitBackbone, out_dir: str | Path) -> ExportManifest:
    """Export every image in a directory; unreadable files become manifest
    skip entries instead of failing the run."""
    image_dir = Path(image_dir)
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ValueError(f"no images found in {image_dir}")
    manifest = ExportManifest(
        model_id=backbone.model_id,
        patch_stride=backbone.patch_size,
        dim=backbone.embed_dim,
        num_heads=backbone.num_heads,
    )
    for path in images:
        try:
            manifest.entries.append(export_image(path, backbone, out_dir))
        except ImageReadError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            manifest.skipped.append({"image": path.name, "reason": str(exc)})
    manifest.write(Path(out_dir) / "manifest.json")
    return manifest
