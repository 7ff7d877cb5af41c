"""Paired image/mask dataset handling.

Datasets live on disk in a Kvasir-style layout, ``root/images/`` plus
``root/masks/`` with matching filenames. In memory an image is a float32
tensor [C, H, W] in [-1, 1] (C is 1 or 3) and a mask is a uint8 tensor
[H, W] with values in {0, 1}, 1 meaning polyp foreground. All loading,
splitting, and writing is deterministic given (directory contents, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    EmptyDataset,
    InsufficientData,
    InvalidConfig,
    IoFailure,
    MissingMask,
    ShapeMismatch,
    UnreadableFile,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1


@dataclass
class PairedSample:
    """One image with its aligned binary mask."""

    image: torch.Tensor  # float32 [C, H, W] in [-1, 1]
    mask: torch.Tensor   # uint8 [H, W] in {0, 1}
    id: str
    provenance: str      # "real" | "synthetic"

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise ShapeMismatch(
                f"sample {self.id}: image must be [C,H,W], mask [H,W], "
                f"got {tuple(self.image.shape)} / {tuple(self.mask.shape)}"
            )
        if self.image.shape[-2:] != self.mask.shape:
            raise ShapeMismatch(
                f"sample {self.id}: image {tuple(self.image.shape[-2:])} vs "
                f"mask {tuple(self.mask.shape)}"
            )


@dataclass
class PairedDataset:
    samples: list[PairedSample]
    resolution: int
    # (path, content digest) of the directory this was loaded from, if any
    source_manifest: tuple[str, str] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PairedSample:
        return self.samples[i]

    def __iter__(self) -> Iterator[PairedSample]:
        return iter(self.samples)


def mask_to_signal(mask: torch.Tensor) -> torch.Tensor:
    """Map a {0,1} mask to the {-1,+1} range the diffusion ops work in."""
    return mask.to(torch.float32) * 2.0 - 1.0


def binarize_mask(raw: torch.Tensor, threshold: float) -> torch.Tensor:
    """Threshold a real-valued grid in [0,1] to a {0,1} mask.

    The threshold is inclusive: raw == threshold maps to foreground.
    """
    return (raw >= threshold).to(torch.uint8)


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1,1] float image [C,H,W] to uint8 [H,W] or [H,W,3]."""
    arr = ((image.detach().to(torch.float32) + 1.0) * 127.5).round().clamp(0, 255)
    arr = arr.to(torch.uint8).numpy()
    if arr.shape[0] == 1:
        return arr[0]
    return np.transpose(arr, (1, 2, 0))


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    """uint8 [H,W] or [H,W,C] to float32 [C,H,W] in [-1,1], v = 2*(u/255) - 1."""
    t = torch.from_numpy(np.array(arr, copy=True)).to(torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    else:
        t = t.permute(2, 0, 1)
    return t * (2.0 / 255.0) - 1.0


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert(mode))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UnreadableFile(str(path), str(exc)) from exc


def _resize_image(image: torch.Tensor, resolution: int) -> torch.Tensor:
    if image.shape[-2:] == (resolution, resolution):
        return image
    out = F.interpolate(
        image.unsqueeze(0), size=(resolution, resolution),
        mode="bilinear", align_corners=False,
    ).squeeze(0)
    return out.clamp(-1.0, 1.0)


def _resize_mask(mask: torch.Tensor, resolution: int) -> torch.Tensor:
    if mask.shape == (resolution, resolution):
        return mask
    out = F.interpolate(
        mask.to(torch.float32).unsqueeze(0).unsqueeze(0),
        size=(resolution, resolution), mode="nearest",
    )
    return out.squeeze(0).squeeze(0).to(torch.uint8)


def resize_pair(sample: PairedSample, resolution: int) -> PairedSample:
    """Resize to a square resolution; bilinear for the image (re-clamped),
    nearest-neighbor for the mask so it stays binary."""
    if resolution < 8:
        raise InvalidConfig(f"resolution must be >= 8, got {resolution}")
    if sample.image.shape[-2:] == (resolution, resolution):
        return sample
    return replace(
        sample,
        image=_resize_image(sample.image, resolution),
        mask=_resize_mask(sample.mask, resolution),
    )


def _directory_digest(files: list[Path], root: Path) -> str:
    h = hashlib.sha256()
    for p in files:
        h.update(str(p.relative_to(root)).encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def load_paired_dataset(
    root: str | Path,
    resolution: int,
    mask_threshold: float = 0.5,
) -> PairedDataset:
    """Load an images/ + masks/ directory pair into a normalized dataset.

    Images are mapped to [-1, 1], masks binarized at ``mask_threshold``
    (inclusive), both resized to ``resolution``. Sample order is
    lexicographic by filename. The image channel count (1 or 3) follows the
    first file; remaining files are converted to match. If a
    ``manifest.json`` is present its provenance field is applied, otherwise
    samples are marked real.
    """
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise UnreadableFile(str(root), "expected images/ and masks/ subdirectories")
    if not 0.0 < mask_threshold < 1.0:
        raise InvalidConfig(f"mask_threshold must be in (0,1), got {mask_threshold}")

    provenance = "real"
    manifest_path = root / MANIFEST_NAME
    if manifest_path.is_file():
        try:
            provenance = json.loads(manifest_path.read_text()).get("provenance", "real")
        except (OSError, json.JSONDecodeError) as exc:
            raise UnreadableFile(str(manifest_path), str(exc)) from exc

    image_files = sorted(p for p in img_dir.iterdir() if p.is_file())
    if not image_files:
        raise EmptyDataset(f"no image files under {img_dir}")

    mode: str | None = None
    samples = []
    for img_path in image_files:
        mask_path = mask_dir / img_path.name
        if not mask_path.is_file():
            raise MissingMask(img_path.stem)
        if mode is None:
            try:
                with Image.open(img_path) as probe:
                    mode = "L" if probe.mode in ("L", "1", "I;16", "I") else "RGB"
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                raise UnreadableFile(str(img_path), str(exc)) from exc
        image = uint8_to_image(_read_png(img_path, mode))
        raw = torch.from_numpy(_read_png(mask_path, "L")).to(torch.float32) / 255.0
        mask = binarize_mask(raw, mask_threshold)
        samples.append(PairedSample(
            image=_resize_image(image, resolution),
            mask=_resize_mask(mask, resolution),
            id=img_path.stem,
            provenance=provenance,
        ))

    digest = _directory_digest(
        image_files + sorted(mask_dir / p.name for p in image_files), root
    )
    return PairedDataset(samples, resolution, (str(root), digest))


def split_dataset(
    ds: PairedDataset, counts: Sequence[int], seed: int
) -> list[PairedDataset]:
    """Disjoint subsets of the given sizes via a seeded shuffle."""
    total = sum(counts)
    if total > len(ds):
        raise InsufficientData(
            f"requested {total} samples from a dataset of {len(ds)}"
        )
    perm = np.random.default_rng(seed).permutation(len(ds))
    out = []
    start = 0
    for c in counts:
        idx = perm[start:start + c]
        out.append(PairedDataset([ds.samples[i] for i in idx], ds.resolution))
        start += c
    return out


def concat_datasets(a: PairedDataset, b: PairedDataset) -> PairedDataset:
    if len(b) == 0:
        return PairedDataset(list(a.samples), a.resolution)
    if len(a) == 0:
        return PairedDataset(list(b.samples), b.resolution)
    if a.resolution != b.resolution:
        raise ShapeMismatch(f"resolutions differ: {a.resolution} vs {b.resolution}")
    ids = {s.id for s in a.samples}
    clash = [s.id for s in b.samples if s.id in ids]
    if clash:
        raise InvalidConfig(f"duplicate sample ids in concat: {clash[:3]}")
    return PairedDataset(list(a.samples) + list(b.samples), a.resolution)


def write_generated_dataset(
    samples: Sequence[PairedSample],
    out: str | Path,
    generator_digest: str = "",
    seed: int | None = None,
) -> Path:
    """Persist samples as 8-bit PNGs plus a manifest; returns the manifest path.

    Reloading with load_paired_dataset reproduces masks bit-exactly and
    images within 1/255 per pixel (8-bit quantization).
    """
    if not samples:
        raise EmptyDataset("refusing to write an empty dataset")
    out = Path(out)
    resolution = samples[0].mask.shape[-1]
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            Image.fromarray(image_to_uint8(s.image)).save(out / "images" / f"{s.id}.png")
            Image.fromarray(s.mask.numpy() * np.uint8(255)).save(
                out / "masks" / f"{s.id}.png"
            )
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "ids": [s.id for s in samples],
            "provenance": samples[0].provenance,
            "generator_digest": generator_digest,
            "seed": seed,
            "resolution": int(resolution),
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        manifest_path = out / MANIFEST_NAME
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(out), str(exc)) from exc
    return manifest_path


def write_mask_set(
    masks: Sequence[torch.Tensor],
    out: str | Path,
    generator_digest: str = "",
    seed: int | None = None,
) -> Path:
    """Persist generated masks alone (no paired images) plus a manifest."""
    if not len(masks):
        raise EmptyDataset("refusing to write an empty mask set")
    out = Path(out)
    try:
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            Image.fromarray(m.numpy() * np.uint8(255)).save(
                out / "masks" / f"mask-{i:05d}.png"
            )
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "ids": [f"mask-{i:05d}" for i in range(len(masks))],
            "provenance": "synthetic",
            "generator_digest": generator_digest,
            "seed": seed,
            "resolution": int(masks[0].shape[-1]),
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        manifest_path = out / MANIFEST_NAME
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(out), str(exc)) from exc
    return manifest_path


def load_mask_set(
    root: str | Path, resolution: int, mask_threshold: float = 0.5
) -> list[torch.Tensor]:
    """Masks from ``root/masks`` (or a bare directory of PNGs), binarized
    and resized; lexicographic order."""
    root = Path(root)
    mask_dir = root / "masks" if (root / "masks").is_dir() else root
    files = sorted(p for p in mask_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise EmptyDataset(f"no mask files under {mask_dir}")
    out = []
    for p in files:
        raw = torch.from_numpy(_read_png(p, "L")).to(torch.float32) / 255.0
        out.append(_resize_mask(binarize_mask(raw, mask_threshold), resolution))
    return out


# --- synthetic toy corpus ---------------------------------------------------
# A seeded stand-in for a real polyp corpus: soft elliptical blobs as masks,
# with a deterministic shading function for the paired images. Used by the
# quickstart and the toy-scale evaluation runs; no external data needed.

def shade_mask(mask: torch.Tensor) -> torch.Tensor:
    """Deterministic mask -> image: bright foreground on a dark background
    with a fixed horizontal ramp. Output is [1, H, W] within [-0.85, 0.85]."""
    h, w = mask.shape
    ramp = torch.linspace(-1.0, 1.0, w).expand(h, w)
    base = torch.where(mask.bool(), torch.tensor(0.7), torch.tensor(-0.7))
    return (base + 0.15 * ramp).unsqueeze(0).to(torch.float32)


def _blob_mask(rng: np.random.Generator, resolution: int) -> torch.Tensor:
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    field = np.zeros((resolution, resolution))
    for _ in range(int(rng.integers(1, 3))):
        cy = rng.uniform(0.3, 0.7) * resolution
        cx = rng.uniform(0.3, 0.7) * resolution
        ry = rng.uniform(0.12, 0.28) * resolution
        rx = rng.uniform(0.12, 0.28) * resolution
        theta = rng.uniform(0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = math.cos(theta) * dy + math.sin(theta) * dx
        v = -math.sin(theta) * dy + math.cos(theta) * dx
        # peak value 1 at the blob center, so the mask is never empty
        field = np.maximum(field, np.exp(-((u / ry) ** 2 + (v / rx) ** 2)))
    return torch.from_numpy(field > 0.5).to(torch.uint8)


def synthetic_blob_dataset(
    n: int, resolution: int, seed: int, provenance: str = "real"
) -> PairedDataset:
    """n blob masks with shaded images, fully determined by the seed."""
    if n < 1:
        raise InvalidConfig(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        mask = _blob_mask(rng, resolution)
        samples.append(PairedSample(
            image=shade_mask(mask), mask=mask,
            id=f"blob-{i:05d}", provenance=provenance,
        ))
    return PairedDataset(samples, resolution)
