"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint32 header length, a JSON
header (kind, arch, diffusion config + digest, step, seed, parameter names
and shapes), the raw float32 parameter payload in header order, and a
trailing sha256 digest over everything before it. The file is fully
self-describing: loading needs no external arch information, and any
truncation or corruption fails the digest check.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpoint, InvalidConfig, IoFailure, VersionMismatch

FORMAT_VERSION = 1

# one magic per model family; the header's kind field refines denoisers
# into mask_model / image_model
_MAGIC_BY_KIND = {
    "mask_model": b"PDIFDNZ1",
    "image_model": b"PDIFDNZ1",
    "autoencoder": b"PDIFAEC1",
    "segmenter": b"PDIFSEG1",
}
_KNOWN_MAGICS = set(_MAGIC_BY_KIND.values())


def dict_digest(d: dict) -> str:
    """Stable short digest of a JSON-able dict (order-insensitive)."""
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    kind: str                      # mask_model | image_model | autoencoder | segmenter
    arch: dict
    diffusion: dict | None         # DiffusionConfig fields, None for non-denoisers
    step: int
    seed: int
    params: dict[str, torch.Tensor]
    extra: dict = dc_field(default_factory=dict)

    @property
    def diffusion_digest(self) -> str | None:
        return None if self.diffusion is None else dict_digest(self.diffusion)

    def digest(self) -> str:
        """Digest over the parameter payload; identifies the trained weights."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].detach().to(torch.float32).contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    if ckpt.kind not in _MAGIC_BY_KIND:
        raise InvalidConfig(f"unknown checkpoint kind {ckpt.kind!r}")
    names = list(ckpt.params)
    payload = bytearray()
    shapes = []
    for name in names:
        t = ckpt.params[name].detach()
        if t.dtype != torch.float32:
            raise InvalidConfig(f"parameter {name} must be float32, got {t.dtype}")
        shapes.append([name, list(t.shape)])
        payload += t.contiguous().numpy().tobytes()
    header = json.dumps({
        "kind": ckpt.kind,
        "arch": ckpt.arch,
        "diffusion": ckpt.diffusion,
        "diffusion_digest": ckpt.diffusion_digest,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "extra": ckpt.extra,
        "params": shapes,
    }).encode()
    blob = bytearray()
    blob += _MAGIC_BY_KIND[ckpt.kind]
    blob += struct.pack("<II", FORMAT_VERSION, len(header))
    blob += header
    blob += payload
    blob += hashlib.sha256(blob).digest()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    if len(blob) < 8 + 8 + 32:
        raise CorruptCheckpoint(f"{path}: file too short")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CorruptCheckpoint(f"{path}: digest mismatch (truncated or corrupted)")
    magic = bytes(blob[:8])
    if magic not in _KNOWN_MAGICS:
        raise CorruptCheckpoint(f"{path}: unknown magic {magic!r}")
    version, header_len = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    try:
        header = json.loads(blob[16:16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if _MAGIC_BY_KIND.get(header.get("kind")) != magic:
        raise CorruptCheckpoint(
            f"{path}: kind {header.get('kind')!r} does not match magic {magic!r}"
        )
    params: dict[str, torch.Tensor] = {}
    offset = 16 + header_len
    for name, shape in header["params"]:
        numel = int(np.prod(shape)) if shape else 1
        end = offset + 4 * numel
        if end > len(blob) - 32:
            raise CorruptCheckpoint(f"{path}: payload shorter than declared")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        params[name] = torch.from_numpy(arr)
        offset = end
    if offset != len(blob) - 32:
        raise CorruptCheckpoint(f"{path}: payload longer than declared")
    return Checkpoint(
        kind=header["kind"],
        arch=header["arch"],
        diffusion=header["diffusion"],
        step=header["step"],
        seed=header["seed"],
        params=params,
        extra=header.get("extra", {}),
    )
