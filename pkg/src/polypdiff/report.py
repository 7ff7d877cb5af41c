"""Report and gallery emission.

Reports are written as CSV plus JSON with a schema version in every row and
no timestamps, so a rerun under the same seed reproduces them byte for
byte. Floats are serialized with repr (shortest roundtrip form) for the
same reason. Galleries are single PNG grids with an optional caption band
under each cell.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import image_to_uint8
from .errors import InvalidConfig, IoFailure, ShapeMismatch
from .metrics import CheckpointRecord
from .seg import PerImageResult, SegMetricSet

REPORT_SCHEMA_VERSION = 1
CAPTION_BAND = 12  # pixels of caption strip under each cell


@dataclass(frozen=True)
class SweepRow:
    experiment_id: str
    model: str
    real_n: int
    synth_n: int
    micro: SegMetricSet
    imagewise: SegMetricSet


@dataclass
class MetricReport:
    schema_version: int
    rows: list[SweepRow]
    best_index: int | None = None


def _fmt(x: float) -> str:
    return repr(float(x))


_SEG_COLUMNS = [
    "schema_version", "experiment_id", "model", "real_n", "synth_n",
    "micro_iou", "micro_f1", "micro_accuracy", "micro_precision",
    "imagewise_iou", "imagewise_f1", "imagewise_accuracy", "imagewise_precision",
    "best",
]


def emit_report(
    report: MetricReport, out: str | Path, name: str = "segmentation"
) -> tuple[Path, Path]:
    """Write <name>.csv and <name>.json under ``out``; returns both paths."""
    out = Path(out)
    csv_path = out / f"{name}.csv"
    json_path = out / f"{name}.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(_SEG_COLUMNS)
            for i, r in enumerate(report.rows):
                wr.writerow([
                    report.schema_version, r.experiment_id, r.model,
                    r.real_n, r.synth_n,
                    _fmt(r.micro.iou), _fmt(r.micro.f1),
                    _fmt(r.micro.accuracy), _fmt(r.micro.precision),
                    _fmt(r.imagewise.iou), _fmt(r.imagewise.f1),
                    _fmt(r.imagewise.accuracy), _fmt(r.imagewise.precision),
                    1 if report.best_index == i else 0,
                ])
        payload = {
            "schema_version": report.schema_version,
            "best_index": report.best_index,
            "rows": [
                {
                    "experiment_id": r.experiment_id,
                    "model": r.model,
                    "real_n": r.real_n,
                    "synth_n": r.synth_n,
                    "micro": r.micro.__dict__,
                    "imagewise": r.imagewise.__dict__,
                }
                for r in report.rows
            ],
        }
        json_path.write_text(json.dumps(payload, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(out), str(exc)) from exc
    return csv_path, json_path


def report_from_json(path: str | Path) -> MetricReport:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(str(path), str(exc)) from exc
    rows = [
        SweepRow(
            experiment_id=r["experiment_id"],
            model=r["model"],
            real_n=r["real_n"],
            synth_n=r["synth_n"],
            micro=SegMetricSet(**r["micro"]),
            imagewise=SegMetricSet(**r["imagewise"]),
        )
        for r in payload["rows"]
    ]
    return MetricReport(payload["schema_version"], rows, payload.get("best_index"))


_RECORD_COLUMNS = ["schema_version", "checkpoint_id", "fid", "sim", "n_real", "n_gen"]


def write_records(records: Sequence[CheckpointRecord], path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(_RECORD_COLUMNS)
            for r in records:
                wr.writerow([
                    REPORT_SCHEMA_VERSION, r.checkpoint_id, _fmt(r.fid),
                    "" if r.sim is None else _fmt(r.sim),
                    "" if r.n_real is None else r.n_real,
                    "" if r.n_gen is None else r.n_gen,
                ])
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    return path


def read_records(path: str | Path) -> list[CheckpointRecord]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            out = []
            for row in reader:
                out.append(CheckpointRecord(
                    checkpoint_id=int(row["checkpoint_id"]),
                    fid=float(row["fid"]),
                    sim=float(row["sim"]) if row.get("sim") else None,
                    n_real=int(row["n_real"]) if row.get("n_real") else None,
                    n_gen=int(row["n_gen"]) if row.get("n_gen") else None,
                ))
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise InvalidConfig(f"malformed records file {path}: {exc}") from exc
    return out


_AUDIT_COLUMNS = ["id", "tp", "fp", "fn", "tn", "iou", "f1", "accuracy", "precision"]


def write_per_image_csv(per_image: Sequence[PerImageResult], path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(_AUDIT_COLUMNS)
            for r in per_image:
                wr.writerow([
                    r.id, r.counts.tp, r.counts.fp, r.counts.fn, r.counts.tn,
                    _fmt(r.metrics.iou), _fmt(r.metrics.f1),
                    _fmt(r.metrics.accuracy), _fmt(r.metrics.precision),
                ])
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    return path


def _cell_to_uint8(item: torch.Tensor) -> np.ndarray:
    if item.ndim == 2:  # {0,1} mask
        return item.to(torch.uint8).numpy() * np.uint8(255)
    if item.ndim == 3:
        return image_to_uint8(item)
    raise ShapeMismatch(f"gallery items must be [H,W] or [C,H,W], got {tuple(item.shape)}")


def emit_gallery(
    samples: Sequence[torch.Tensor],
    rows: int,
    cols: int,
    out: str | Path,
    captions: Sequence[str] | None = None,
) -> Path:
    """Tile samples row-major into one PNG of cols*w by rows*(h + band)
    pixels, where the caption band appears only when captions are given."""
    if not samples:
        raise InvalidConfig("gallery needs at least one sample")
    if len(samples) > rows * cols:
        raise InvalidConfig(
            f"{len(samples)} samples do not fit a {rows}x{cols} grid"
        )
    if captions is not None and len(captions) != len(samples):
        raise InvalidConfig(f"{len(captions)} captions for {len(samples)} samples")

    cells = [_cell_to_uint8(s) for s in samples]
    if len({c.shape[:2] for c in cells}) != 1:
        raise ShapeMismatch("gallery samples must share one resolution")
    if any(c.ndim == 3 for c in cells):
        cells = [
            np.repeat(c[:, :, None], 3, axis=2) if c.ndim == 2 else c for c in cells
        ]
    h, w = cells[0].shape[:2]
    band = CAPTION_BAND if captions is not None else 0
    shape = (rows * (h + band), cols * w)
    canvas = np.zeros(shape + cells[0].shape[2:], dtype=np.uint8)
    for i, c in enumerate(cells):
        r, k = divmod(i, cols)
        y = r * (h + band)
        canvas[y:y + h, k * w:(k + 1) * w] = c

    im = Image.fromarray(canvas)
    if captions is not None:
        draw = ImageDraw.Draw(im)
        for i, text in enumerate(captions):
            r, k = divmod(i, cols)
            y = r * (h + band) + h + 1
            draw.text((k * w + 2, y), text, fill=255 if im.mode == "L" else (255, 255, 255))
    out = Path(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        im.save(out)
    except OSError as exc:
        raise IoFailure(str(out), str(exc)) from exc
    return out
