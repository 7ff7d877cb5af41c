"""Pipeline orchestration: checkpoint selection, mask and image generation,
and the real/synthetic mixing experiments.

Everything here is a deterministic function of (inputs, seeds). Mask
generation derives one seed per output slot (seed + index), so any slot can
be reproduced in isolation and batching never changes results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import torch

from .checkpoint import Checkpoint
from .data import PairedDataset, PairedSample, binarize_mask, concat_datasets, \
    mask_to_signal, split_dataset
from .denoiser import IMAGE_MODEL, MASK_MODEL, net_from_checkpoint, \
    schedule_from_checkpoint
from .diffusion import sample_loop
from .errors import (
    EmptyList,
    GenerationFailed,
    InsufficientData,
    InvalidConfig,
    ShapeMismatch,
    WrongModelKind,
)
from .latent import AutoencoderNet, decode, downsample_condition
from .metrics import CheckpointRecord
from .report import MetricReport, REPORT_SCHEMA_VERSION, SweepRow
from .seg import SegTrainConfig, evaluate_segmenter, train_segmenter

log = logging.getLogger(__name__)

MAX_EMPTY_RETRIES = 10
_RETRY_STRIDE = 1_000_003  # keeps retry seeds clear of all base slot seeds


def select_best_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """The record with the lowest FID; ties break to the earliest id."""
    if not records:
        raise EmptyList("no checkpoint records to select from")
    return min(records, key=lambda r: (r.fid, r.checkpoint_id))


def _sample_batch(
    net, sched, shape: tuple[int, ...], cond: torch.Tensor | None,
    seeds: Sequence[int],
) -> torch.Tensor:
    gens = [torch.Generator().manual_seed(s) for s in seeds]
    with torch.no_grad():
        return sample_loop(net, shape, cond, sched, gens)


def generate_masks(
    ckpt: Checkpoint,
    n: int,
    seed: int,
    reject_empty: bool = True,
    batch_size: int = 32,
    mask_threshold: float = 0.5,
) -> list[torch.Tensor]:
    """n independent mask samples, binarized at ``mask_threshold``.

    Slot i is drawn with seed ``seed + i``. With ``reject_empty``, an
    all-background draw is retried up to MAX_EMPTY_RETRIES times with
    derived seeds; rejections are logged.
    """
    if ckpt.kind != MASK_MODEL:
        raise WrongModelKind(f"expected a mask model, got {ckpt.kind!r}")
    if n < 0:
        raise InvalidConfig(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    net = net_from_checkpoint(ckpt)
    sched = schedule_from_checkpoint(ckpt)
    resolution = ckpt.extra.get("resolution")
    if not resolution:
        raise InvalidConfig("mask checkpoint lacks a resolution record")
    res = int(resolution)
    masks: list[torch.Tensor | None] = [None] * n

    def to_mask(x: torch.Tensor) -> torch.Tensor:
        # sampler output is in [-1,1]; map to [0,1] before thresholding
        return binarize_mask((x[0] + 1.0) * 0.5, mask_threshold)

    for start in range(0, n, batch_size):
        slots = list(range(start, min(start + batch_size, n)))
        shape = (len(slots), ckpt.arch["in_channels"], res, res)
        batch = _sample_batch(net, sched, shape, None, [seed + i for i in slots])
        for slot, x in zip(slots, batch):
            masks[slot] = to_mask(x)

    if reject_empty:
        rejected = 0
        for i in range(n):
            attempt = 0
            while int(masks[i].sum()) == 0:
                attempt += 1
                if attempt > MAX_EMPTY_RETRIES:
                    raise GenerationFailed(
                        f"slot {i}: still empty after {MAX_EMPTY_RETRIES} retries"
                    )
                rejected += 1
                retry_seed = seed + i + attempt * _RETRY_STRIDE
                x = _sample_batch(
                    net, sched, (1, ckpt.arch["in_channels"], res, res), None,
                    [retry_seed],
                )[0]
                masks[i] = to_mask(x)
        if rejected:
            log.info("generate_masks: resampled %d empty draws", rejected)
    return masks  # type: ignore[return-value]


def generate_conditioned_images(
    ckpt: Checkpoint,
    masks: Sequence[torch.Tensor],
    seeds: int | Sequence[int],
    ae: AutoencoderNet | None = None,
    batch_size: int = 16,
    id_prefix: str = "synth",
) -> list[PairedSample]:
    """One image per mask from the conditional model; each output pair
    carries its conditioning mask as ground truth, provenance synthetic.

    In latent mode (``ae`` given) the condition is the area-pooled mask at
    latent resolution and samples are decoded back to pixels.
    """
    if ckpt.kind != IMAGE_MODEL:
        raise WrongModelKind(f"expected an image model, got {ckpt.kind!r}")
    if isinstance(seeds, int):
        seeds = [seeds + i for i in range(len(masks))]
    if len(seeds) != len(masks):
        raise ShapeMismatch(f"{len(seeds)} seeds for {len(masks)} masks")
    if not masks:
        return []

    net = net_from_checkpoint(ckpt)
    sched = schedule_from_checkpoint(ckpt)
    zc = ckpt.arch["in_channels"]

    out: list[PairedSample] = []
    for start in range(0, len(masks), batch_size):
        chunk = list(range(start, min(start + batch_size, len(masks))))
        mstack = [masks[i] for i in chunk]
        if ae is None:
            cond = torch.stack([mask_to_signal(m).unsqueeze(0) for m in mstack])
            shape = (len(chunk), zc, *mstack[0].shape)
        else:
            f = ae.arch.downsample_factor
            cond = torch.stack([
                downsample_condition(m, f).unsqueeze(0) for m in mstack
            ])
            shape = (len(chunk), zc, *cond.shape[-2:])
        sampled = _sample_batch(net, sched, shape, cond, [seeds[i] for i in chunk])
        images = sampled if ae is None else decode(ae, sampled)
        for i, img in zip(chunk, images):
            out.append(PairedSample(
                image=img,
                mask=masks[i].clone(),
                id=f"{id_prefix}-{i:05d}",
                provenance="synthetic",
            ))
    return out


@dataclass(frozen=True)
class MixingPlan:
    real_count: int
    synthetic_counts: tuple[int, ...]

    def validate(self) -> None:
        if self.real_count < 0 or any(k < 0 for k in self.synthetic_counts):
            raise InvalidConfig("mixing counts must be >= 0")
        if not self.synthetic_counts:
            raise InvalidConfig("synthetic_counts must be non-empty")
        if list(self.synthetic_counts) != sorted(self.synthetic_counts):
            raise InvalidConfig("synthetic_counts must be sorted ascending")


def _eval_row(
    experiment_id: str,
    train_ds: PairedDataset,
    test: PairedDataset,
    scfg: SegTrainConfig,
) -> SweepRow:
    ckpt = train_segmenter(train_ds, scfg)
    micro, imagewise, _ = evaluate_segmenter(ckpt, test)
    n_real = sum(1 for s in train_ds if s.provenance == "real")
    return SweepRow(
        experiment_id=experiment_id,
        model=scfg.model,
        real_n=n_real,
        synth_n=len(train_ds) - n_real,
        micro=micro,
        imagewise=imagewise,
    )


def run_mixing_sweep(
    real: PairedDataset,
    synth: PairedDataset,
    plan: MixingPlan,
    scfg: SegTrainConfig,
    test: PairedDataset,
    jobs: int = 1,
) -> MetricReport:
    """Train at a fixed real count with increasing synthetic admixtures.

    Synthetic subsets are nested: the k2 subset extends the k1 subset for
    k1 < k2, so rows differ only by the added samples. Each sweep point is
    seeded from its index alone, so with jobs > 1 the points train
    concurrently and the report is identical to a serial run.
    """
    plan.validate()
    scfg.validate()
    if jobs < 1:
        raise InvalidConfig(f"jobs must be >= 1, got {jobs}")
    if len(real) < plan.real_count:
        raise InsufficientData(
            f"need {plan.real_count} real samples, have {len(real)}"
        )
    if len(synth) < max(plan.synthetic_counts):
        raise InsufficientData(
            f"need {max(plan.synthetic_counts)} synthetic samples, have {len(synth)}"
        )
    real_sub = split_dataset(real, [plan.real_count], scfg.seed)[0]
    synth_order = split_dataset(synth, [len(synth)], scfg.seed + 1)[0]
    tasks = []
    for j, k in enumerate(plan.synthetic_counts):
        synth_sub = PairedDataset(synth_order.samples[:k], synth.resolution)
        train_ds = concat_datasets(real_sub, synth_sub)
        run_cfg = SegTrainConfig(
            **{**scfg.__dict__, "seed": scfg.seed + 101 * (j + 1)}
        )
        tasks.append((f"mix-r{plan.real_count}-s{k}", train_ds, test, run_cfg))
    if jobs == 1:
        rows = [_eval_row(*t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda t: _eval_row(*t), tasks))
    return MetricReport(schema_version=REPORT_SCHEMA_VERSION, rows=rows)


def run_three_way(
    real: PairedDataset,
    synth: PairedDataset,
    test: PairedDataset,
    scfg: SegTrainConfig,
) -> MetricReport:
    """Real-only vs synthetic-only vs combined, with the best
    micro-imagewise IoU row flagged."""
    scfg.validate()
    if len(real) == 0 or len(synth) == 0:
        raise InsufficientData("three-way comparison needs both corpora")
    combos = [
        ("real-only", real),
        ("synthetic-only", synth),
        ("combined", concat_datasets(real, synth)),
    ]
    rows = []
    for j, (name, train_ds) in enumerate(combos):
        run_cfg = SegTrainConfig(
            **{**scfg.__dict__, "seed": scfg.seed + 101 * (j + 1)}
        )
        rows.append(_eval_row(name, train_ds, test, run_cfg))
    best = max(range(len(rows)), key=lambda i: rows[i].imagewise.iou)
    return MetricReport(
        schema_version=REPORT_SCHEMA_VERSION, rows=rows, best_index=best
    )
