"""Command line front end for the pipeline.

Every command works inside a run directory ``<out_root>/<run_id>`` holding
``config.toml``, ``checkpoints/``, ``samples/`` and ``reports/``, and takes
an exclusive lock on it for its duration (one stage at a time per run). The
fully resolved config is written next to the outputs on each invocation, so
a finished run documents itself.

Failures exit nonzero with a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from contextlib import contextmanager
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    SEED_GEN_IMAGES,
    SEED_GEN_MASKS,
    SEED_SUBSET_REAL,
    SEED_SUBSET_SYNTH,
    SEED_SUBSET_TEST,
    ExperimentConfig,
    load_config,
    load_dataset_spec,
    save_config,
)
from .data import (
    PairedDataset,
    load_mask_set,
    load_paired_dataset,
    split_dataset,
    write_generated_dataset,
    write_mask_set,
)
from .denoiser import (
    IMAGE_MODEL,
    MASK_MODEL,
    train_denoiser,
    train_denoiser_on_tensors,
)
from .errors import InsufficientData, InvalidConfig, PipelineError, RunLocked
from .experiment import (
    generate_conditioned_images,
    generate_masks,
    run_mixing_sweep,
    run_three_way,
    select_best_checkpoint,
)
from .latent import ae_from_checkpoint, latent_training_tensors, train_autoencoder
from .metrics import (
    SIM,
    CheckpointRecord,
    closest_real,
    downsample_extractor,
    fid,
    train_feature_encoder,
)
from .report import (
    REPORT_SCHEMA_VERSION,
    MetricReport,
    SweepRow,
    emit_gallery,
    emit_report,
    read_records,
    report_from_json,
    write_per_image_csv,
    write_records,
)
from .seg import evaluate_segmenter, train_segmenter

log = logging.getLogger(__name__)

LOCK_NAME = ".lock"
SELECTION_SCHEMA_VERSION = 1


# --- run directory plumbing -------------------------------------------------

@contextmanager
def run_lock(run_dir: Path):
    """Exclusive per-run lock via O_EXCL file creation. A crash can leave
    the lock behind; removing ``.lock`` by hand recovers the run."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(str(run_dir)) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def _open_run(cfg: ExperimentConfig):
    """Lock the run dir and persist the resolved config beside the outputs."""
    with run_lock(cfg.run_dir()) as run:
        save_config(cfg, run / "config.toml")
        yield run


def _dataset(cfg: ExperimentConfig, spec: str) -> PairedDataset:
    return load_dataset_spec(spec, cfg.resolution, cfg.mask_threshold)


def _subset(ds: PairedDataset, count: int, seed: int, label: str) -> PairedDataset:
    """First ``count`` samples of a seeded shuffle; 0 means the whole set."""
    if count <= 0 or count == len(ds):
        return ds
    if count > len(ds):
        raise InsufficientData(f"{label}: need {count} samples, have {len(ds)}")
    return split_dataset(ds, [count], seed)[0]


def _step_of(path: Path) -> int:
    m = re.search(r"(\d+)$", path.stem)
    if m is None:
        raise InvalidConfig(f"cannot read a checkpoint id from {path.name!r}")
    return int(m.group(1))


def _latest_checkpoint(ckpt_dir: Path) -> Path:
    files = sorted(ckpt_dir.glob("step-*.ckpt"))
    if not files:
        raise InvalidConfig(f"no checkpoints under {ckpt_dir}")
    return files[-1]


def _pick_checkpoint(run: Path, stage: str, override: str | None) -> Path:
    """Explicit path if given, else the selected checkpoint for the stage,
    else the newest one trained."""
    if override:
        return Path(override)
    ckpt_dir = run / "checkpoints" / stage
    kind = "masks" if stage == "mask" else "images"
    selection = run / "reports" / f"selection-{kind}.json"
    if selection.is_file():
        chosen = json.loads(selection.read_text())["checkpoint_id"]
        path = ckpt_dir / f"step-{chosen:07d}.ckpt"
        if not path.is_file():
            raise InvalidConfig(
                f"selected checkpoint id {chosen} has no file at {path}"
            )
        return path
    return _latest_checkpoint(ckpt_dir)


def _latest_sample_dir(run: Path, prefix: str) -> Path:
    dirs = sorted(d for d in (run / "samples").glob(f"{prefix}-*") if d.is_dir())
    if not dirs:
        raise InvalidConfig(f"no {prefix}-* directories under {run / 'samples'}")
    return dirs[-1]


def _load_ae(cfg: ExperimentConfig, run: Path, override: str | None):
    if not cfg.latent_mode:
        return None
    path = Path(override) if override else _latest_checkpoint(run / "checkpoints" / "ae")
    return ae_from_checkpoint(load_checkpoint(path))


def _print_report(report: MetricReport) -> None:
    print(
        f"{'experiment':<24} {'real':>5} {'synth':>6}"
        f" {'iou':>7} {'f1':>7} {'iw-iou':>7} {'iw-f1':>7}"
    )
    for i, r in enumerate(report.rows):
        flag = " *" if report.best_index == i else ""
        print(
            f"{r.experiment_id:<24} {r.real_n:>5} {r.synth_n:>6}"
            f" {r.micro.iou:>7.4f} {r.micro.f1:>7.4f}"
            f" {r.imagewise.iou:>7.4f} {r.imagewise.f1:>7.4f}{flag}"
        )


# --- training commands ------------------------------------------------------

def cmd_train_mask(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        ds = _dataset(cfg, cfg.data_root)
        out = run / "checkpoints" / "mask"
        ckpts = train_denoiser(
            ds, MASK_MODEL, cfg.mask_diffusion(), cfg.mask_train(),
            cfg.denoiser_arch(in_channels=1, cond_channels=0), out_dir=out,
        )
        final = ckpts[-1]
        print(f"mask model: {len(ckpts)} checkpoint(s) in {out}")
        print(f"final step {final.step}, loss ema {final.extra['loss_ema']:.6f}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        ds = _dataset(cfg, cfg.data_root)
        out = run / "checkpoints" / "ae"
        in_channels = ds[0].image.shape[0]
        ckpt = train_autoencoder(
            ds, cfg.ae_train(), cfg.ae_arch(in_channels), out_dir=out
        )
        print(f"autoencoder in {out}")
        print(f"training-set psnr {ckpt.extra['psnr_db']:.2f} dB")
    return 0


def cmd_train_image(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        ds = _dataset(cfg, cfg.data_root)
        out = run / "checkpoints" / "image"
        if cfg.latent_mode:
            ae = _load_ae(cfg, run, args.ae)
            x0, cond = latent_training_tensors(ae, ds)
            arch = cfg.denoiser_arch(
                in_channels=x0.shape[1], cond_channels=cond.shape[1]
            )
            ckpts = train_denoiser_on_tensors(
                x0, cond, IMAGE_MODEL, cfg.image_diffusion(),
                cfg.image_train(), arch, out_dir=out,
            )
        else:
            arch = cfg.denoiser_arch(
                in_channels=ds[0].image.shape[0], cond_channels=1
            )
            ckpts = train_denoiser(
                ds, IMAGE_MODEL, cfg.image_diffusion(), cfg.image_train(),
                arch, out_dir=out,
            )
        final = ckpts[-1]
        print(f"image model: {len(ckpts)} checkpoint(s) in {out}")
        print(f"final step {final.step}, loss ema {final.extra['loss_ema']:.6f}")
    return 0


# --- generation commands ----------------------------------------------------

def cmd_gen_masks(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        ckpt_path = _pick_checkpoint(run, "mask", args.checkpoint)
        ckpt = load_checkpoint(ckpt_path)
        n = args.n if args.n is not None else cfg.n_masks
        seed = cfg.seed + SEED_GEN_MASKS
        masks = generate_masks(
            ckpt, n, seed, reject_empty=cfg.reject_empty,
            batch_size=cfg.gen_batch_size, mask_threshold=cfg.mask_threshold,
        )
        out = run / "samples" / f"masks-{ckpt.step:07d}"
        write_mask_set(masks, out, generator_digest=ckpt.digest(), seed=seed)
        print(f"{len(masks)} masks from {ckpt_path.name} in {out}")
    return 0


def cmd_gen_images(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        ckpt_path = _pick_checkpoint(run, "image", args.checkpoint)
        ckpt = load_checkpoint(ckpt_path)
        mask_dir = Path(args.masks) if args.masks else _latest_sample_dir(run, "masks")
        masks = load_mask_set(mask_dir, cfg.resolution, cfg.mask_threshold)
        if cfg.n_images > 0:
            masks = masks[: cfg.n_images]
        ae = _load_ae(cfg, run, args.ae)
        seed = cfg.seed + SEED_GEN_IMAGES
        samples = generate_conditioned_images(
            ckpt, masks, seed, ae=ae, batch_size=cfg.gen_batch_size
        )
        out = run / "samples" / f"synthetic-{ckpt.step:07d}"
        write_generated_dataset(
            samples, out, generator_digest=ckpt.digest(), seed=seed
        )
        print(f"{len(samples)} image/mask pairs from {ckpt_path.name} in {out}")
    return 0


# --- evaluation and selection -----------------------------------------------

def _eval_extractor(cfg: ExperimentConfig, name: str, real_items):
    if name == "downsample":
        return downsample_extractor()
    return train_feature_encoder(real_items, seed=cfg.seed)


def cmd_eval_gen(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        real = _dataset(cfg, cfg.data_root)
        prefix = "masks" if args.kind == "masks" else "synthetic"
        gen_dirs = [Path(p) for p in args.gen] if args.gen else sorted(
            d for d in (run / "samples").glob(f"{prefix}-*") if d.is_dir()
        )
        if not gen_dirs:
            raise InvalidConfig(f"no generated {args.kind} to evaluate")
        ids = None
        if args.ids:
            ids = [int(x) for x in args.ids.split(",")]
            if len(ids) != len(gen_dirs):
                raise InvalidConfig(
                    f"{len(ids)} ids for {len(gen_dirs)} directories"
                )
        if args.kind == "masks":
            real_items = [s.mask for s in real]
        else:
            real_items = [s.image for s in real]
        fx = _eval_extractor(cfg, args.extractor, real_items)

        records = []
        for k, d in enumerate(gen_dirs):
            if args.kind == "masks":
                gen_items = load_mask_set(d, cfg.resolution, cfg.mask_threshold)
                sim_value = SIM(real_items, gen_items)
            else:
                gen_ds = load_paired_dataset(d, cfg.resolution, cfg.mask_threshold)
                gen_items = [s.image for s in gen_ds]
                sim_value = None
            records.append(CheckpointRecord(
                checkpoint_id=ids[k] if ids else _step_of(d),
                fid=fid(real_items, gen_items, fx),
                sim=sim_value,
                n_real=len(real_items),
                n_gen=len(gen_items),
            ))
        out = run / "reports" / f"records-{args.kind}.csv"
        write_records(records, out)
        for r in records:
            sim_str = f" sim {r.sim:.2f}" if r.sim is not None else ""
            print(f"checkpoint {r.checkpoint_id}: fid {r.fid:.2f}{sim_str}")
        print(f"records in {out}")
    return 0


def cmd_select(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        records_path = (
            Path(args.records) if args.records
            else run / "reports" / f"records-{args.kind}.csv"
        )
        best = select_best_checkpoint(read_records(records_path))
        out = run / "reports" / f"selection-{args.kind}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "schema_version": SELECTION_SCHEMA_VERSION,
            "kind": args.kind,
            "checkpoint_id": best.checkpoint_id,
            "fid": best.fid,
            "sim": best.sim,
        }
        out.write_text(json.dumps(payload, indent=2) + "\n")
        print(f"selected checkpoint {best.checkpoint_id} (fid {best.fid:.2f})")
        print(f"selection in {out}")
    return 0


# --- segmentation experiments -----------------------------------------------

def _test_set(cfg: ExperimentConfig, override: str | None) -> PairedDataset:
    test = _dataset(cfg, override or cfg.test_root)
    return _subset(test, cfg.test_count, cfg.seed + SEED_SUBSET_TEST, "test set")


def cmd_train_seg(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        train = _dataset(cfg, args.train or cfg.data_root)
        test = _test_set(cfg, args.test)
        scfg = cfg.seg_train()
        ckpt = train_segmenter(train, scfg)
        ckpt_path = run / "checkpoints" / "seg" / f"{scfg.model}.ckpt"
        save_checkpoint(ckpt, ckpt_path)
        micro, imagewise, per_image = evaluate_segmenter(ckpt, test)
        row = SweepRow(
            experiment_id=f"seg-{scfg.model}",
            model=scfg.model,
            real_n=sum(1 for s in train if s.provenance == "real"),
            synth_n=sum(1 for s in train if s.provenance != "real"),
            micro=micro,
            imagewise=imagewise,
        )
        report = MetricReport(schema_version=REPORT_SCHEMA_VERSION, rows=[row])
        emit_report(report, run / "reports", name=f"seg-{scfg.model}")
        write_per_image_csv(
            per_image, run / "reports" / f"seg-{scfg.model}-per-image.csv"
        )
        print(f"segmenter in {ckpt_path}")
        _print_report(report)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        real = _dataset(cfg, args.real or cfg.data_root)
        synth_dir = Path(args.synth) if args.synth else _latest_sample_dir(
            run, "synthetic"
        )
        synth = load_paired_dataset(synth_dir, cfg.resolution, cfg.mask_threshold)
        test = _test_set(cfg, args.test)
        report = run_mixing_sweep(
            real, synth, cfg.mixing_plan(), cfg.seg_train(), test, jobs=args.jobs
        )
        csv_path, json_path = emit_report(report, run / "reports", name="sweep")
        _print_report(report)
        print(f"report in {csv_path} and {json_path}")
    return 0


def cmd_three_way(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        real = _subset(
            _dataset(cfg, args.real or cfg.data_root),
            cfg.threeway_real_count, cfg.seed + SEED_SUBSET_REAL, "real set",
        )
        synth_dir = Path(args.synth) if args.synth else _latest_sample_dir(
            run, "synthetic"
        )
        synth = _subset(
            load_paired_dataset(synth_dir, cfg.resolution, cfg.mask_threshold),
            cfg.threeway_synth_count, cfg.seed + SEED_SUBSET_SYNTH, "synthetic set",
        )
        test = _test_set(cfg, args.test)
        report = run_three_way(real, synth, test, cfg.seg_train())
        csv_path, json_path = emit_report(report, run / "reports", name="threeway")
        _print_report(report)
        print(f"report in {csv_path} and {json_path}")
    return 0


# --- presentation -----------------------------------------------------------

def _gallery_items(cfg: ExperimentConfig, source: str, kind: str | None):
    paired = source.startswith("blob:") or (Path(source) / "images").is_dir()
    if paired:
        ds = _dataset(cfg, source)
        if kind == "masks":
            return [s.mask for s in ds]
        return [s.image for s in ds]
    if kind == "images":
        raise InvalidConfig(f"{source} holds masks only")
    return load_mask_set(source, cfg.resolution, cfg.mask_threshold)


def cmd_gallery(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        items = _gallery_items(cfg, args.source, args.kind)
        n = args.rows * args.cols
        if len(items) > n:
            items = items[:n]
        captions = None
        if args.sim_against:
            ref = [s.mask for s in _dataset(cfg, args.sim_against)]
            captions = [f"{closest_real(m, ref).score * 100:.2f}" for m in items]
        out = Path(args.out) if args.out else run / "reports" / "gallery.png"
        emit_gallery(items, args.rows, args.cols, out, captions=captions)
        print(f"gallery of {len(items)} samples in {out}")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    with _open_run(cfg) as run:
        reports = [report_from_json(p) for p in args.json]
        if len(reports) == 1:
            merged = reports[0]
        else:
            merged = MetricReport(
                schema_version=REPORT_SCHEMA_VERSION,
                rows=[r for rep in reports for r in rep.rows],
            )
        csv_path, json_path = emit_report(merged, run / "reports", name=args.name)
        _print_report(merged)
        print(f"report in {csv_path} and {json_path}")
    return 0


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polypdiff",
        description="Diffusion-generated polyp segmentation data pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config TOML")
        p.set_defaults(func=func)
        return p

    add("train-mask", cmd_train_mask, "train the unconditional mask model")
    add("train-ae", cmd_train_ae, "train the latent-mode autoencoder")

    p = add("train-image", cmd_train_image, "train the mask-conditioned image model")
    p.add_argument("--ae", help="autoencoder checkpoint (latent mode)")

    p = add("gen-masks", cmd_gen_masks, "sample masks from a mask checkpoint")
    p.add_argument("--checkpoint", help="mask checkpoint path")
    p.add_argument("--n", type=int, help="override the configured mask count")

    p = add("gen-images", cmd_gen_images, "sample images conditioned on masks")
    p.add_argument("--checkpoint", help="image checkpoint path")
    p.add_argument("--masks", help="mask set directory to condition on")
    p.add_argument("--ae", help="autoencoder checkpoint (latent mode)")

    p = add("eval-gen", cmd_eval_gen, "score generated sets against the data")
    p.add_argument("--kind", required=True, choices=["masks", "images"])
    p.add_argument("--gen", nargs="*", help="generated set directories")
    p.add_argument("--ids", help="comma-separated checkpoint ids per directory")
    p.add_argument(
        "--extractor", choices=["downsample", "encoder"], default="downsample",
        help="feature extractor used for the distribution distance",
    )

    p = add("select", cmd_select, "pick the lowest-distance checkpoint")
    p.add_argument("--kind", required=True, choices=["masks", "images"])
    p.add_argument("--records", help="records CSV (default: this run's)")

    p = add("train-seg", cmd_train_seg, "train and score one segmenter")
    p.add_argument("--train", help="training dataset (default: data_root)")
    p.add_argument("--test", help="test dataset (default: test_root)")

    p = add("sweep", cmd_sweep, "real + increasing-synthetic mixing sweep")
    p.add_argument("--real", help="real dataset (default: data_root)")
    p.add_argument("--synth", help="synthetic dataset directory")
    p.add_argument("--test", help="test dataset (default: test_root)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent sweep points")

    p = add("three-way", cmd_three_way, "real-only vs synthetic-only vs combined")
    p.add_argument("--real", help="real dataset (default: data_root)")
    p.add_argument("--synth", help="synthetic dataset directory")
    p.add_argument("--test", help="test dataset (default: test_root)")

    p = add("gallery", cmd_gallery, "tile samples into one PNG grid")
    p.add_argument("--source", required=True, help="dataset or mask set to show")
    p.add_argument("--rows", type=int, default=2)
    p.add_argument("--cols", type=int, default=5)
    p.add_argument("--kind", choices=["masks", "images"], default=None)
    p.add_argument("--out", help="output PNG (default: reports/gallery.png)")
    p.add_argument(
        "--sim-against", help="caption each cell with its best match score"
    )

    p = add("report", cmd_report, "merge report JSONs into one table")
    p.add_argument("--json", nargs="+", required=True, help="report JSON files")
    p.add_argument("--name", default="combined", help="output report name")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
