"""Flat key-value experiment configuration.

The config file is TOML restricted to flat scalar/array keys; every knob of
the pipeline is a top-level key listed in ExperimentConfig below, and every
run writes its fully resolved config next to its outputs. Stage seeds are
derived from the global ``seed`` with fixed offsets so one value pins the
whole pipeline.

Dataset locations accept either a directory in the images/ + masks/ layout
or the scheme ``blob:<n>[:<seed>]``, an n-sample synthetic blob corpus
(deterministic in its own seed, default 0) that makes the pipeline runnable
without any licensed data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import PairedDataset, load_paired_dataset, synthetic_blob_dataset
from .denoiser import DenoiserArch, TrainConfig
from .diffusion import DiffusionConfig
from .errors import InvalidConfig, IoFailure
from .experiment import MixingPlan
from .latent import AutoencoderArch
from .seg import SegTrainConfig

# stage seed offsets relative to the global seed
SEED_MASK_TRAIN = 1
SEED_IMAGE_TRAIN = 2
SEED_AE_TRAIN = 3
SEED_SEG_TRAIN = 4
SEED_GEN_MASKS = 5
SEED_GEN_IMAGES = 6
SEED_SUBSET_REAL = 7
SEED_SUBSET_SYNTH = 8
SEED_SUBSET_TEST = 9


@dataclass
class ExperimentConfig:
    # data and run layout
    data_root: str = "blob:200"
    test_root: str = "blob:60:1"
    resolution: int = 64
    mask_threshold: float = 0.5
    seed: int = 0
    out_root: str = "runs"
    run_id: str = "default"

    # mask-model diffusion process
    mask_schedule: str = "cosine"
    mask_T: int = 1000
    mask_cosine_offset: float = 0.008
    mask_beta_start: float = 1e-4
    mask_beta_end: float = 0.02
    mask_total_steps: int = 20000
    mask_batch_size: int = 16
    mask_lr: float = 1e-4
    mask_checkpoint_every: int = 0

    # image-model diffusion process
    image_schedule: str = "cosine"
    image_T: int = 1000
    image_cosine_offset: float = 0.008
    image_beta_start: float = 1e-4
    image_beta_end: float = 0.02
    image_total_steps: int = 20000
    image_batch_size: int = 16
    image_lr: float = 1e-4
    image_checkpoint_every: int = 0

    # denoiser architecture (shared by both models)
    base_channels: int = 16
    net_depth: int = 2
    embed_dim: int = 64

    # latent mode
    latent_mode: bool = False
    ae_downsample: int = 4
    ae_latent_channels: int = 4
    ae_base_channels: int = 16
    ae_total_steps: int = 2000
    ae_batch_size: int = 16
    ae_lr: float = 1e-4

    # generation
    n_masks: int = 1000
    n_images: int = 1000
    gen_batch_size: int = 16
    reject_empty: bool = True

    # segmentation harness
    seg_model: str = "unet_small"
    seg_width: str = "small"
    seg_lr: float = 1e-4
    seg_epochs: int = 50
    seg_batch_size: int = 8
    seg_val_fraction: float = 0.0

    # experiment protocols
    sweep_real_count: int = 100
    sweep_synth_counts: list[int] = None  # type: ignore[assignment]
    threeway_real_count: int = 700
    threeway_synth_count: int = 1000
    test_count: int = 300

    def __post_init__(self):
        if self.sweep_synth_counts is None:
            self.sweep_synth_counts = list(range(0, 1001, 100))

    # --- stage config builders ---

    def mask_diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(
            schedule_kind=self.mask_schedule, T=self.mask_T,
            cosine_offset=self.mask_cosine_offset, conditioning="none",
            beta_start=self.mask_beta_start, beta_end=self.mask_beta_end,
        )

    def image_diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(
            schedule_kind=self.image_schedule, T=self.image_T,
            cosine_offset=self.image_cosine_offset, conditioning="mask_concat",
            beta_start=self.image_beta_start, beta_end=self.image_beta_end,
        )

    def mask_train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.mask_lr, batch_size=self.mask_batch_size,
            total_steps=self.mask_total_steps,
            checkpoint_every=self.mask_checkpoint_every,
            seed=self.seed + SEED_MASK_TRAIN,
        )

    def image_train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.image_lr, batch_size=self.image_batch_size,
            total_steps=self.image_total_steps,
            checkpoint_every=self.image_checkpoint_every,
            seed=self.seed + SEED_IMAGE_TRAIN,
        )

    def ae_train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.ae_lr, batch_size=self.ae_batch_size,
            total_steps=self.ae_total_steps,
            seed=self.seed + SEED_AE_TRAIN,
        )

    def denoiser_arch(self, in_channels: int, cond_channels: int) -> DenoiserArch:
        return DenoiserArch(
            base_channels=self.base_channels, depth=self.net_depth,
            in_channels=in_channels, cond_channels=cond_channels,
            embed_dim=self.embed_dim,
        )

    def ae_arch(self, in_channels: int) -> AutoencoderArch:
        return AutoencoderArch(
            downsample_factor=self.ae_downsample,
            latent_channels=self.ae_latent_channels,
            in_channels=in_channels,
            base_channels=self.ae_base_channels,
        )

    def seg_train(self) -> SegTrainConfig:
        return SegTrainConfig(
            model=self.seg_model, width=self.seg_width, lr=self.seg_lr,
            epochs=self.seg_epochs, batch_size=self.seg_batch_size,
            seed=self.seed + SEED_SEG_TRAIN,
            val_fraction=self.seg_val_fraction,
        )

    def mixing_plan(self) -> MixingPlan:
        return MixingPlan(
            real_count=self.sweep_real_count,
            synthetic_counts=tuple(self.sweep_synth_counts),
        )

    def run_dir(self) -> Path:
        return Path(self.out_root) / self.run_id


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def config_from_dict(raw: dict) -> ExperimentConfig:
    for key in raw:
        if key not in _FIELDS:
            raise InvalidConfig(f"unknown config key {key!r}")
    cfg = ExperimentConfig(**raw)
    _typecheck(cfg)
    return cfg


def _typecheck(cfg: ExperimentConfig) -> None:
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if f.name == "sweep_synth_counts":
            ok = isinstance(v, list) and all(
                isinstance(x, int) and not isinstance(x, bool) for x in v
            )
            if not ok:
                raise InvalidConfig("sweep_synth_counts must be an integer array")
            continue
        ref = getattr(defaults, f.name)
        # bool is an int subclass, so it gets checked first
        if isinstance(ref, bool):
            if not isinstance(v, bool):
                raise InvalidConfig(f"{f.name} must be a boolean, got {v!r}")
        elif isinstance(ref, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise InvalidConfig(f"{f.name} must be an integer, got {v!r}")
        elif isinstance(ref, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InvalidConfig(f"{f.name} must be a number, got {v!r}")
            setattr(cfg, f.name, float(v))
        elif not isinstance(v, str):
            raise InvalidConfig(f"{f.name} must be a string, got {v!r}")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    flat_violations = [k for k, v in raw.items() if isinstance(v, dict)]
    if flat_violations:
        raise InvalidConfig(
            f"config must be flat key-value pairs; found tables {flat_violations}"
        )
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise InvalidConfig(f"cannot serialize config value {v!r}")


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Write the fully resolved config as flat TOML."""
    path = Path(path)
    lines = [f"{f.name} = {_toml_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(path), str(exc)) from exc
    return path


def load_dataset_spec(
    spec: str, resolution: int, mask_threshold: float = 0.5
) -> PairedDataset:
    """A dataset location: either a directory path or ``blob:<n>[:<seed>]``."""
    if spec.startswith("blob:"):
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise InvalidConfig(f"bad blob spec {spec!r}, want blob:<n>[:<seed>]")
        try:
            n = int(parts[1])
            blob_seed = int(parts[2]) if len(parts) == 3 else 0
        except ValueError as exc:
            raise InvalidConfig(f"bad blob spec {spec!r}") from exc
        return synthetic_blob_dataset(n, resolution, blob_seed)
    return load_paired_dataset(spec, resolution, mask_threshold)
