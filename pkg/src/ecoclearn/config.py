"""Experiment configuration: a flat key-value text file parsed into the
dataclasses the pipelines consume.

Format: one ``key = value`` per line, ``#`` starts a comment, keys are
namespaced with dots (``train.batch_size = 32``). Lists are comma-separated.
No environment variables are consulted, so a config file fully determines a
run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attacks import AttackConfig
from .data import AugmentationConfig
from .losses import LossConfig
from .network import NetConfig
from .training import MODEL_NAMES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "blobs"              # blobs | textures | idx | csv
    blobs_classes: int = 3
    blobs_per_class: int = 100
    blobs_dim: int = 16
    blobs_spread: float = 0.02
    blobs_center_span: float = 0.25
    textures_classes: int = 5
    textures_per_class: int = 1000
    textures_size: int = 28
    idx_images: str = ""
    idx_labels: str = ""
    csv_path: str = ""
    limit: int = 0                   # keep only the first N samples (0 = all)
    replicate_channels: bool = False
    seed: int = 0                    # synthetic generation seed


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split_ratios: tuple = (0.7, 0.15, 0.1, 0.05)
    models: tuple = ("standard",)
    seeds: tuple = (0,)
    net: dict = field(default_factory=dict)      # NetConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    tfc_codebook: str = ""           # path to a fixed codebook for acl-tfc
    output_dir: str = ""
    workers: int = 1

    def validate(self):
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model {m!r}; expected one of {MODEL_NAMES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if "acl-tfc" in self.models and not self.tfc_codebook \
                and "acl-cfpc" not in self.models:
            raise ConfigError(
                "acl-tfc needs either tfc.codebook or an acl-cfpc run in the "
                "same experiment to provide its fixed codebook")
        if self.dataset.kind not in ("blobs", "textures", "idx", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "idx" and not (
                self.dataset.idx_images and self.dataset.idx_labels):
            raise ConfigError("idx datasets need dataset.idx.images and dataset.idx.labels")
        if self.dataset.kind == "csv" and not self.dataset.csv_path:
            raise ConfigError("csv datasets need dataset.csv.path")
        return self

    def net_config(self, input_shape, num_classes):
        return NetConfig(input_shape=input_shape, num_classes=num_classes,
                         **self.net)


def _parse_scalar(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_config_text(text):
    """Parse config text into a flat {key: value} mapping."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        entries[key] = raw.strip()
    return entries


def _int_list(raw):
    return tuple(int(v) for v in str(raw).split(",") if v.strip())


def _float_list(raw):
    return tuple(float(v) for v in str(raw).split(",") if v.strip())


def _str_list(raw):
    return tuple(v.strip() for v in str(raw).split(",") if v.strip())


def config_from_entries(entries):
    """Assemble an ExperimentConfig from a flat key/value mapping."""
    entries = dict(entries)

    def pop(key, default=None):
        if key in entries:
            return _parse_scalar(str(entries.pop(key)))
        return default

    ds = DatasetSpec(
        kind=pop("dataset.kind", "blobs"),
        blobs_classes=pop("dataset.blobs.classes", 3),
        blobs_per_class=pop("dataset.blobs.per_class", 100),
        blobs_dim=pop("dataset.blobs.dim", 16),
        blobs_spread=pop("dataset.blobs.spread", 0.02),
        blobs_center_span=pop("dataset.blobs.center_span", 0.25),
        textures_classes=pop("dataset.textures.classes", 5),
        textures_per_class=pop("dataset.textures.per_class", 1000),
        textures_size=pop("dataset.textures.size", 28),
        idx_images=str(pop("dataset.idx.images", "")),
        idx_labels=str(pop("dataset.idx.labels", "")),
        csv_path=str(pop("dataset.csv.path", "")),
        limit=pop("dataset.limit", 0),
        replicate_channels=pop("dataset.replicate_channels", False),
        seed=pop("dataset.seed", 0),
    )

    net = {}
    for short, key in (("extractor", "net.extractor"),
                       ("feature_dim", "net.feature_dim"),
                       ("code_length", "net.code_length"),
                       ("projection_dim", "net.projection_dim")):
        if key in entries:
            net[short] = pop(key)
    if "net.hidden_sizes" in entries:
        net["hidden_sizes"] = _int_list(entries.pop("net.hidden_sizes"))
    if "net.conv_channels" in entries:
        net["conv_channels"] = _int_list(entries.pop("net.conv_channels"))

    loss = LossConfig(
        tau=pop("loss.tau", 0.5),
        lambda_csl=pop("loss.lambda_csl", 1.0),
        hinge_margin=pop("loss.hinge_margin", 0.5),
        rsl_denominator_mode=pop("loss.rsl_denominator", "classes-excluding-true"),
        csl_pair_mode=pop("loss.csl_pairs", "unordered"),
    )
    aug = AugmentationConfig(
        crop_padding=pop("aug.crop_padding", 0),
        flip_prob=pop("aug.flip_prob", 0.0),
        noise_sigma=pop("aug.noise_sigma", 0.02),
    )
    ema = pop("train.cfpc_ema", None)
    train = TrainConfig(
        epochs_pretrain=pop("train.epochs_pretrain", 10),
        epochs_finetune=pop("train.epochs_finetune", 20),
        batch_size=pop("train.batch_size", 32),
        learning_rate_pretrain=pop("train.lr_pretrain", 0.05),
        learning_rate_finetune=pop("train.lr_finetune", 0.01),
        optimizer=pop("train.optimizer", "sgd-momentum"),
        momentum=pop("train.momentum", 0.9),
        loss=loss,
        augmentation=aug,
        mcsm_weight=pop("train.mcsm_weight", 1.0),
        cfpc_ema_momentum=float(ema) if ema is not None else None,
    )
    attack = AttackConfig(
        epsilon=pop("attack.epsilon", 8.0 / 255.0),
        pgd_steps=pop("attack.pgd_steps", 10),
        pgd_alpha=pop("attack.pgd_alpha", 2.0 / 255.0),
        random_start=pop("attack.random_start", True),
    )

    cfg = ExperimentConfig(
        dataset=ds,
        split_ratios=_float_list(pop("split.ratios", "0.7,0.15,0.1,0.05")),
        models=_str_list(pop("models", "standard")),
        seeds=_int_list(pop("seeds", "0")),
        net=net,
        train=train,
        attack=attack,
        tfc_codebook=str(pop("tfc.codebook", "")),
        output_dir=str(pop("output", "")),
        workers=pop("workers", 1),
    )
    if entries:
        raise ConfigError(f"unknown config keys: {sorted(entries)}")
    return cfg.validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_entries(parse_config_text(fh.read()))
