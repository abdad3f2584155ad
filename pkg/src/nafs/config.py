"""Flat ``key=value`` run configuration.

Lines starting with ``#`` are comments. Unknown keys and out-of-range values
are rejected with a message naming the key. ``NAFS_SEED`` in the environment
overrides ``seed``; command-line overrides win over both.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .crossmodal import Temperatures
from .features import BRANCHES
from .objectives import AdamState, LossWeights, ObjectiveConfig
from .synthetic import SyntheticConfig

SEED_ENV = "NAFS_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset synthesis
    data_dir: str = "data"
    identity_count: int = 32
    train_identity_count: int = 64
    val_identity_count: int = 8
    images_per_identity: int = 4
    captions_per_image: int = 2
    dim: int = 32
    sub_sentences: int = 2
    words: int = 4
    noise_sigma: float = 0.1
    signal_scales: str = "global,region,patch"
    # model
    n1: int = 2
    n2: int = 3
    scales: str = "full"  # "full" or "global"
    tau_i2t: float = 20.0
    tau_t2i: float = 20.0
    tau_loss: float = 10.0
    norm_axis: str = "query"
    csal_mode: str = "softmax"
    eps: float = 1e-8
    w_cmpm: float = 1.0
    w_cmpc: float = 1.0
    w_csal: float = 0.1
    # optimisation
    lr_backbone: float = 0.00011
    lr_head: float = 0.0011
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    steps: int = 500
    split_shuffle: bool = True
    # evaluation
    eval_split: str = "test"
    rvn_l: int = 8
    rerank: bool = False
    fusion: str = "similarity"
    workers: int = 1
    chunk: int = 16
    attn_count: int = 0
    # outputs
    out_dir: str = "run"
    checkpoint: str = ""
    loss_log: str = ""
    rankings: str = ""
    report: str = ""
    attn_report: str = ""

    def __post_init__(self):
        _validate(self)

    # derived paths default to files inside out_dir
    def path(self, key: str) -> Path:
        defaults = {
            "checkpoint": "model.nafc",
            "loss_log": "loss.tsv",
            "rankings": "rankings.tsv",
            "report": "report.txt",
            "attn_report": "attention.jsonl",
        }
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / defaults[key]

    @property
    def manifest_path(self) -> Path:
        return Path(self.data_dir) / "manifest.jsonl"

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            identity_count=self.identity_count,
            train_identity_count=self.train_identity_count,
            val_identity_count=self.val_identity_count,
            images_per_identity=self.images_per_identity,
            captions_per_image=self.captions_per_image,
            dim=self.dim,
            n1=self.n1,
            n2=self.n2,
            sub_sentences=self.sub_sentences,
            words=self.words,
            noise_sigma=self.noise_sigma,
            signal_scales=tuple(_split_list(self.signal_scales)),
            seed=self.seed,
        )

    def objective(self) -> ObjectiveConfig:
        weights = LossWeights(self.w_cmpm, self.w_cmpc, 0.0 if self.scales == "global" else self.w_csal)
        return ObjectiveConfig(Temperatures(self.tau_i2t, self.tau_t2i), weights, self.eps,
                               self.tau_loss, self.csal_mode, self.norm_axis)

    def adam(self) -> AdamState:
        return AdamState(self.lr_backbone, self.lr_head, self.beta1, self.beta2)

    def model_digest(self) -> bytes:
        """SHA-256 over the keys that fix tensor shapes and scoring semantics."""
        keys = ("dim", "n1", "n2", "sub_sentences", "words", "scales", "train_identity_count")
        text = "\n".join(f"{k}={getattr(self, k)}" for k in keys)
        return hashlib.sha256(text.encode()).digest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


_POSITIVE = ("identity_count", "images_per_identity", "captions_per_image", "dim", "sub_sentences",
             "words", "n1", "n2", "batch_size", "rvn_l", "workers", "chunk")
_NON_NEGATIVE = ("train_identity_count", "val_identity_count", "steps", "attn_count",
                 "noise_sigma", "w_cmpm", "w_cmpc", "w_csal")
_STRICTLY_POSITIVE_REAL = ("tau_i2t", "tau_t2i", "tau_loss", "eps", "lr_backbone", "lr_head")
_CHOICES = {
    "scales": ("full", "global"),
    "norm_axis": ("query", "key"),
    "csal_mode": ("softmax", "raw"),
    "eval_split": ("train", "val", "test"),
    "fusion": ("similarity", "distance"),
}


def _validate(cfg: RunConfig) -> None:
    for key in _POSITIVE:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    for key in _NON_NEGATIVE:
        if not getattr(cfg, key) >= 0:
            raise ConfigError(f"{key} must be >= 0, got {getattr(cfg, key)}")
    for key in _STRICTLY_POSITIVE_REAL:
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be > 0, got {getattr(cfg, key)}")
    for key in ("beta1", "beta2"):
        if not 0 <= getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be in [0, 1), got {getattr(cfg, key)}")
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {getattr(cfg, key)!r}")
    if cfg.batch_size % 2:
        raise ConfigError(f"batch_size must be even (two images per identity), got {cfg.batch_size}")
    scales = _split_list(cfg.signal_scales)
    if not scales or set(scales) - set(BRANCHES):
        raise ConfigError(f"signal_scales must be a non-empty subset of {BRANCHES}, got {cfg.signal_scales!r}")
    if cfg.words < cfg.sub_sentences:
        raise ConfigError("words must be >= sub_sentences")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: Mapping[str, str] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from an optional file, ``NAFS_SEED`` and
    string overrides, in increasing order of precedence."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values)


def require_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
