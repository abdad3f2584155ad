"""Synthetic person-search data with a planted identity code.

Every identity draws a latent code ``c ~ N(0, I)``. Entries on the scales in
``signal_scales`` carry ``c`` plus isotropic noise; the remaining entries are
fresh standard-normal distractors plus the same noise. Images are written as
three branch maps whose stripes are constant, so pooling recovers the planted
vectors exactly up to float32 rounding. Captions are written directly as
feature sets with one global, ``sub_sentences`` sub-sentence and ``words``
word-level vectors, plus a token list whose comma spans match the
sub-sentence entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import BRANCHES, FeatureMap, FeatureSet, make_tags, write_feature_map, write_feature_set
from .locality import Span, split_subsentences

SPLITS = ("train", "val", "test")
MAP_WIDTH = 2
ROWS_PER_STRIPE = 2


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    identity_count: int = 32  # test identities
    train_identity_count: int = 64
    val_identity_count: int = 8
    images_per_identity: int = 4
    captions_per_image: int = 2
    dim: int = 32
    n1: int = 2
    n2: int = 3
    sub_sentences: int = 2
    words: int = 4
    noise_sigma: float = 0.1
    signal_scales: tuple = BRANCHES
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "signal_scales", tuple(self.signal_scales))
        counts = {
            "identity_count": self.identity_count,
            "images_per_identity": self.images_per_identity,
            "captions_per_image": self.captions_per_image,
            "dim": self.dim,
            "n1": self.n1,
            "n2": self.n2,
            "sub_sentences": self.sub_sentences,
            "words": self.words,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a count >= 1, got {value}")
        if self.train_identity_count < 0 or self.val_identity_count < 0:
            raise ValueError("train/val identity counts must be >= 0")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.signal_scales:
            raise ValueError("signal_scales must name at least one scale")
        unknown = set(self.signal_scales) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown scales in signal_scales: {sorted(unknown)}")
        if self.words < self.sub_sentences:
            raise ValueError("need at least one word per sub-sentence")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    person_id: str
    split: str
    features: dict  # branch -> feature-map path


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    image_id: str
    person_id: str
    split: str
    path: str  # feature-set file
    tokens: tuple
    spans: tuple  # Span per sub-sentence


@dataclass
class DatasetManifest:
    images: list = field(default_factory=list)
    captions: list = field(default_factory=list)
    root: Path = Path(".")

    def validate(self) -> None:
        image_ids = [r.image_id for r in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ManifestError("duplicate image ids")
        caption_ids = [r.caption_id for r in self.captions]
        if len(set(caption_ids)) != len(caption_ids):
            raise ManifestError("duplicate caption ids")
        owner = {r.image_id: r for r in self.images}
        split_of = {}
        for r in self.images:
            if r.split not in SPLITS:
                raise ManifestError(f"image {r.image_id}: unknown split {r.split!r}")
            if split_of.setdefault(r.person_id, r.split) != r.split:
                raise ManifestError(f"person {r.person_id} appears in several splits")
        for c in self.captions:
            img = owner.get(c.image_id)
            if img is None:
                raise ManifestError(f"caption {c.caption_id} references unknown image {c.image_id}")
            if img.person_id != c.person_id or img.split != c.split:
                raise ManifestError(f"caption {c.caption_id} disagrees with image {c.image_id}")
            for s in c.spans:
                if s.end > len(c.tokens):
                    raise ManifestError(f"caption {c.caption_id}: span beyond token list")

    def split(self, name: str):
        return [r for r in self.images if r.split == name], [c for c in self.captions if c.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def _image_line(r: ImageRecord) -> str:
    return json.dumps({"kind": "image", "image_id": r.image_id, "person_id": r.person_id,
                       "split": r.split, "features": r.features}, sort_keys=True)


def _caption_line(c: CaptionRecord) -> str:
    return json.dumps({"kind": "caption", "caption_id": c.caption_id, "image_id": c.image_id,
                       "person_id": c.person_id, "split": c.split, "path": c.path,
                       "tokens": list(c.tokens), "spans": [[s.start, s.end] for s in c.spans]},
                      sort_keys=True)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [_image_line(r) for r in manifest.images] + [_caption_line(c) for c in manifest.captions]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if rec["kind"] == "image":
                manifest.images.append(ImageRecord(rec["image_id"], rec["person_id"], rec["split"],
                                                   dict(rec["features"])))
            elif rec["kind"] == "caption":
                manifest.captions.append(CaptionRecord(
                    rec["caption_id"], rec["image_id"], rec["person_id"], rec["split"], rec["path"],
                    tuple(rec["tokens"]), tuple(Span(a, b) for a, b in rec["spans"])))
            else:
                raise ManifestError(f"unknown record kind {rec['kind']!r}")
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
    manifest.validate()
    return manifest


def _tokens(words: int, sub_sentences: int) -> tuple:
    # Words are dealt as evenly as possible across comma-separated groups.
    sizes = [words // sub_sentences + (1 if k < words % sub_sentences else 0) for k in range(sub_sentences)]
    tokens, w = [], 0
    for k, size in enumerate(sizes):
        if k:
            tokens.append(",")
        tokens.extend(f"w{w + i}" for i in range(size))
        w += size
    return tuple(tokens)


def _stripe_map(vectors: np.ndarray) -> FeatureMap:
    rows = np.repeat(vectors, ROWS_PER_STRIPE, axis=0)
    return FeatureMap(np.repeat(rows[:, None, :], MAP_WIDTH, axis=1))


def _entries(code, counts, cfg: SyntheticConfig, rng) -> np.ndarray:
    out = []
    for branch, count in zip(BRANCHES, counts):
        for _ in range(count):
            base = code if branch in cfg.signal_scales else rng.standard_normal(cfg.dim)
            out.append(base + cfg.noise_sigma * rng.standard_normal(cfg.dim))
    return np.stack(out)


def gen_synthetic(cfg: SyntheticConfig, out_dir) -> Path:
    """Write feature files and ``manifest.jsonl`` under ``out_dir``; returns
    the manifest path. Identical configs produce byte-identical files."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "captions").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    manifest = DatasetManifest(root=out)
    sizes = {"train": cfg.train_identity_count, "val": cfg.val_identity_count, "test": cfg.identity_count}
    visual_counts = (1, cfg.n1, cfg.n2)
    text_counts = (1, cfg.sub_sentences, cfg.words)
    text_tags = make_tags(text_counts)
    pid = 0
    for split in SPLITS:
        for _ in range(sizes[split]):
            person = f"p{pid:05d}"
            pid += 1
            code = rng.standard_normal(cfg.dim)
            for i in range(cfg.images_per_identity):
                image_id = f"{person}_i{i}"
                vecs = _entries(code, visual_counts, cfg, rng)
                parts = (vecs[:1], vecs[1 : 1 + cfg.n1], vecs[1 + cfg.n1 :])
                feats = {}
                for branch, block in zip(BRANCHES, parts):
                    rel = f"images/{image_id}.{branch}.nafm"
                    write_feature_map(out / rel, _stripe_map(block))
                    feats[branch] = rel
                manifest.images.append(ImageRecord(image_id, person, split, feats))
                for k in range(cfg.captions_per_image):
                    caption_id = f"{image_id}_c{k}"
                    rel = f"captions/{caption_id}.nafs"
                    write_feature_set(out / rel, FeatureSet(text_tags, _entries(code, text_counts, cfg, rng)))
                    tokens = _tokens(cfg.words, cfg.sub_sentences)
                    manifest.captions.append(CaptionRecord(
                        caption_id, image_id, person, split, rel, tokens, tuple(split_subsentences(tokens))))
    manifest.validate()
    path = out / "manifest.jsonl"
    write_manifest(path, manifest)
    return path
