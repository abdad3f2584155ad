"""Feature maps, stripes and scale-tagged feature sets.

Image features arrive as three per-branch spatial maps (global, region,
patch). Region and patch maps are cut into horizontal stripes, each stripe is
mean-pooled to one vector, and the pooled vectors are collected into a
:class:`FeatureSet` whose entries are tagged with their branch and stripe
position. Textual feature sets use the same container with the branches
read as sentence / sub-sentence / word.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BRANCHES = ("global", "region", "patch")

FEATURE_MAP_MAGIC = b"NAFM"
FEATURE_SET_MAGIC = b"NAFS"
FORMAT_VERSION = 1


class InvalidPartitionError(ValueError):
    pass


class InvalidPermutationError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """A ``height x width x channels`` grid of finite activations."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionError(f"feature map must be 3-d (h, w, c), got shape {data.shape}")
        if min(data.shape) < 1:
            raise DimensionError(f"feature map has an empty axis: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class StripeBlock:
    row_start: int
    row_end: int
    grid: np.ndarray  # rows [row_start, row_end) of the parent map

    @property
    def rows(self) -> int:
        return self.row_end - self.row_start


@dataclass(frozen=True, order=True)
class ScaleTag:
    branch: str
    stripe_index: int = 0

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}; expected one of {BRANCHES}")
        if self.stripe_index < 0:
            raise ValueError("stripe_index must be non-negative")


@dataclass(frozen=True)
class FeatureSet:
    """Ordered scale-tagged vectors for one image or one caption.

    ``vectors`` is an ``(entries, dim)`` array aligned with ``tags``.
    """

    tags: tuple
    vectors: np.ndarray
    owner_id: str = ""

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        tags = tuple(self.tags)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise DimensionError(f"feature set needs a non-empty (entries, dim) array, got {vectors.shape}")
        if len(tags) != vectors.shape[0]:
            raise DimensionError(f"{len(tags)} tags for {vectors.shape[0]} vectors")
        if len(set(tags)) != len(tags):
            raise ValueError("scale tags must be unique within a feature set")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("feature set contains non-finite values")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "tags", tags)

    def __len__(self):
        return len(self.tags)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def global_vector(self) -> np.ndarray:
        """The first ``global``-branch vector."""
        for tag, vec in zip(self.tags, self.vectors):
            if tag.branch == "global":
                return vec
        raise ValueError(f"feature set {self.owner_id!r} has no global entry")

    def select(self, branches: Iterable[str]) -> "FeatureSet":
        keep = set(branches)
        idx = [k for k, t in enumerate(self.tags) if t.branch in keep]
        if not idx:
            raise ValueError(f"no entries for branches {sorted(keep)}")
        return FeatureSet(tuple(self.tags[k] for k in idx), self.vectors[idx], self.owner_id)

    def transformed(self, weight: np.ndarray) -> "FeatureSet":
        """Apply ``x -> weight @ x`` to every entry."""
        return FeatureSet(self.tags, self.vectors @ np.asarray(weight).T, self.owner_id)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.tags == other.tags
            and self.owner_id == other.owner_id
            and self.vectors.shape == other.vectors.shape
            and bool(np.array_equal(self.vectors, other.vectors))
        )

    __hash__ = None


def make_tags(counts: Sequence[int]) -> tuple:
    """Tags for ``counts[k]`` stripes of branch ``BRANCHES[k]``."""
    return tuple(ScaleTag(b, i) for b, c in zip(BRANCHES, counts) for i in range(c))


def partition_stripes(fmap: FeatureMap, n: int) -> list[StripeBlock]:
    """Cut ``fmap`` into ``n`` horizontal stripes, top to bottom.

    When the height is not a multiple of ``n`` the top ``height % n`` stripes
    take one extra row.
    """
    h = fmap.height
    if not isinstance(n, (int, np.integer)) or n < 1 or n > h:
        raise InvalidPartitionError(f"cannot cut height {h} into {n} stripes")
    base, extra = divmod(h, int(n))
    stripes, start = [], 0
    for k in range(n):
        end = start + base + (1 if k < extra else 0)
        stripes.append(StripeBlock(start, end, fmap.data[start:end]))
        start = end
    return stripes


def shuffle_stripes(stripes: Sequence[StripeBlock], perm: Sequence[int]) -> FeatureMap:
    """Re-concatenate ``stripes`` vertically in the order given by ``perm``."""
    perm = [int(p) for p in perm]
    if len(perm) != len(stripes) or sorted(perm) != list(range(len(stripes))):
        raise InvalidPermutationError(f"{perm} is not a permutation of {len(stripes)} stripes")
    return FeatureMap(np.concatenate([stripes[p].grid for p in perm], axis=0))


def split_and_shuffle(fmap: FeatureMap, n: int, rng: np.random.Generator) -> FeatureMap:
    stripes = partition_stripes(fmap, n)
    return shuffle_stripes(stripes, rng.permutation(len(stripes)))


def pool_stripe(stripe: StripeBlock) -> np.ndarray:
    grid = np.asarray(stripe.grid)
    if grid.size == 0 or stripe.rows < 1:
        raise ValueError("cannot pool an empty stripe")
    return grid.reshape(-1, grid.shape[-1]).mean(axis=0)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-norm copy of ``v``; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def build_visual_feature_set(
    global_map: FeatureMap,
    region_map: FeatureMap,
    patch_map: FeatureMap,
    n1: int = 2,
    n2: int = 3,
    shuffle_seed: int | None = None,
    owner_id: str = "",
) -> FeatureSet:
    """Pool the three branch maps into ``1 + n1 + n2`` tagged vectors.

    With ``shuffle_seed`` the region and patch maps go through split&shuffle
    first (training-time augmentation only).
    """
    channels = {global_map.channels, region_map.channels, patch_map.channels}
    if len(channels) != 1:
        raise DimensionError(f"branch maps disagree on channel count: {sorted(channels)}")
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        region_map = split_and_shuffle(region_map, n1, rng)
        patch_map = split_and_shuffle(patch_map, n2, rng)

    vectors = [global_map.data.reshape(-1, global_map.channels).mean(axis=0)]
    vectors += [pool_stripe(s) for s in partition_stripes(region_map, n1)]
    vectors += [pool_stripe(s) for s in partition_stripes(patch_map, n2)]
    return FeatureSet(make_tags((1, n1, n2)), np.stack(vectors), owner_id)


# --- binary formats --------------------------------------------------------


def write_feature_map(path, fmap: FeatureMap) -> None:
    header = FEATURE_MAP_MAGIC + struct.pack("<HIII", FORMAT_VERSION, fmap.height, fmap.width, fmap.channels)
    Path(path).write_bytes(header + fmap.data.astype("<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, h, w, c = struct.unpack_from("<HIII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[18:]
    if len(body) != 4 * h * w * c:
        raise FormatError(f"{path}: expected {h * w * c} floats, found {len(body) // 4}")
    return FeatureMap(np.frombuffer(body, dtype="<f4").reshape(h, w, c))


def write_feature_set(path, fs: FeatureSet) -> None:
    parts = [FEATURE_SET_MAGIC, struct.pack("<HII", FORMAT_VERSION, fs.dim, len(fs))]
    for tag, vec in zip(fs.tags, fs.vectors):
        parts.append(struct.pack("<BH", BRANCHES.index(tag.branch), tag.stripe_index))
        parts.append(vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_set(path, owner_id: str = "") -> FeatureSet:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_SET_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, dim, count = struct.unpack_from("<HII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset, record = 14, 3 + 4 * dim
    if len(raw) != offset + count * record:
        raise FormatError(f"{path}: truncated or oversized feature set")
    tags, vectors = [], []
    for _ in range(count):
        branch, stripe = struct.unpack_from("<BH", raw, offset)
        if branch >= len(BRANCHES):
            raise FormatError(f"{path}: unknown branch code {branch}")
        tags.append(ScaleTag(BRANCHES[branch], stripe))
        vectors.append(np.frombuffer(raw, dtype="<f4", count=dim, offset=offset + 3))
        offset += record
    return FeatureSet(tuple(tags), np.stack(vectors), owner_id)
