"""Contextual non-local attention between visual and textual feature sets.

Image-to-text direction, for an image with ``m`` entries and a caption with
``n`` entries::

    s[a, b]  = max(cos(iq_a, tk_b), 0)
    s_hat    = s / column sums over the query axis
    s_tilde  = max(n * s_hat[a, b] - sum_c s_hat[a, c], 0) * s_hat[a, b]
    alpha    = softmax_b(tau * s_tilde)
    r_a      = sum_b alpha[a, b] tv_b
    S(I, T)  = mean_a cos(iv_a, r_a)

Text-to-image swaps the roles: textual keys act as queries over visual
queries, and attended visual values are compared to textual values.

Every function here runs on :mod:`nafs.autodiff` tensors so that the same
code path is used for scoring and for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import json

import numpy as np

from . import autodiff as ad
from .features import FeatureSet, ScaleTag, DimensionError

# Guard added to the denominators of the normalized similarity.
NORM_EPS = 1e-8

PROJECTION_NAMES = ("w_iq", "w_iv", "w_tk", "w_tv")


class InvalidBatchError(ValueError):
    pass


@dataclass
class ProjectionParams:
    w_iq: np.ndarray
    w_iv: np.ndarray
    w_tk: np.ndarray
    w_tv: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(getattr(self, k)) for k in PROJECTION_NAMES}
        if len(shapes) != 1:
            raise DimensionError(f"projection shapes differ: {shapes}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise DimensionError(f"projections must be square D x D, got {shape}")
        for k in PROJECTION_NAMES:
            if not np.all(np.isfinite(getattr(self, k))):
                raise ValueError(f"{k} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.w_iq.shape[0]

    @classmethod
    def init(cls, dim: int, seed: int) -> "ProjectionParams":
        """Uniform in [-1/sqrt(D), 1/sqrt(D)], reproducible from ``seed``."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        return cls(*(rng.uniform(-bound, bound, size=(dim, dim)) for _ in PROJECTION_NAMES))

    @classmethod
    def identity(cls, dim: int) -> "ProjectionParams":
        return cls(*(np.eye(dim) for _ in PROJECTION_NAMES))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PROJECTION_NAMES}


@dataclass(frozen=True)
class Temperatures:
    tau_i2t: float = 20.0
    tau_t2i: float = 20.0

    def __post_init__(self):
        if not (self.tau_i2t > 0 and self.tau_t2i > 0):
            raise ValueError(f"temperatures must be positive, got {self.tau_i2t}, {self.tau_t2i}")


@dataclass
class AttentionState:
    s: np.ndarray
    s_hat: np.ndarray
    s_tilde: np.ndarray
    alpha: np.ndarray
    direction: str  # "i2t" or "t2i"
    row_tags: tuple = field(default_factory=tuple)
    col_tags: tuple = field(default_factory=tuple)


# --- graph-level building blocks -----------------------------------------


def _check_axis(norm_axis: str) -> None:
    if norm_axis not in ("query", "key"):
        raise ValueError(f"norm_axis must be 'query' or 'key', got {norm_axis!r}")


def contextual_scores(q, own_v, k, other_v, tau: float, norm_axis: str = "query", keep=False):
    """Batched one-direction scores.

    ``q``/``own_v`` are ``(Bq, m, D)``, ``k``/``other_v`` are ``(Bk, n, D)``.
    Returns a ``(Bq, Bk)`` tensor, plus a dict of intermediates if ``keep``.
    """
    _check_axis(norm_axis)
    n = k.shape[1]
    s = ad.relu(ad.einsum("amd,bnd->abmn", ad.l2_normalize(q), ad.l2_normalize(k)))
    axis = 2 if norm_axis == "query" else 3
    s_hat = s / (ad.tsum(s, axis=axis, keepdims=True) + NORM_EPS)
    s_tilde = ad.relu(s_hat * float(n) - ad.tsum(s_hat, axis=3, keepdims=True)) * s_hat
    alpha = ad.softmax(s_tilde * float(tau), axis=3)
    r = ad.einsum("abmn,bnd->abmd", alpha, other_v)
    rel = ad.einsum("amd,abmd->abm", ad.l2_normalize(own_v), ad.l2_normalize(r))
    score = ad.mean(rel, axis=2)
    if keep:
        return score, {"s": s, "s_hat": s_hat, "s_tilde": s_tilde, "alpha": alpha}
    return score


def project_batch(x, weight):
    """``(B, k, D)`` entries mapped through ``weight`` (row vectors times W^T)."""
    return ad.einsum("bkd,ed->bke", x, weight)


def batch_scores(images, texts, proj: dict, temps: Temperatures, norm_axis: str = "query"):
    """Both score matrices, each ``(B_images, B_texts)``, as tensors.

    ``images`` is ``(Bi, m, D)``, ``texts`` is ``(Bt, n, D)``; ``proj`` maps
    projection names to weights (arrays or tensors).
    """
    iq = project_batch(images, proj["w_iq"])
    iv = project_batch(images, proj["w_iv"])
    tk = project_batch(texts, proj["w_tk"])
    tv = project_batch(texts, proj["w_tv"])
    i2t = contextual_scores(iq, iv, tk, tv, temps.tau_i2t, norm_axis)
    t2i = contextual_scores(tk, tv, iq, iv, temps.tau_t2i, norm_axis)
    return i2t, ad.einsum("ba->ab", t2i)


# --- array-level operations -------------------------------------------------


def _vectors(x) -> np.ndarray:
    if isinstance(x, FeatureSet):
        return x.vectors
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def project(features, weight) -> np.ndarray:
    """``weight @ x`` for every entry, order preserved."""
    x = _vectors(features)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {weight.shape} cannot map dim {x.shape[1]}")
    return x @ weight.T


def clamped_cosine_matrix(queries, keys) -> np.ndarray:
    q, k = _vectors(queries), _vectors(keys)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    s = ad.relu(ad.einsum("md,nd->mn", ad.l2_normalize(q), ad.l2_normalize(k)))
    return s.value


def normalize_over_queries(s, norm_axis: str = "query") -> np.ndarray:
    """Divide each column (or, with ``norm_axis="key"``, each row) by its sum."""
    _check_axis(norm_axis)
    s = np.asarray(s, dtype=np.float64)
    axis = 0 if norm_axis == "query" else 1
    return s / (s.sum(axis=axis, keepdims=True) + NORM_EPS)


def focal_filter(s_hat) -> np.ndarray:
    s_hat = np.asarray(s_hat, dtype=np.float64)
    n = s_hat.shape[1]
    return np.maximum(n * s_hat - s_hat.sum(axis=1, keepdims=True), 0.0) * s_hat


def focal_softmax(s_tilde, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ad.softmax(ad.Tensor(s_tilde) * float(tau), axis=1).value


def attention_pool(s_tilde, values, tau: float) -> np.ndarray:
    """Rows of ``softmax(tau * s_tilde) @ values``."""
    v = _vectors(values)
    if v.shape[0] != np.shape(s_tilde)[1]:
        raise DimensionError(f"{v.shape[0]} values for {np.shape(s_tilde)[1]} columns")
    return focal_softmax(s_tilde, tau) @ v


def _pair(query_set, key_set, wq, wqv, wk, wkv, tau, direction, norm_axis):
    if query_set.dim != key_set.dim or query_set.dim != np.shape(wq)[1]:
        raise DimensionError(f"dims differ: {query_set.dim}, {key_set.dim}, weights {np.shape(wq)}")
    q = project(query_set, wq)[None]
    qv = project(query_set, wqv)[None]
    k = project(key_set, wk)[None]
    kv = project(key_set, wkv)[None]
    score, parts = contextual_scores(q, qv, k, kv, tau, norm_axis, keep=True)
    state = AttentionState(
        *(parts[name].value[0, 0] for name in ("s", "s_hat", "s_tilde", "alpha")),
        direction=direction,
        row_tags=query_set.tags,
        col_tags=key_set.tags,
    )
    return float(score.value[0, 0]), state


def pair_similarity_i2t(image: FeatureSet, text: FeatureSet, params: ProjectionParams,
                        temps: Temperatures = Temperatures(), norm_axis: str = "query"):
    """``S(I, T)`` and the attention matrices (rows = image entries)."""
    return _pair(image, text, params.w_iq, params.w_iv, params.w_tk, params.w_tv,
                 temps.tau_i2t, "i2t", norm_axis)


def pair_similarity_t2i(text: FeatureSet, image: FeatureSet, params: ProjectionParams,
                        temps: Temperatures = Temperatures(), norm_axis: str = "query"):
    """``S'(T, I)`` and the attention matrices (rows = text entries)."""
    return _pair(text, image, params.w_tk, params.w_tv, params.w_iq, params.w_iv,
                 temps.tau_t2i, "t2i", norm_axis)


def stack_sets(sets: Sequence[FeatureSet]) -> np.ndarray:
    shapes = {fs.vectors.shape for fs in sets}
    if len(shapes) != 1:
        raise DimensionError(f"cannot stack feature sets of shapes {sorted(shapes)}")
    return np.stack([fs.vectors for fs in sets])


def batch_similarity(images: Sequence[FeatureSet], texts: Sequence[FeatureSet], params: ProjectionParams,
                     temps: Temperatures = Temperatures(), norm_axis: str = "query"):
    """Score matrices ``(i2t, t2i)``; entry ``[i, j]`` is image i vs text j."""
    if len(images) == 0 or len(images) != len(texts):
        raise InvalidBatchError(f"need equal non-empty batches, got {len(images)} images, {len(texts)} texts")
    try:
        img, txt = stack_sets(images), stack_sets(texts)
    except DimensionError:
        return _batch_by_pairs(images, texts, params, temps, norm_axis)
    i2t, t2i = batch_scores(img, txt, params.as_dict(), temps, norm_axis)
    return i2t.value, t2i.value


def _batch_by_pairs(images, texts, params, temps, norm_axis):
    i2t = np.empty((len(images), len(texts)))
    t2i = np.empty_like(i2t)
    for i, im in enumerate(images):
        for j, tx in enumerate(texts):
            i2t[i, j] = pair_similarity_i2t(im, tx, params, temps, norm_axis)[0]
            t2i[i, j] = pair_similarity_t2i(tx, im, params, temps, norm_axis)[0]
    return i2t, t2i


def score_matrix(images: np.ndarray, texts: np.ndarray, params: ProjectionParams,
                 temps: Temperatures = Temperatures(), norm_axis: str = "query",
                 direction: str = "i2t", chunk: int = 16) -> np.ndarray:
    """``(Bi, Bt)`` scores over stacked arrays, computed in fixed text chunks.

    Chunk boundaries depend only on ``chunk``, so results do not depend on
    how chunks are later scheduled.
    """
    proj = params.as_dict()
    iq = project_batch(images, proj["w_iq"])
    iv = project_batch(images, proj["w_iv"])
    out = np.empty((images.shape[0], texts.shape[0]))
    for start in range(0, texts.shape[0], chunk):
        sl = slice(start, start + chunk)
        tk = project_batch(texts[sl], proj["w_tk"])
        tv = project_batch(texts[sl], proj["w_tv"])
        if direction == "i2t":
            out[:, sl] = contextual_scores(iq, iv, tk, tv, temps.tau_i2t, norm_axis).value
        else:
            out[:, sl] = contextual_scores(tk, tv, iq, iv, temps.tau_t2i, norm_axis).value.T
    return out


# --- attention report -------------------------------------------------------

_MATRICES = ("s", "s_hat", "s_tilde", "alpha")


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def export_attention(state: AttentionState, image_id: str, caption_id: str) -> dict:
    """A report record; matrices are stored as float32."""
    return {
        "image_id": image_id,
        "caption_id": caption_id,
        "direction": state.direction,
        "shape": list(state.s.shape),
        "row_tags": [[t.branch, t.stripe_index] for t in state.row_tags],
        "col_tags": [[t.branch, t.stripe_index] for t in state.col_tags],
        **{name: np.asarray(getattr(state, name), dtype=np.float32) for name in _MATRICES},
    }


def attention_record_to_line(record: dict) -> str:
    meta = {k: v for k, v in record.items() if k not in _MATRICES}
    parts = [json.dumps(meta, sort_keys=True)[:-1]]
    for name in _MATRICES:
        data = ",".join(_fmt(x) for x in np.ravel(record[name]))
        parts.append(f', "{name}": [{data}]')
    return "".join(parts) + "}"


def attention_record_from_line(line: str) -> dict:
    raw = json.loads(line)
    shape = tuple(raw["shape"])
    record = {k: v for k, v in raw.items() if k not in _MATRICES}
    for name in _MATRICES:
        record[name] = np.array(raw[name], dtype=np.float64).astype(np.float32).reshape(shape)
    return record


def record_to_state(record: dict) -> AttentionState:
    return AttentionState(
        *(record[name] for name in _MATRICES),
        direction=record["direction"],
        row_tags=tuple(ScaleTag(b, i) for b, i in record["row_tags"]),
        col_tags=tuple(ScaleTag(b, i) for b, i in record["col_tags"]),
    )


def write_attention_report(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(attention_record_to_line(rec) + "\n")


def read_attention_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [attention_record_from_line(line) for line in fh if line.strip()]
