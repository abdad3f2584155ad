"""Gallery ranking, Top-K evaluation and re-ranking by visual neighbours.

Ties are always broken by ascending image id so rankings are reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .crossmodal import ProjectionParams, Temperatures, score_matrix, stack_sets
from .features import FeatureSet, l2_normalize


class InvalidGalleryError(ValueError):
    pass


class InconsistentIndexError(KeyError):
    pass


@dataclass(frozen=True)
class GalleryIndex:
    image_ids: tuple
    person_ids: tuple
    sets: tuple  # FeatureSet per image
    globals: np.ndarray  # (N, D) vectors used for neighbour search

    def __post_init__(self):
        n = len(self.image_ids)
        if n == 0:
            raise InvalidGalleryError("gallery is empty")
        if len(set(self.image_ids)) != n:
            raise InvalidGalleryError("gallery image ids must be unique")
        if not (len(self.person_ids) == len(self.sets) == n == len(self.globals)):
            raise InvalidGalleryError("gallery fields have different lengths")
        if np.ndim(self.globals) != 2:
            raise InvalidGalleryError("global vectors must form an (N, D) array")

    @classmethod
    def build(cls, image_ids, person_ids, sets: Sequence[FeatureSet], globals_=None) -> "GalleryIndex":
        if len(sets) == 0:
            raise InvalidGalleryError("gallery is empty")
        g = np.stack([fs.global_vector() for fs in sets]) if globals_ is None else np.asarray(globals_)
        return cls(tuple(image_ids), tuple(person_ids), tuple(sets), g)

    def __len__(self):
        return len(self.image_ids)

    def stacked(self) -> np.ndarray:
        return stack_sets(self.sets)


@dataclass(frozen=True)
class RankedList:
    query_id: str
    image_ids: tuple
    scores: tuple

    def __len__(self):
        return len(self.image_ids)

    def top(self, k: int) -> tuple:
        return self.image_ids[:k]


@dataclass(frozen=True)
class NeighborSet:
    anchor_id: str
    members: frozenset


@dataclass(frozen=True)
class EvalReport:
    accuracy: dict  # K -> percentage
    query_count: int

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'K':>4}  {'accuracy':>9}")
        for k in sorted(self.accuracy):
            lines.append(f"{k:>4}  {self.accuracy[k]:>9.4f}")
        lines.append(f"queries {self.query_count}")
        return "\n".join(lines) + "\n"


def sort_ranking(query_id: str, image_ids: Sequence[str], scores) -> RankedList:
    order = sorted(range(len(image_ids)), key=lambda i: (-float(scores[i]), image_ids[i]))
    return RankedList(query_id, tuple(image_ids[i] for i in order), tuple(float(scores[i]) for i in order))


def rank_gallery(query_text: FeatureSet, gallery: GalleryIndex, params: ProjectionParams,
                 temps: Temperatures = Temperatures(), norm_axis: str = "query") -> RankedList:
    """Rank gallery images by their image-to-text score against one caption."""
    if len(gallery) == 0:
        raise InvalidGalleryError("gallery is empty")
    scores = score_matrix(gallery.stacked(), query_text.vectors[None], params, temps, norm_axis)[:, 0]
    return sort_ranking(query_text.owner_id, gallery.image_ids, scores)


def rank_all(queries: Sequence[FeatureSet], gallery: GalleryIndex, params: ProjectionParams,
             temps: Temperatures = Temperatures(), norm_axis: str = "query",
             workers: int = 1, chunk: int = 16) -> list[RankedList]:
    """Rank every query. Work is split into fixed chunks of ``chunk`` queries;
    ``workers`` only changes scheduling, never the arithmetic."""
    images = gallery.stacked()
    texts = stack_sets(queries)
    starts = list(range(0, len(queries), chunk))

    def run(start):
        return score_matrix(images, texts[start : start + chunk], params, temps, norm_axis, chunk=chunk)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, starts))
    else:
        blocks = [run(s) for s in starts]
    scores = np.concatenate(blocks, axis=1)
    return [sort_ranking(q.owner_id, gallery.image_ids, scores[:, j]) for j, q in enumerate(queries)]


def rank_by_cosine(query_vectors, query_ids, gallery: GalleryIndex) -> list[RankedList]:
    """Rank by cosine between query vectors and gallery global vectors."""
    sims = l2_normalize(np.asarray(query_vectors)) @ l2_normalize(gallery.globals).T
    return [sort_ranking(qid, gallery.image_ids, sims[j]) for j, qid in enumerate(query_ids)]


def topk_accuracy(rankings: Sequence[RankedList], truth: Mapping[str, object],
                  gallery_pids: Mapping[str, object], k: int) -> float:
    """Percentage of queries whose top ``k`` holds any image of the true person.
    ``k`` beyond the gallery size is clamped."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not rankings:
        return 0.0
    hits = sum(
        any(gallery_pids[i] == truth[r.query_id] for i in r.top(k))
        for r in rankings
    )
    return 100.0 * hits / len(rankings)


def evaluate_rankings(rankings, truth, gallery_pids, ks=(1, 5, 10)) -> EvalReport:
    return EvalReport({k: topk_accuracy(rankings, truth, gallery_pids, k) for k in ks}, len(rankings))


def _top_l(sims: np.ndarray, ids: Sequence[str], l: int, exclude: int | None = None) -> frozenset:
    order = sorted((i for i in range(len(ids)) if i != exclude), key=lambda i: (-sims[i], ids[i]))
    return frozenset(ids[i] for i in order[:l])


def visual_knn(gallery: GalleryIndex, l: int) -> dict:
    """The ``l`` most cosine-similar other images for every gallery image."""
    n = len(gallery)
    if not 1 <= l < n:
        raise ValueError(f"l must be in [1, {n - 1}] for a gallery of {n}, got {l}")
    g = l2_normalize(gallery.globals)
    sims = g @ g.T
    return {
        iid: NeighborSet(iid, _top_l(sims[a], gallery.image_ids, l, exclude=a))
        for a, iid in enumerate(gallery.image_ids)
    }


def query_knn(query_global, gallery: GalleryIndex, l: int, query_id: str = "") -> NeighborSet:
    """The ``l`` gallery images whose global vectors are closest to a caption's."""
    n = len(gallery)
    if not 1 <= l <= n:
        raise ValueError(f"l must be in [1, {n}] for a gallery of {n}, got {l}")
    if isinstance(query_global, FeatureSet):
        query_id = query_id or query_global.owner_id
        query_global = query_global.global_vector()
    sims = l2_normalize(gallery.globals) @ l2_normalize(np.asarray(query_global))
    return NeighborSet(query_id, _top_l(sims, gallery.image_ids, l))


def jaccard_distance(a, b) -> float:
    a = a.members if isinstance(a, NeighborSet) else frozenset(a)
    b = b.members if isinstance(b, NeighborSet) else frozenset(b)
    if not a or not b:
        raise ValueError("Jaccard distance needs non-empty sets")
    return 1.0 - len(a & b) / len(a | b)


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def rerank_rvn(initial: RankedList, query_neighbors: NeighborSet, image_neighbors: Mapping[str, NeighborSet],
               fusion: str = "similarity") -> RankedList:
    """Fuse the min-max normalized score with neighbour-set agreement.

    ``fusion="similarity"`` averages with ``1 - D_J``; ``"distance"`` averages
    with ``D_J`` itself.
    """
    missing = [i for i in initial.image_ids if i not in image_neighbors]
    if missing:
        raise InconsistentIndexError(f"no neighbour set for {missing[:5]}")
    if fusion not in ("similarity", "distance"):
        raise ValueError(f"unknown fusion {fusion!r}")
    dj = np.array([jaccard_distance(image_neighbors[i], query_neighbors) for i in initial.image_ids])
    agreement = 1.0 - dj if fusion == "similarity" else dj
    combined = 0.5 * _minmax(np.asarray(initial.scores)) + 0.5 * agreement
    return sort_ranking(initial.query_id, initial.image_ids, combined)


def write_rankings(path, rankings: Sequence[RankedList], limit: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            for rank, (iid, score) in enumerate(zip(r.image_ids, r.scores), start=1):
                if limit is not None and rank > limit:
                    break
                fh.write(f"{r.query_id}\t{rank}\t{iid}\t{score:.9g}\n")


def read_rankings(path) -> list[RankedList]:
    grouped: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            qid, rank, iid, score = line.rstrip("\n").split("\t")
            grouped.setdefault(qid, []).append((int(rank), iid, float(score)))
    out = []
    for qid, rows in grouped.items():
        rows.sort()
        out.append(RankedList(qid, tuple(r[1] for r in rows), tuple(r[2] for r in rows)))
    return out
