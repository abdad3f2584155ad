"""Dataset loading, the training loop and evaluation runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (adam_from_tensors, check_compatible, read_checkpoint, write_checkpoint)
from .config import RunConfig, require_file
from .crossmodal import export_attention, pair_similarity_i2t, pair_similarity_t2i, write_attention_report
from .features import build_visual_feature_set, read_feature_map, read_feature_set
from .gradcheck import GradcheckReport, run_gradcheck
from .objectives import Batch, LossWeights, NumericError, ObjectiveConfig, adam_step, gradients, init_params, projections
from .retrieval import (EvalReport, GalleryIndex, RankedList, evaluate_rankings, query_knn, rank_all,
                        rank_by_cosine, rerank_rvn, visual_knn, write_rankings)
from .synthetic import DatasetManifest, read_manifest

GLOBAL_ONLY = ("global",)


@dataclass
class SplitData:
    image_ids: list
    image_pids: list
    maps: list  # (global, region, patch) FeatureMaps per image
    caption_ids: list
    caption_pids: list
    caption_image: list  # index into images
    captions: list  # FeatureSet per caption

    def visual_set(self, index: int, n1: int, n2: int, shuffle_seed=None):
        g, r, p = self.maps[index]
        return build_visual_feature_set(g, r, p, n1, n2, shuffle_seed, owner_id=self.image_ids[index])


def load_split(manifest: DatasetManifest, split: str) -> SplitData:
    images, captions = manifest.split(split)
    if not images:
        raise ValueError(f"split {split!r} has no images")
    index = {r.image_id: k for k, r in enumerate(images)}
    maps = [tuple(read_feature_map(manifest.resolve(r.features[b])) for b in ("global", "region", "patch"))
            for r in images]
    sets = []
    for c in captions:
        fs = read_feature_set(manifest.resolve(c.path), owner_id=c.caption_id)
        regions = sum(1 for t in fs.tags if t.branch == "region")
        if regions != len(c.spans):
            raise ValueError(f"caption {c.caption_id}: {len(c.spans)} spans but {regions} sub-sentence vectors")
        sets.append(fs)
    return SplitData(
        [r.image_id for r in images], [r.person_id for r in images], maps,
        [c.caption_id for c in captions], [c.person_id for c in captions],
        [index[c.image_id] for c in captions], sets,
    )


class IdentitySampler:
    """Each batch holds ``B/2`` distinct identities, two images of each and
    one caption per image, so every image has its own caption in-batch."""

    def __init__(self, data: SplitData, batch_size: int, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 2])
        self.persons = sorted(set(data.image_pids))
        self.images_of = {p: [k for k, q in enumerate(data.image_pids) if q == p] for p in self.persons}
        self.captions_of = {}
        for j, k in enumerate(data.caption_image):
            self.captions_of.setdefault(k, []).append(j)
        if len(self.persons) < batch_size // 2:
            raise ValueError(f"batch of {batch_size} needs {batch_size // 2} identities, have {len(self.persons)}")
        for k in range(len(data.image_ids)):
            if k not in self.captions_of:
                raise ValueError(f"image {data.image_ids[k]} has no caption")

    def sample(self):
        """Returns (image indices, caption indices, shuffle seeds)."""
        chosen = self.rng.choice(len(self.persons), self.batch_size // 2, replace=False)
        imgs, caps = [], []
        for p in chosen:
            pool = self.images_of[self.persons[p]]
            picks = self.rng.choice(len(pool), 2, replace=len(pool) < 2)
            for i in picks:
                k = pool[i]
                imgs.append(k)
                options = self.captions_of[k]
                caps.append(options[self.rng.integers(len(options))])
        seeds = self.rng.integers(0, 2**63 - 1, size=len(imgs))
        return imgs, caps, seeds


def _restrict(fs, scales: str):
    return fs.select(GLOBAL_ONLY) if scales == "global" else fs


@dataclass
class TrainResult:
    params: dict
    adam: object
    losses: list = field(default_factory=list)  # (step, total, parts)


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    return read_manifest(require_file(cfg.manifest_path, "manifest"))


def train(cfg: RunConfig, write: bool = True) -> TrainResult:
    """Run ``cfg.steps`` Adam updates; writes the checkpoint and loss log."""
    data = load_split(load_manifest(cfg), "train")
    classes = {p: k for k, p in enumerate(sorted(set(data.image_pids)))}
    params = init_params(cfg.dim, len(classes), cfg.seed)
    state = cfg.adam()
    obj = cfg.objective()
    sampler = IdentitySampler(data, cfg.batch_size, cfg.seed)
    result = TrainResult(params, state)
    for step in range(cfg.steps):
        imgs, caps, seeds = sampler.sample()
        images = [_restrict(data.visual_set(k, cfg.n1, cfg.n2, int(s) if cfg.split_shuffle else None), cfg.scales)
                  for k, s in zip(imgs, seeds)]
        texts = [_restrict(data.captions[j], cfg.scales) for j in caps]
        batch = Batch(
            np.stack([fs.vectors for fs in images]), np.stack([fs.vectors for fs in texts]),
            [classes[data.image_pids[k]] for k in imgs], [classes[data.caption_pids[j]] for j in caps],
        )
        try:
            loss, grads = gradients(batch, params, obj)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}", tensor=exc.tensor, step=step) from exc
        result.losses.append((step, loss))
        params, state = adam_step(params, grads, state)
    result.params, result.adam = params, state
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_checkpoint(cfg.path("checkpoint"), params, cfg.model_digest(), state)
        write_loss_log(cfg.path("loss_log"), result.losses)
    return result


def write_loss_log(path, losses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for step, loss in losses:
            fh.write(f"{step}\t{loss:.9g}\n")


def read_loss_log(path) -> list:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [(int(a), float(b)) for a, b in (r.split("\t") for r in rows if r)]


def load_params(cfg: RunConfig, path=None):
    params, digest, adam_tensors = read_checkpoint(require_file(Path(path or cfg.path("checkpoint")), "checkpoint"))
    check_compatible(params, digest, cfg.model_digest(), cfg.dim)
    return params, adam_from_tensors(adam_tensors, cfg.adam())


@dataclass
class Evaluation:
    report: EvalReport
    rankings: list
    reranked: list | None = None
    rerank_report: EvalReport | None = None
    attention: list = field(default_factory=list)

    def to_text(self) -> str:
        text = self.report.to_text("initial ranking")
        if self.rerank_report is not None:
            text += "\n" + self.rerank_report.to_text("re-ranked by visual neighbours")
        return text


@dataclass
class EvalContext:
    """An encoded gallery and query set ready for ranking."""

    cfg: RunConfig
    params: dict
    gallery: GalleryIndex
    queries: list
    truth: dict
    gallery_pids: dict

    def initial(self) -> list[RankedList]:
        cfg = self.cfg
        if cfg.scales == "global":
            globals_ = np.stack([q.global_vector() for q in self.queries])
            return rank_by_cosine(globals_, [q.owner_id for q in self.queries], self.gallery)
        return rank_all(self.queries, self.gallery, projections(self.params), cfg.objective().temps,
                        cfg.norm_axis, cfg.workers, cfg.chunk)

    def rerank(self, rankings: list[RankedList]) -> list[RankedList]:
        l = self.cfg.rvn_l
        neighbours = visual_knn(self.gallery, min(l, len(self.gallery) - 1))
        by_id = {q.owner_id: q for q in self.queries}
        return [
            rerank_rvn(r, query_knn(by_id[r.query_id], self.gallery, min(l, len(self.gallery))),
                       neighbours, self.cfg.fusion)
            for r in rankings
        ]


def eval_context(cfg: RunConfig, params: dict, split: str | None = None) -> EvalContext:
    data = load_split(load_manifest(cfg), split or cfg.eval_split)
    enc_img, enc_txt = params["enc_img"], params["enc_txt"]
    sets = [_restrict(data.visual_set(k, cfg.n1, cfg.n2), cfg.scales).transformed(enc_img)
            for k in range(len(data.image_ids))]
    gallery = GalleryIndex.build(data.image_ids, data.image_pids, sets)
    queries = [_restrict(fs, cfg.scales).transformed(enc_txt) for fs in data.captions]
    return EvalContext(cfg, params, gallery, queries,
                       dict(zip(data.caption_ids, data.caption_pids)),
                       dict(zip(data.image_ids, data.image_pids)))


def attention_records(ctx: EvalContext, rankings: list[RankedList], count: int) -> list[dict]:
    """i2t and t2i attention for each of the first ``count`` queries against
    its top-ranked image."""
    proj = projections(ctx.params)
    temps = ctx.cfg.objective().temps
    sets = dict(zip(ctx.gallery.image_ids, ctx.gallery.sets))
    by_id = {q.owner_id: q for q in ctx.queries}
    records = []
    for r in rankings[:count]:
        image, text = sets[r.image_ids[0]], by_id[r.query_id]
        _, s_i2t = pair_similarity_i2t(image, text, proj, temps, ctx.cfg.norm_axis)
        _, s_t2i = pair_similarity_t2i(text, image, proj, temps, ctx.cfg.norm_axis)
        records.append(export_attention(s_i2t, image.owner_id, text.owner_id))
        records.append(export_attention(s_t2i, image.owner_id, text.owner_id))
    return records


def evaluate(cfg: RunConfig, params: dict | None = None, write: bool = True) -> Evaluation:
    if params is None:
        params, _ = load_params(cfg)
    ctx = eval_context(cfg, params)
    rankings = ctx.initial()
    ev = Evaluation(evaluate_rankings(rankings, ctx.truth, ctx.gallery_pids), rankings)
    if cfg.rerank:
        ev.reranked = ctx.rerank(rankings)
        ev.rerank_report = evaluate_rankings(ev.reranked, ctx.truth, ctx.gallery_pids)
    if cfg.attn_count and cfg.scales == "full":
        ev.attention = attention_records(ctx, rankings, cfg.attn_count)
    if write:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        Path(cfg.path("report")).write_text(ev.to_text(), encoding="utf-8")
        write_rankings(cfg.path("rankings"), ev.reranked if ev.reranked is not None else rankings)
        if ev.attention:
            write_attention_report(cfg.path("attn_report"), ev.attention)
    return ev


def gradcheck(cfg: RunConfig | None = None, fault: bool = False, zero_weights: bool = False,
              seeds=range(20)) -> GradcheckReport:
    """The B=4, m=6, n=8, D=16 finite-difference suite."""
    obj = ObjectiveConfig(weights=LossWeights(0.0, 0.0, 0.0) if zero_weights else LossWeights(1.0, 1.0, 1.0))
    if cfg is not None:
        base = cfg.objective()
        obj = ObjectiveConfig(base.temps, obj.weights, base.eps, base.tau_loss, base.csal_mode, base.norm_axis)
    return run_gradcheck(seeds=seeds, cfg=obj, fault=fault)
