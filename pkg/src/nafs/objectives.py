"""Alignment objectives, their gradients, and an Adam optimizer.

The composite loss is ``w_cmpm * CMPM + w_cmpc * CMPC + w_csal * CSAL``.
CSAL works on the batch score matrices from :mod:`nafs.crossmodal`; CMPM and
CMPC act on the global-branch vectors only.

Learnable tensors live in a flat ``dict[str, ndarray]``:

``enc_img``, ``enc_txt``
    D x D maps applied to every incoming entry (stand-in for the feature
    extractors; the "backbone" learning-rate group).
``w_iq``, ``w_iv``, ``w_tk``, ``w_tv``
    attention projections.
``classifier``
    C x D identity classifier for CMPC.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .crossmodal import PROJECTION_NAMES, ProjectionParams, Temperatures, batch_scores
from .features import DimensionError

ENCODER_NAMES = ("enc_img", "enc_txt")
PARAM_NAMES = ENCODER_NAMES + PROJECTION_NAMES + ("classifier",)
BACKBONE_GROUP = frozenset(ENCODER_NAMES)


class InvalidLabelError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message, tensor=None, step=None):
        super().__init__(message)
        self.tensor = tensor
        self.step = step


@dataclass(frozen=True)
class MatchLabels:
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 2:
            raise DimensionError(f"label matrix must be 2-d, got {y.shape}")
        if not (np.all(y.sum(axis=1) > 0) and np.all(y.sum(axis=0) > 0)):
            raise InvalidLabelError("every row and column of the label matrix needs a match")
        object.__setattr__(self, "y", y)

    @classmethod
    def from_ids(cls, image_ids, text_ids) -> "MatchLabels":
        a, b = np.asarray(image_ids), np.asarray(text_ids)
        return cls((a[:, None] == b[None, :]).astype(np.float64))

    @property
    def q_rows(self) -> np.ndarray:
        return self.y / self.y.sum(axis=1, keepdims=True)

    @property
    def q_cols(self) -> np.ndarray:
        return self.y / self.y.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class LossWeights:
    w_cmpm: float = 1.0
    w_cmpc: float = 1.0
    w_csal: float = 0.1

    def __post_init__(self):
        if min(self.w_cmpm, self.w_cmpc, self.w_csal) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class ObjectiveConfig:
    temps: Temperatures = Temperatures()
    weights: LossWeights = LossWeights()
    eps: float = 1e-8
    tau_loss: float = 10.0
    csal_mode: str = "softmax"  # "softmax" or "raw"
    norm_axis: str = "query"


@dataclass
class Batch:
    """``B`` images and ``B`` captions; caption j is the one sampled for image j."""

    images: np.ndarray  # (B, m, D)
    texts: np.ndarray  # (B, n, D)
    image_pids: np.ndarray  # (B,) class indices
    text_pids: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.texts = np.asarray(self.texts, dtype=np.float64)
        self.image_pids = np.asarray(self.image_pids, dtype=np.int64)
        self.text_pids = np.asarray(self.text_pids, dtype=np.int64)
        if self.images.ndim != 3 or self.texts.ndim != 3:
            raise DimensionError("batch images/texts must be (B, entries, D)")
        if self.images.shape[0] != self.texts.shape[0] or self.images.shape[2] != self.texts.shape[2]:
            raise DimensionError(f"mismatched batch shapes {self.images.shape} vs {self.texts.shape}")

    @property
    def labels(self) -> MatchLabels:
        return MatchLabels.from_ids(self.image_pids, self.text_pids)


# --- loss graphs ------------------------------------------------------------


def _kl_rows(logp, q, eps):
    """sum_j p log(p / (q + eps)) for each row, with p = exp(logp)."""
    p = ad.exp(logp)
    return ad.tsum(p * (logp - np.log(q + eps)), axis=1)


def csal_graph(i2t, t2i, labels: MatchLabels, eps=1e-8, tau_loss=10.0, mode="softmax"):
    """Both CSAL directions on ``(B_img, B_txt)`` score tensors."""
    i2t, t2i = ad.as_tensor(i2t), ad.as_tensor(t2i)
    if i2t.shape != labels.y.shape or t2i.shape != labels.y.shape:
        raise DimensionError(f"scores {i2t.shape}/{t2i.shape} vs labels {labels.y.shape}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    b_img, b_txt = labels.y.shape
    if mode == "softmax":
        logp_i = ad.log_softmax(i2t * tau_loss, axis=1)
        logp_t = ad.log_softmax(t2i * tau_loss, axis=0)
    elif mode == "raw":
        if np.any(i2t.value <= 0) or np.any(t2i.value <= 0):
            raise NumericError("raw CSAL needs strictly positive scores for its logarithm")
        logp_i, logp_t = ad.log(i2t), ad.log(t2i)
    else:
        raise ValueError(f"unknown CSAL mode {mode!r}")
    loss_i = ad.tsum(_kl_rows(logp_i, labels.q_rows, eps)) / b_img
    loss_t = ad.tsum(_kl_rows(ad.einsum("ij->ji", logp_t), labels.q_cols.T, eps)) / b_txt
    return loss_i + loss_t


def cmpm_graph(x, z, labels: MatchLabels, eps=1e-8):
    """Projection matching: KL between the softmax over projections and the
    label distribution, image->text plus text->image."""
    x, z = ad.as_tensor(x), ad.as_tensor(z)
    logits_i = ad.einsum("id,jd->ij", x, ad.l2_normalize(z))
    logits_t = ad.einsum("jd,id->ji", z, ad.l2_normalize(x))
    loss_i = ad.mean(_kl_rows(ad.log_softmax(logits_i, axis=1), labels.q_rows, eps))
    loss_t = ad.mean(_kl_rows(ad.log_softmax(logits_t, axis=1), labels.q_cols.T, eps))
    return loss_i + loss_t


def _norm_softmax_ce(feats, classifier, class_idx):
    logits = ad.einsum("bd,cd->bc", feats, ad.l2_normalize(classifier))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(class_idx)), class_idx] = 1.0
    return -ad.mean(ad.tsum(ad.log_softmax(logits, axis=1) * onehot, axis=1))


def cmpc_graph(x, z, image_pids, text_pids, classifier):
    """Projection classification: each feature is projected onto its matched
    partner's direction and classified with a norm-softmax over identities."""
    x, z, classifier = ad.as_tensor(x), ad.as_tensor(z), ad.as_tensor(classifier)
    n_cls = classifier.shape[0]
    for ids in (image_pids, text_pids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= n_cls):
            raise InvalidLabelError(f"identity ids {ids.tolist()} outside classifier range [0, {n_cls})")
    z_bar, x_bar = ad.l2_normalize(z), ad.l2_normalize(x)
    x_hat = ad.tsum(x * z_bar, axis=1, keepdims=True) * z_bar
    z_hat = ad.tsum(z * x_bar, axis=1, keepdims=True) * x_bar
    return _norm_softmax_ce(x_hat, classifier, np.asarray(image_pids)) + _norm_softmax_ce(
        z_hat, classifier, np.asarray(text_pids)
    )


def encode(batch_array, weight):
    return ad.einsum("bkd,ed->bke", batch_array, weight)


def loss_graph(batch: Batch, params: dict, cfg: ObjectiveConfig, global_index: int = 0):
    """Total loss tensor and a dict of its (unweighted) components."""
    w = cfg.weights
    images = encode(batch.images, params["enc_img"])
    texts = encode(batch.texts, params["enc_txt"])
    labels = batch.labels
    parts = {}
    total = ad.Tensor(0.0)
    if w.w_cmpm or w.w_cmpc:
        xg, zg = images[:, global_index, :], texts[:, global_index, :]
        if w.w_cmpm:
            parts["cmpm"] = cmpm_graph(xg, zg, labels, cfg.eps)
            total = total + parts["cmpm"] * w.w_cmpm
        if w.w_cmpc:
            parts["cmpc"] = cmpc_graph(xg, zg, batch.image_pids, batch.text_pids, params["classifier"])
            total = total + parts["cmpc"] * w.w_cmpc
    if w.w_csal:
        i2t, t2i = batch_scores(images, texts, params, cfg.temps, cfg.norm_axis)
        parts["csal"] = csal_graph(i2t, t2i, labels, cfg.eps, cfg.tau_loss, cfg.csal_mode)
        total = total + parts["csal"] * w.w_csal
    return total, parts


# --- array-level API --------------------------------------------------------


def csal(sim_i2t, sim_t2i, labels: MatchLabels, eps=1e-8, tau_loss=10.0, mode="softmax") -> float:
    return float(csal_graph(sim_i2t, sim_t2i, labels, eps, tau_loss, mode).value)


def cmpm(img_globals, txt_globals, labels: MatchLabels, eps=1e-8) -> float:
    return float(cmpm_graph(img_globals, txt_globals, labels, eps).value)


def cmpc(img_globals, txt_globals, person_ids, classifier, text_person_ids=None) -> float:
    text_ids = person_ids if text_person_ids is None else text_person_ids
    return float(cmpc_graph(img_globals, txt_globals, person_ids, text_ids, classifier).value)


def total_loss(batch: Batch, params: dict, cfg: ObjectiveConfig = ObjectiveConfig()) -> float:
    return float(loss_graph(batch, params, cfg)[0].value)


def init_params(dim: int, num_classes: int, seed: int) -> dict:
    """Identity encoders, uniform projections and classifier rows."""
    proj = ProjectionParams.init(dim, seed)
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / np.sqrt(dim)
    return {
        "enc_img": np.eye(dim),
        "enc_txt": np.eye(dim),
        **proj.as_dict(),
        "classifier": rng.uniform(-bound, bound, size=(num_classes, dim)),
    }


def projections(params: dict) -> ProjectionParams:
    return ProjectionParams(*(params[k] for k in PROJECTION_NAMES))


def gradients(batch: Batch, params: dict, cfg: ObjectiveConfig = ObjectiveConfig(),
              wrt_inputs: bool = False):
    """Loss value and exact gradients for every tensor in ``params``.

    With ``wrt_inputs`` the returned dict also holds ``images``/``texts``
    gradients for the batch arrays themselves.
    """
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"parameter {k} is not finite", tensor=k)
    leaves = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    work = batch
    if wrt_inputs:
        leaves["images"] = ad.Tensor(batch.images, requires_grad=True, name="images")
        leaves["texts"] = ad.Tensor(batch.texts, requires_grad=True, name="texts")
        work = _TensorBatch(leaves["images"], leaves["texts"], batch)
    loss, _ = loss_graph(work, leaves, cfg)
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite", tensor="loss")
    if loss.requires_grad:
        ad.backward(loss)
    grads = {}
    for k, leaf in leaves.items():
        g = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradient of {k} is not finite", tensor=k)
        grads[k] = g
    return float(loss.value), grads


@dataclass
class _TensorBatch:
    images: ad.Tensor
    texts: ad.Tensor
    source: Batch

    @property
    def image_pids(self):
        return self.source.image_pids

    @property
    def text_pids(self):
        return self.source.text_pids

    @property
    def labels(self):
        return self.source.labels


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    lr_backbone: float = 0.00011
    lr_head: float = 0.0011
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr_backbone > 0 and self.lr_head > 0):
            raise ValueError(f"learning rates must be positive: {self.lr_backbone}, {self.lr_head}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps_opt > 0):
            raise ValueError("invalid Adam hyperparameters")

    def lr_for(self, name: str) -> float:
        return self.lr_backbone if name in BACKBONE_GROUP else self.lr_head


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = b1 * state.m.get(name, np.zeros_like(value)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(value)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = value - state.lr_for(name) * m_hat / (np.sqrt(v_hat) + state.eps_opt)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, step=step, m=new_m, v=new_v)
