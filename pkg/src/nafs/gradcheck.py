"""Finite-difference verification of the objective gradients.

The loss is re-evaluated here with plain numpy, independent of the tape in
:mod:`nafs.autodiff`. Every array carries a leading "probe" axis so that
all perturbed copies of one parameter are evaluated in a single pass.

Derivatives use the five-point central stencil
``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h``. With the default
temperatures the loss is sharply curved and the three-point stencil's
``O(h^2)`` truncation error alone reaches ~1e-3 relative at ``h = 1e-4``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .objectives import Batch, LossWeights, ObjectiveConfig, gradients, init_params

# Below this magnitude gradients are compared in absolute terms.
ABS_FLOOR = 1e-6
# Relative gap between three- and five-point estimates that triggers a smaller step.
CURVATURE_FLAG = 1e-3
# Consecutive refined estimates must agree this closely (relative).
AGREEMENT = 1e-5
REFINE_LEVELS = 6

STENCILS = {
    2: ((-1, 1), np.array([-0.5, 0.5])),
    4: ((-2, -1, 1, 2), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0),
}


def _l2n(x):
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-24)


def _log_softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _apply(x, w):
    """Map every row vector of ``x`` (P, B, k, D) through ``w`` (P, D, D)."""
    return x @ np.swapaxes(w, -1, -2)[:, None]


def _kl(logp, q, eps):
    return (np.exp(logp) * (logp - np.log(q + eps))).sum(axis=-1)


def _context(q, own_v, k, other_v, tau, norm_axis, active):
    n = k.shape[2]
    cos = _l2n(q)[:, :, None] @ np.swapaxes(_l2n(k), -1, -2)[:, None]
    s = np.maximum(cos, 0.0)
    s_hat = s / (s.sum(axis=3 if norm_axis == "query" else 4, keepdims=True) + 1e-8)
    excess = n * s_hat - s_hat.sum(axis=4, keepdims=True)
    s_tilde = np.maximum(excess, 0.0) * s_hat
    alpha = _softmax(tau * s_tilde, axis=4)
    r = alpha @ other_v[:, None]
    active += [(cos > 0).reshape(len(cos), -1), (excess > 0).reshape(len(cos), -1)]
    return (_l2n(own_v)[:, :, None] * _l2n(r)).sum(axis=-1).mean(axis=3)


def stacked_loss(arrays: dict, batch: Batch, cfg: ObjectiveConfig, with_active=False):
    """Total loss for every probe; each entry of ``arrays`` has shape ``(P, ...)``.

    With ``with_active`` also returns a ``(P, k)`` boolean matrix recording
    which side of every ``max(., 0)`` each probe landed on.
    """
    active = []
    if cfg.csal_mode != "softmax":
        raise NotImplementedError("stacked evaluation covers the softmax CSAL only")
    w = cfg.weights
    y = batch.labels
    q_rows, q_cols = y.q_rows, y.q_cols
    x = _apply(arrays["images"], arrays["enc_img"])
    z = _apply(arrays["texts"], arrays["enc_txt"])
    total = np.zeros(x.shape[0])
    xg, zg = x[:, :, 0], z[:, :, 0]
    if w.w_cmpm:
        li = _kl(_log_softmax(np.einsum("pid,pjd->pij", xg, _l2n(zg)), 2), q_rows, cfg.eps).mean(axis=1)
        lt = _kl(_log_softmax(np.einsum("pjd,pid->pji", zg, _l2n(xg)), 2), q_cols.T, cfg.eps).mean(axis=1)
        total += w.w_cmpm * (li + lt)
    if w.w_cmpc:
        cls = _l2n(arrays["classifier"])
        x_hat = (xg * _l2n(zg)).sum(axis=-1, keepdims=True) * _l2n(zg)
        z_hat = (zg * _l2n(xg)).sum(axis=-1, keepdims=True) * _l2n(xg)
        rows = np.arange(xg.shape[1])
        ce_i = -_log_softmax(np.einsum("pbd,pcd->pbc", x_hat, cls), 2)[:, rows, batch.image_pids].mean(axis=1)
        ce_t = -_log_softmax(np.einsum("pbd,pcd->pbc", z_hat, cls), 2)[:, rows, batch.text_pids].mean(axis=1)
        total += w.w_cmpc * (ce_i + ce_t)
    if w.w_csal:
        iq = _apply(x, arrays["w_iq"])
        iv = _apply(x, arrays["w_iv"])
        tk = _apply(z, arrays["w_tk"])
        tv = _apply(z, arrays["w_tv"])
        i2t = _context(iq, iv, tk, tv, cfg.temps.tau_i2t, cfg.norm_axis, active)
        t2i = np.swapaxes(_context(tk, tv, iq, iv, cfg.temps.tau_t2i, cfg.norm_axis, active), 1, 2)
        b_img, b_txt = y.y.shape
        li = _kl(_log_softmax(cfg.tau_loss * i2t, 2), q_rows, cfg.eps).sum(axis=1) / b_img
        lt = _kl(np.swapaxes(_log_softmax(cfg.tau_loss * t2i, 1), 1, 2), q_cols.T, cfg.eps).sum(axis=1) / b_txt
        total += w.w_csal * (li + lt)
    if with_active:
        pattern = np.concatenate(active, axis=1) if active else np.zeros((len(total), 0), dtype=bool)
        return total, pattern
    return total


def _probe(base, name, batch, cfg, deltas, chunk=128):
    """Loss and clamp pattern at ``base`` shifted by each ``(flat index, delta)``."""
    target = base[name]
    values, patterns = [], []
    for start in range(0, len(deltas), chunk):
        part = deltas[start : start + chunk]
        stack = np.repeat(target.reshape(1, -1), len(part), axis=0)
        for row, (c, d) in enumerate(part):
            stack[row, c] += d
        arrays = {k: np.broadcast_to(v, (len(part),) + v.shape) for k, v in base.items() if k != name}
        arrays[name] = stack.reshape((len(part),) + target.shape)
        vals, pattern = stacked_loss(arrays, batch, cfg, with_active=True)
        values.append(vals)
        patterns.append(pattern)
    return np.concatenate(values), np.concatenate(patterns)


def _stencil(base, name, batch, cfg, comps, step, order, reference):
    """Derivative estimates at ``step`` for flat components ``comps``.

    Returns ``(estimate, three_point, crossed)``; ``three_point`` reuses the
    inner probes and ``crossed`` flags stencils that straddle a boundary.
    """
    offsets, coeffs = STENCILS[order]
    vals, pattern = _probe(base, name, batch, cfg, [(c, o * step) for c in comps for o in offsets])
    k = len(offsets)
    vals = vals.reshape(len(comps), k)
    crossed = np.any(pattern != reference, axis=1).reshape(len(comps), k).any(axis=1)
    inner = [offsets.index(-1), offsets.index(1)]
    three_point = (vals[:, inner[1]] - vals[:, inner[0]]) / (2 * step)
    return vals @ coeffs / step, three_point, crossed


def finite_difference(base: dict, name: str, batch: Batch, cfg: ObjectiveConfig,
                      h: float = 1e-4, order: int = 4, refine: bool = True):
    """Central-difference gradient of the loss with respect to ``base[name]``.

    Every component is first probed at step ``h``. A component is re-probed
    at ``h/4, h/16, ...`` when its stencil straddles a ``max(., 0)``
    boundary, or when the three- and five-point estimates disagree by more
    than ``CURVATURE_FLAG`` (the step is too coarse for the local
    curvature). Refinement stops once two consecutive smooth estimates agree
    within ``AGREEMENT``.

    Returns ``(gradient, info)`` with ``info["refined"]`` and
    ``info["unresolved"]`` holding flat component indices.
    """
    target = base[name]
    _, reference = _probe(base, name, batch, cfg, [(0, 0.0)])
    comps = list(range(target.size))
    grad, three, crossed = _stencil(base, name, batch, cfg, comps, h, order, reference)
    scale = np.maximum(np.abs(grad), ABS_FLOOR)
    flagged = crossed | (np.abs(three - grad) > CURVATURE_FLAG * scale)
    pending = [int(c) for c in np.flatnonzero(flagged)] if refine and order == 4 else []
    refined = list(pending)
    previous = {}
    step = h
    for _ in range(REFINE_LEVELS):
        if not pending:
            break
        step /= 4.0
        est, _, bad = _stencil(base, name, batch, cfg, pending, step, order, reference)
        still = []
        for c, e, b in zip(pending, est, bad):
            if b:
                still.append(c)
                continue
            grad[c] = e
            if c in previous and abs(e - previous[c]) <= AGREEMENT * max(abs(e), ABS_FLOOR):
                continue
            previous[c] = e
            still.append(c)
        pending = still
    info = {"refined": refined, "unresolved": pending}
    return grad.reshape(target.shape), info


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def random_instance(seed: int, batch_size=4, m=6, n=8, dim=16, num_classes=3):
    """A random batch and parameter set; encoders are perturbed away from identity."""
    rng = np.random.default_rng(seed)
    pids = rng.integers(0, num_classes, size=batch_size)
    batch = Batch(rng.normal(size=(batch_size, m, dim)), rng.normal(size=(batch_size, n, dim)), pids, pids)
    params = init_params(dim, num_classes, seed)
    for k in ("enc_img", "enc_txt"):
        params[k] = params[k] + 0.1 * rng.normal(size=(dim, dim))
    return batch, params


@dataclass
class GradcheckResult:
    seed: int
    max_rel_error: float
    worst_tensor: str
    per_tensor: dict = field(default_factory=dict)
    components: int = 0
    refined: int = 0  # re-probed below h (clamp crossing or coarse step)
    skipped: int = 0  # never settled; excluded from the maximum and reported


@dataclass
class GradcheckReport:
    results: list
    tolerance: float
    elapsed: float

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.results)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        out = [
            f"seed {r.seed:3d}  max rel err {r.max_rel_error:.3e}  ({r.worst_tensor})  "
            f"components {r.components}  refined {r.refined}  skipped {r.skipped}"
            for r in self.results
        ]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: max relative error {self.max_rel_error:.3e} "
                   f"(tolerance {self.tolerance:g}) over {len(self.results)} seeds in {self.elapsed:.1f}s")
        return out


def check_seed(seed: int, cfg: ObjectiveConfig, h=1e-4, order=4, wrt_inputs=True, fault=False,
               **shape) -> GradcheckResult:
    batch, params = random_instance(seed, **shape)
    _, grads = gradients(batch, params, cfg, wrt_inputs=True)
    if fault:
        # Negative control: corrupt one analytic component.
        grads["w_iq"] = grads["w_iq"].copy()
        grads["w_iq"][0, 0] += 1e-3 + 0.01 * abs(grads["w_iq"][0, 0])
    base = {k: v for k, v in params.items()}
    base["images"], base["texts"] = batch.images, batch.texts
    names = list(params) + (["images", "texts"] if wrt_inputs else [])
    per_tensor, total, refined, skipped = {}, 0, 0, 0
    for name in names:
        fd, info = finite_difference(base, name, batch, cfg, h=h, order=order)
        err = relative_error(grads[name], fd).reshape(-1)
        err[info["unresolved"]] = 0.0
        per_tensor[name] = float(err.max())
        total += err.size
        refined += len(info["refined"])
        skipped += len(info["unresolved"])
    worst = max(per_tensor, key=per_tensor.get)
    return GradcheckResult(seed, per_tensor[worst], worst, per_tensor, total, refined, skipped)


def run_gradcheck(seeds=range(20), cfg: ObjectiveConfig | None = None, h=1e-4, order=4,
                  tolerance=1e-4, fault=False, **shape) -> GradcheckReport:
    """Compare tape gradients with finite differences over several random instances.

    Default instance shape is B=4, m=6, n=8, D=16; every loss term is active.
    """
    cfg = cfg or ObjectiveConfig(weights=LossWeights(1.0, 1.0, 1.0))
    t0 = time.perf_counter()
    results = [check_seed(s, cfg, h=h, order=order, fault=fault, **shape) for s in seeds]
    return GradcheckReport(results, tolerance, time.perf_counter() - t0)
