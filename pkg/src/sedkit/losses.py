"""Detection, scale-consistency and self-distillation losses.

Divergences come in two flavours: plain numpy functions on probability
vectors (``kl_div``, ``js_div``, ``grad_norm``) and tape versions used in
training, which operate on logit tensors of shape (..., C+1).

The classification parts of both consistency losses can be aggregated by
gradient-histogram re-weighting: per-sample gradient norms ``g`` in [0, 1]
are binned into ``M`` equal bins and sample ``i`` is weighted by
``1 / (M * R[bin(g_i)])``, where ``R`` counts samples per bin.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from sedkit import autograd as ag
from sedkit.autograd import Tensor, sg
from sedkit.detector import AssignmentMap, PyramidOutput, regression_targets

EPS = 1e-8
LOG_EPS = float(np.log(EPS))


def _check_dist(p, name="p"):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} is not a probability distribution")
    return p


def kl_div(p_target, p) -> float | np.ndarray:
    """``sum p_target * ln(p_target / p)`` over the last axis, 0 ln 0 = 0."""
    pt = _check_dist(p_target, "p_target")
    q = _check_dist(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pt > 0, pt * (np.log(np.maximum(pt, EPS)) - np.log(np.maximum(q, EPS))), 0.0)
    return terms.sum(axis=-1)


def js_div(p, q) -> float | np.ndarray:
    p, q = _check_dist(p), _check_dist(q, "q")
    m = 0.5 * (p + q)
    return 0.5 * kl_div(p, m) + 0.5 * kl_div(q, m)


def grad_norm(p, p_target) -> float | np.ndarray:
    """Total-variation distance ``0.5 * sum |p - p_target|``, in [0, 1]."""
    p, pt = np.asarray(p, dtype=np.float64), np.asarray(p_target, dtype=np.float64)
    return np.minimum(0.5 * ag.last_sum(np.abs(p - pt)), 1.0)


@dataclass
class GradHistogram:
    M: int = 10
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("histogram needs at least one bin")
        if self.counts is None:
            self.counts = np.zeros(self.M, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    def bin_index(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        return np.clip(np.floor(g * self.M).astype(np.int64), 0, self.M - 1)

    @classmethod
    def build(cls, g, M: int = 10) -> "GradHistogram":
        h = cls(M)
        h.counts = np.bincount(h.bin_index(g).ravel(), minlength=M).astype(np.int64)
        return h


def reweight_factors(g, M: int = 10) -> np.ndarray:
    """Per-sample weights ``1 / (M * R[bin(g)])``."""
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        return np.zeros_like(g)
    hist = GradHistogram.build(g, M)
    return 1.0 / (M * hist.counts[hist.bin_index(g)])


def reweighted_mean(per_sample_kl, per_sample_g, M: int = 10) -> float:
    kl = np.asarray(per_sample_kl, dtype=np.float64)
    g = np.asarray(per_sample_g, dtype=np.float64)
    if kl.shape != g.shape:
        raise ValueError("per-sample loss and gradient arrays differ in shape")
    if kl.size == 0:
        warnings.warn("reweighted_mean of an empty sample set is 0", RuntimeWarning)
        return 0.0
    return float((kl * reweight_factors(g, M)).sum())


# ---------------------------------------------------------------------------
# tape versions


def _log_probs(logits: Tensor) -> Tensor:
    return ag.clamp_min(ag.log_softmax(logits), LOG_EPS)


def kl_rows(target_logits: Tensor, logits: Tensor) -> Tensor:
    """Per-row KL(softmax(target) || softmax(logits)); target is taken as given
    (wrap it in :func:`sg` to stop its gradient)."""
    return kl_logprob_rows(_log_probs(target_logits), _log_probs(logits))


def kl_logprob_rows(lt: Tensor, lq: Tensor) -> Tensor:
    """Per-row KL from clamped log-probabilities."""
    return (ag.exp(lt) * (lt - lq)).sum(axis=-1)


def ce_rows(logits: Tensor, target_index: np.ndarray) -> Tensor:
    """Per-row cross-entropy against integer class targets."""
    lq = _log_probs(logits)
    onehot = np.zeros(lq.shape, dtype=lq.dtype)
    np.put_along_axis(onehot, np.asarray(target_index)[..., None], 1, axis=-1)
    return -(lq * onehot).sum(axis=-1)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - ag.last_max(z, keepdims=True))
    return e / ag.last_sum(e, keepdims=True)


def _aggregate(rows: list, gs: list, reweight: bool, M: int):
    """Weighted sum of per-sample losses spread over several tensors.

    Returns ``(loss tensor, weights list)``; vanilla mode uses 1/N weights.
    """
    n = sum(r.data.size for r in rows)
    if n == 0:
        return Tensor(np.zeros((), dtype=np.float32)), []
    if reweight:
        flat_g = np.concatenate([g.ravel() for g in gs])
        w_all = reweight_factors(flat_g, M)
        weights, start = [], 0
        for r in rows:
            weights.append(w_all[start:start + r.data.size].reshape(r.shape).astype(r.dtype))
            start += r.data.size
    else:
        weights = [np.full(r.shape, 1.0 / n, dtype=r.dtype) for r in rows]
    total = None
    for r, w in zip(rows, weights):
        term = (r * w).sum()
        total = term if total is None else total + term
    return total, weights


def _mean_over(tensors: list, masks: list | None = None) -> Tensor:
    """Mean of squared-difference tensors over selected rows and 4 components."""
    total, count = None, 0
    for i, t in enumerate(tensors):
        if masks is not None:
            m = masks[i]
            if not m.any():
                continue
            t = t * m[..., None].astype(t.dtype)
            count += int(m.sum()) * t.shape[-1]
        else:
            count += t.data.size
        s = t.sum()
        total = s if total is None else total + s
    if total is None or count == 0:
        return Tensor(np.zeros((), dtype=tensors[0].dtype if tensors else np.float32))
    return total * (1.0 / count)


def supervised_loss(out: PyramidOutput, assign: AssignmentMap,
                    cls_norm: str = "anchors") -> tuple[Tensor, Tensor]:
    """Classification CE and mean squared delta error over foreground anchors.

    Args:
        out: batched detector output.
        assign: batched assignment built on the same layout.
        cls_norm: ``"anchors"`` averages CE over non-ignored anchors;
            ``"foreground"`` sums it and divides by the foreground count
            (at least 1).
    """
    if cls_norm not in ("anchors", "foreground"):
        raise ValueError(f"unknown cls_norm {cls_norm!r}")
    C = assign.num_classes
    targets = regression_targets(assign, out.layout)
    ce_terms, n_cls, n_fg = None, 0, 0
    sq, fg_masks = [], []
    for lv, lab, tgt in zip(out.levels, assign.labels, targets):
        valid = lab >= 0
        n_cls += int(valid.sum())
        ce = ce_rows(lv.logits, np.where(valid, lab, C))
        term = (ce * valid.astype(ce.dtype)).sum()
        ce_terms = term if ce_terms is None else ce_terms + term
        fg = valid & (lab < C)
        n_fg += int(fg.sum())
        sq.append(ag.square(lv.deltas - tgt.astype(lv.deltas.dtype)))
        fg_masks.append(fg)
    denom = n_cls if cls_norm == "anchors" else n_fg
    cls = ce_terms * (1.0 / max(denom, 1))
    reg = _mean_over(sq, fg_masks)
    return cls, reg


def aligned_pairs(num_levels: int, s: int) -> list[tuple[int, int]]:
    """(full level, downsampled level) index pairs with f' = f - s."""
    pairs = [(f, f - s) for f in range(num_levels) if f - s >= 0]
    if not pairs:
        raise ValueError(f"no aligned levels for s={s} with {num_levels} levels")
    return pairs


def scale_consistency_loss(out_full: PyramidOutput, out_down: PyramidOutput, s: int,
                           reweight: bool = True, M: int = 10, targets=None):
    """Symmetric stop-gradient KL plus squared delta difference between level
    ``f`` of the full image and level ``f - s`` of its 2**s downsample.

    Args:
        out_full: outputs on the full-size images.
        out_down: outputs on the downsampled images.
        s: downsampling exponent.
        reweight: apply gradient-density reweighting to the KL rows.
        M: number of histogram bins.
        targets: optional ``(full, down)`` outputs that supply the
            stop-gradient side of each KL and the reweighting statistics.
            Defaults to ``(out_full, out_down)``; finite-difference checks
            pass outputs frozen at the unperturbed parameters.

    Returns ``(cls, reg, info)`` where ``info`` carries per-sample KL/g arrays.
    """
    t_full, t_down = targets if targets is not None else (out_full, out_down)
    rows, gs, sq = [], [], []
    for f, fd in aligned_pairs(len(out_full.levels), s):
        a, b = out_full.levels[f], out_down.levels[fd]
        if a.logits.shape != b.logits.shape:
            raise ValueError(f"level {f} of full image and level {fd} of downsample are misaligned")
        ta, tb = t_full.levels[f], t_down.levels[fd]
        la, lb = _log_probs(a.logits), _log_probs(b.logits)
        la_t = la if ta is a else _log_probs(ta.logits)
        lb_t = lb if tb is b else _log_probs(tb.logits)
        sym = kl_logprob_rows(sg(la_t), lb) + kl_logprob_rows(sg(lb_t), la)
        rows.append(sym)
        gs.append(grad_norm(_softmax_np(ta.logits.data.astype(np.float64)),
                            _softmax_np(tb.logits.data.astype(np.float64))))
        sq.append(ag.square(a.deltas - b.deltas))
    cls, _ = _aggregate(rows, gs, reweight, M)
    reg = _mean_over(sq)
    info = {"kl": np.concatenate([r.data.ravel() for r in rows]),
            "g": np.concatenate([g.ravel() for g in gs])}
    return cls, reg, info


def self_distill_loss(teacher: PyramidOutput, student: PyramidOutput, mode: str = "soft",
                      tau: float = 0.7, tau_bg: float = 0.3, reweight: bool = True, M: int = 10):
    """Anchor-wise distillation from teacher outputs on the weak view to
    student outputs on the strong view of the same geometry.

    ``mode="soft"``: KL to the teacher distribution + squared delta error.
    ``mode="hard"``: thresholded one-hot pseudo-labels; foreground where the
    teacher's foreground score >= ``tau``, background below ``tau_bg``,
    ignored in between. Returns ``(cls, reg, info)``.
    """
    if len(teacher.levels) != len(student.levels) or any(
            t.logits.shape != s.logits.shape for t, s in zip(teacher.levels, student.levels)):
        raise ValueError("teacher and student outputs use different anchor layouts")
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown distillation mode {mode!r}")
    rows, gs, sq, masks = [], [], [], []
    for t, s in zip(teacher.levels, student.levels):
        pt = _softmax_np(t.logits.data.astype(np.float64))
        ps = _softmax_np(s.logits.data.astype(np.float64))
        if mode == "soft":
            rows.append(kl_rows(sg(t.logits), s.logits))
            gs.append(grad_norm(ps, pt))
            sq.append(ag.square(s.deltas - sg(t.deltas)))
        else:
            C = pt.shape[-1] - 1
            score = 1.0 - pt[..., C]
            fg = score >= tau
            bg = score < tau_bg
            keep = fg | bg
            target = np.where(fg, pt[..., :C].argmax(axis=-1), C)
            ce = ce_rows(s.logits, target)
            idx = np.nonzero(keep)
            rows.append(ce[idx])
            onehot = np.zeros_like(ps)
            np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
            gs.append(grad_norm(ps, onehot)[idx])
            sq.append(ag.square(s.deltas - sg(t.deltas)))
            masks.append(fg)
    cls, _ = _aggregate(rows, gs, reweight, M)
    reg = _mean_over(sq, masks if mode == "hard" else None)
    info = {"kl": np.concatenate([r.data.ravel() for r in rows]),
            "g": np.concatenate([g.ravel() for g in gs])}
    return cls, reg, info


@dataclass
class LossReport:
    total: float
    supervised_cls: float
    supervised_reg: float
    scale_cls: float
    scale_reg: float
    distill_cls: float
    distill_reg: float
    multiplier: float
    lambda_s: float
    lambda_d: float

    def recompute_total(self) -> float:
        sup = self.supervised_cls + self.supervised_reg
        return sup + self.multiplier * (self.lambda_s * (self.scale_cls + self.scale_reg)
                                        + self.lambda_d * (self.distill_cls + self.distill_reg))

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _val(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(sup, scale, distill, n_u: int, n_s: int,
               lambda_s: float = 0.5, lambda_d: float = 1.0):
    """Weighted composite ``sup + (n_u / n_s) * (lambda_s * scale + lambda_d * distill)``.

    Each of ``sup``, ``scale`` and ``distill`` is a ``(cls, reg)`` pair of
    floats or tensors. Returns ``(total, LossReport)``; ``total`` is a tensor
    when any input is one.
    """
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    mult = n_u / n_s
    sup_t = sup[0] + sup[1]
    unsup = None
    if lambda_s:
        unsup = (scale[0] + scale[1]) * lambda_s
    if lambda_d:
        d = (distill[0] + distill[1]) * lambda_d
        unsup = d if unsup is None else unsup + d
    total = sup_t if unsup is None or mult == 0 else sup_t + unsup * mult
    report = LossReport(
        total=0.0,
        supervised_cls=_val(sup[0]), supervised_reg=_val(sup[1]),
        scale_cls=_val(scale[0]), scale_reg=_val(scale[1]),
        distill_cls=_val(distill[0]), distill_reg=_val(distill[1]),
        multiplier=mult, lambda_s=lambda_s, lambda_d=lambda_d,
    )
    # logged total is composed from the logged components in float64
    report.total = report.recompute_total()
    return total, report
