"""COCO-style AP/AR, multi-scale test ensembling and diagnostic analyses."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sedkit.augment import downsample, resize_area
from sedkit.detector import (
    ArchConfig, forward, make_layout, predict_batch, predict_detections,
)
from sedkit.geometry import Box, Detection, iou_matrix, nms
from sedkit.losses import GradHistogram, aligned_pairs, reweight_factors, scale_consistency_loss

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class APReport:
    ap50: float
    ap75: float
    ap: float
    ar50: float
    ar90: float
    per_class: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"AP50": self.ap50, "AP75": self.ap75, "AP": self.ap, "AR50": self.ar50, "AR90": self.ar90}


def _gt_arrays(gt):
    if hasattr(gt, "boxes"):
        return np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4), np.asarray(gt.labels).reshape(-1)
    boxes, labels = gt
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels).reshape(-1)


def greedy_match(det_boxes, det_scores, gt_boxes, thr: float) -> np.ndarray:
    """Score-descending greedy matching within one image and class.

    Each detection takes the unmatched gt of highest IoU >= ``thr``.
    Returns a boolean true-positive flag per detection (input order).
    """
    n = len(det_boxes)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return tp
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable"):
        cand = np.where(taken, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= thr:
            taken[j] = True
            tp[i] = True
    return tp


def average_precision(tp_sorted: np.ndarray, npos: int) -> float:
    """All-point interpolated AP from TP flags in score-descending order."""
    if npos == 0 or len(tp_sorted) == 0:
        return 0.0
    tps = np.cumsum(tp_sorted)
    fps = np.cumsum(~tp_sorted)
    rec = tps / npos
    prec = tps / (tps + fps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _class_stats(dets_per_scene, gts_per_scene, cls: int, thr: float):
    scores, tps = [], []
    npos = 0
    for dets, gt in zip(dets_per_scene, gts_per_scene):
        gb, gl = _gt_arrays(gt)
        g = gb[gl == cls]
        npos += len(g)
        mine = [d for d in dets if d.class_id == cls]
        if not mine:
            continue
        db = np.asarray([d.box for d in mine], dtype=np.float64)
        ds = np.asarray([d.score for d in mine], dtype=np.float64)
        tps.append(greedy_match(db, ds, g, thr))
        scores.append(ds)
    if not scores:
        return np.zeros(0, dtype=bool), npos
    scores = np.concatenate(scores)
    tps = np.concatenate(tps)
    order = np.argsort(-scores, kind="stable")
    return tps[order], npos


def compute_ap(dets_per_scene, gts_per_scene, num_classes: int,
               iou_thrs=COCO_THRESHOLDS) -> APReport:
    """Per-class AP at each IoU threshold, averaged over classes with gts."""
    thrs = tuple(float(t) for t in iou_thrs)
    if 0.5 not in thrs:
        thrs = (0.5,) + thrs
    table = {}
    recalls = {}
    flags = []
    for c in range(num_classes):
        for t in sorted(set(thrs) | {0.9}):
            tp, npos = _class_stats(dets_per_scene, gts_per_scene, c, t)
            if npos == 0:
                if len(tp):
                    flags.append(f"class {c}: detections without ground truth (AP undefined, counted 0)")
                    table[(c, t)] = 0.0
                    recalls[(c, t)] = 0.0
                continue
            table[(c, t)] = average_precision(tp, npos)
            recalls[(c, t)] = float(tp.sum()) / npos
    classes = sorted({c for c, _ in table})
    flags = sorted(set(flags))

    def mean_over(d, t):
        vals = [d[(c, t)] for c in classes if (c, t) in d]
        return float(np.mean(vals)) if vals else 0.0

    per_class = {c: {"AP50": table.get((c, 0.5), 0.0),
                     "AP": float(np.mean([table.get((c, t), 0.0) for t in COCO_THRESHOLDS]))}
                 for c in classes}
    return APReport(
        ap50=mean_over(table, 0.5),
        ap75=mean_over(table, 0.75),
        ap=float(np.mean([mean_over(table, t) for t in COCO_THRESHOLDS])),
        ar50=mean_over(recalls, 0.5),
        ar90=mean_over(recalls, 0.9),
        per_class=per_class,
        flags=flags,
    )


def predict_scenes(params, scenes, arch: ArchConfig, score_thr=0.05, nms_thr=0.5, batch=16):
    out = []
    for i in range(0, len(scenes), batch):
        imgs = np.stack([s.image for s in scenes[i:i + batch]])
        out.extend(predict_batch(params, imgs, arch, score_thr, nms_thr))
    return out


def evaluate(params, scenes, arch: ArchConfig, score_thr=0.05, nms_thr=0.5) -> APReport:
    dets = predict_scenes(params, scenes, arch, score_thr, nms_thr)
    return compute_ap(dets, scenes, arch.num_classes)


# ---------------------------------------------------------------------------
# multi-scale testing


def _scaled_input(image, factor: float, multiple: int, fill: float):
    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    resized = resize_area(image, nh, nw)
    ph, pw = -(-nh // multiple) * multiple, -(-nw // multiple) * multiple
    if (ph, pw) != (nh, nw):
        canvas = np.full((ph, pw, image.shape[2]), fill, dtype=image.dtype)
        canvas[:nh, :nw] = resized
        resized = canvas
    return resized, nw / w, nh / h


def multiscale_ensemble(params, image, arch: ArchConfig, scale_factors=(0.5, 1.0, 1.5),
                        nms_thr: float = 0.5, score_thr: float = 0.05, fill: float | None = None,
                        max_dets: int = 100, return_per_scale: bool = False):
    """Predict at several input scales, map boxes back, merge with class-wise NMS.

    Scaled inputs are padded bottom/right to a multiple of the largest stride
    with ``fill`` (default: the image mean), so no offset correction is needed.
    """
    if any(f <= 0 for f in scale_factors):
        raise ValueError("scale factors must be positive")
    h, w = image.shape[:2]
    fill = float(image.mean()) if fill is None else fill
    merged, per_scale = [], {}
    for f in scale_factors:
        if f == 1.0 and h % arch.strides[-1] == 0 and w % arch.strides[-1] == 0:
            inp, sx, sy = image, 1.0, 1.0
        else:
            inp, sx, sy = _scaled_input(image, f, arch.strides[-1], fill)
        dets = predict_detections(params, inp, arch, score_thr, nms_thr, max_dets)
        mapped = []
        for d in dets:
            b = d.box
            box = Box(min(max(b.x1 / sx, 0.0), w), min(max(b.y1 / sy, 0.0), h),
                      min(max(b.x2 / sx, 0.0), w), min(max(b.y2 / sy, 0.0), h))
            if box.x2 > box.x1 and box.y2 > box.y1:
                mapped.append(Detection(box, d.class_id, d.score))
        per_scale[f] = mapped
        merged.extend(mapped)
    result = nms(merged, nms_thr)[:max_dets]
    return (result, per_scale) if return_per_scale else result


def multiscale_report(params, scenes, arch: ArchConfig, scale_factors=(0.5, 1.0, 1.5),
                      nms_thr: float = 0.5, score_thr: float = 0.05) -> list[dict]:
    """One row per scale plus an ensemble row, each with AP metrics."""
    per_scale = {f: [] for f in scale_factors}
    ens = []
    for s in scenes:
        merged, parts = multiscale_ensemble(params, s.image, arch, scale_factors, nms_thr,
                                            score_thr, return_per_scale=True)
        ens.append(merged)
        for f in scale_factors:
            per_scale[f].append(parts[f])
    rows = []
    for f in scale_factors:
        r = compute_ap(per_scale[f], scenes, arch.num_classes)
        rows.append({"scale": f"{f:g}", **r.as_row()})
    r = compute_ap(ens, scenes, arch.num_classes)
    rows.append({"scale": "ensemble", **r.as_row()})
    return rows


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class PRCurve:
    iou: float
    thresholds: list
    precision: list
    recall: list
    flags: list = field(default_factory=list)


def pseudo_label_pr_from_dets(dets_per_scene, scenes, thresholds, iou_criteria=(0.5, 0.9)) -> list:
    """Treat detections scoring >= threshold as hard pseudo-labels and score
    them against the withheld ground truth (class-aware matching)."""
    curves = []
    n_gt = sum(len(s.boxes) for s in scenes)
    for crit in iou_criteria:
        prec, rec, flags = [], [], []
        for thr in thresholds:
            tp = n_det = 0
            for dets, s in zip(dets_per_scene, scenes):
                kept = [d for d in dets if d.score >= thr]
                n_det += len(kept)
                for c in np.unique(s.labels):
                    mine = [d for d in kept if d.class_id == c]
                    if not mine:
                        continue
                    tp += int(greedy_match(np.asarray([d.box for d in mine]),
                                           np.asarray([d.score for d in mine]),
                                           s.boxes[s.labels == c], crit).sum())
            if n_det == 0:
                prec.append(1.0)
                flags.append(f"threshold {thr:g}: no pseudo-labels, precision set to 1")
            else:
                prec.append(tp / n_det)
            rec.append(tp / n_gt if n_gt else 0.0)
        curves.append(PRCurve(crit, list(thresholds), prec, rec, flags))
    return curves


def pseudo_label_pr(params, scenes, arch: ArchConfig, thresholds=tuple(np.round(np.arange(0.1, 1.0, 0.1), 2)),
                    iou_criteria=(0.5, 0.9), nms_thr: float = 0.5) -> list:
    lo = min(thresholds)
    dets = predict_scenes(params, scenes, arch, score_thr=min(lo, 0.05), nms_thr=nms_thr)
    return pseudo_label_pr_from_dets(dets, scenes, thresholds, iou_criteria)


@dataclass
class ScoreDistanceHist:
    edges: np.ndarray
    fg_counts: np.ndarray
    bg_counts: np.ndarray
    mean_distance: float
    total: int

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.bg_counts > 0, self.fg_counts / np.maximum(self.bg_counts, 1), np.nan)


def score_distances(params, images, gts, arch: ArchConfig, s: int = 1, batch: int = 16):
    """Per aligned anchor: |fg score on X - fg score on downsample(X, s)| and
    whether the anchor overlaps a gt with IoU >= 0.5."""
    dists, fgs = [], []
    for i in range(0, len(images), batch):
        x = np.stack(images[i:i + batch])
        full = forward(params, x, arch)
        down = forward(params, downsample(x, s), arch)
        for f, fd in aligned_pairs(len(full.levels), s):
            pf = full.levels[f].class_probs
            pd = down.levels[fd].class_probs
            d = np.abs(pd[..., -1] - pf[..., -1])   # |(1-bg) - (1-bg')|
            anchors = full.layout.level_anchors(f).reshape(-1, 4)
            for b in range(d.shape[0]):
                gb = np.asarray(gts[i + b][0]).reshape(-1, 4)
                fg = (iou_matrix(anchors, gb).max(axis=1) >= 0.5) if len(gb) else np.zeros(len(anchors), bool)
                dists.append(d[b].reshape(-1))
                fgs.append(fg)
    return np.concatenate(dists), np.concatenate(fgs)


def score_distance_hist(params, scenes, arch: ArchConfig, s: int = 1, bins: int = 10) -> ScoreDistanceHist:
    d, fg = score_distances(params, [sc.image for sc in scenes],
                            [(sc.boxes, sc.labels) for sc in scenes], arch, s)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(d * bins).astype(np.int64), 0, bins - 1)
    return ScoreDistanceHist(
        edges=edges,
        fg_counts=np.bincount(idx[fg], minlength=bins),
        bg_counts=np.bincount(idx[~fg], minlength=bins),
        mean_distance=float(d.mean()) if len(d) else 0.0,
        total=int(len(d)),
    )


def gradient_contribution_profile(per_sample_kl, per_sample_g, M: int = 10, mode: str = "reweighted"):
    """Per-bin ``(count, contribution)`` of a per-sample loss.

    vanilla: contribution_j = sum_{i in j} kl_i / N;
    reweighted: contribution_j = sum_{i in j} kl_i / (M * R_j).
    """
    kl = np.asarray(per_sample_kl, dtype=np.float64)
    g = np.asarray(per_sample_g, dtype=np.float64)
    hist = GradHistogram.build(g, M)
    idx = hist.bin_index(g)
    if mode == "vanilla":
        w = np.full(len(kl), 1.0 / max(len(kl), 1))
    elif mode == "reweighted":
        w = reweight_factors(g, M)
    else:
        raise ValueError(f"unknown profile mode {mode!r}")
    contrib = np.bincount(idx, weights=kl * w, minlength=M) if len(kl) else np.zeros(M)
    return hist.counts.copy(), contrib


def scale_gradient_profile(params, images, arch: ArchConfig, s: int = 1, M: int = 10,
                           batch: int = 16) -> list[dict]:
    """Vanilla and reweighted per-bin contributions of the scale-consistency
    KL measured on ``images``; one row per gradient-norm bin."""
    kl, g = [], []
    for i in range(0, len(images), batch):
        x = np.stack(images[i:i + batch])
        _, _, info = scale_consistency_loss(forward(params, x, arch),
                                            forward(params, downsample(x, s), arch), s, True, M)
        kl.append(info["kl"])
        g.append(info["g"])
    kl = np.concatenate(kl).astype(np.float64)
    g = np.concatenate(g).astype(np.float64)
    counts, vanilla = gradient_contribution_profile(kl, g, M, "vanilla")
    _, reweighted = gradient_contribution_profile(kl, g, M, "reweighted")
    edges = np.linspace(0.0, 1.0, M + 1)
    return [{"bin": j, "g_lo": f"{edges[j]:.2f}", "g_hi": f"{edges[j + 1]:.2f}", "count": int(counts[j]),
             "vanilla": float(vanilla[j]), "reweighted": float(reweighted[j])} for j in range(M)]


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return path
