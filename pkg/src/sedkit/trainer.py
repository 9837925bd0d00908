"""Semi-supervised training loop: supervised burn-in, then joint labeled and
unlabeled steps with scale-consistency and self-distillation terms."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sedkit.augment import DEFAULT_AUG, AugConfig, apply_weak, downsample, sample_weak, strong_augment
from sedkit.detector import (
    ArchConfig, assign_targets, backward, bind, forward, init_params, load_checkpoint,
    make_layout, save_checkpoint, stack_assignments,
)
from sedkit.ema import EMASchedule, TeacherState, current_alpha, ema_update, init_teacher
from sedkit.losses import (
    scale_consistency_loss, self_distill_loss, supervised_loss, total_loss,
)

log = logging.getLogger(__name__)

MODES = ("supervised", "sed", "sed-no-reweight", "sed-hard", "scale-only", "distill-only")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    burn_in: int = 750             # 25% of the schedule
    n_s: int = 8
    n_u: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: tuple = (2400,)
    lr_gamma: float = 0.1
    lambda_s: float = 0.5
    lambda_d: float = 1.0
    max_scale_exp: int = 1          # s ~ U{1..S}
    reweight_scale: bool = True
    reweight_distill: bool = True
    hist_bins: int = 10
    distill_mode: str = "soft"
    tau: float = 0.7
    tau_bg: float = 0.3
    ema_policy: str = "step"
    ema_start: float = 0.99
    ema_end: float = 0.9
    ema_milestone: int = 2400
    sup_cls_norm: str = "foreground"  # anchors | foreground
    fg_thr: float = 0.5
    bg_thr: float = 0.4
    seed: int = 0
    eval_interval: int = 0          # 0 disables periodic evaluation
    checkpoint_interval: int = 500

    def validate(self) -> "TrainConfig":
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.burn_in <= self.iterations:
            raise ValueError("burn_in must lie in [0, iterations]")
        if self.n_s < 1 or self.n_u < 0:
            raise ValueError("need n_s >= 1 and n_u >= 0")
        if self.max_scale_exp < 1:
            raise ValueError("max_scale_exp must be >= 1")
        if self.distill_mode not in ("soft", "hard"):
            raise ValueError(f"unknown distill_mode {self.distill_mode!r}")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")
        self.ema_schedule().validate()
        return self

    def ema_schedule(self) -> EMASchedule:
        return EMASchedule(self.ema_policy, self.ema_start, self.ema_end,
                           self.ema_milestone, self.iterations)

    @property
    def unsupervised(self) -> bool:
        return self.burn_in < self.iterations and self.n_u > 0 and (self.lambda_s != 0 or self.lambda_d != 0)

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for m in self.lr_milestones if iteration >= m)
        return self.lr * self.lr_gamma ** drops


def apply_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    """Map an ablation name onto loss weights and flags."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    r = dataclasses.replace
    if mode == "supervised":
        return r(cfg, lambda_s=0.0, lambda_d=0.0)
    if mode == "sed-no-reweight":
        return r(cfg, reweight_scale=False, reweight_distill=False)
    if mode == "sed-hard":
        return r(cfg, distill_mode="hard")
    if mode == "scale-only":
        return r(cfg, lambda_d=0.0)
    if mode == "distill-only":
        return r(cfg, lambda_s=0.0)
    return cfg


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: dict
    lr: float


def init_optimizer(params: dict, lr: float) -> OptimizerState:
    return OptimizerState({k: np.zeros_like(v) for k, v in params.items()}, lr)


def sgd_step(params: dict, grads: dict, state: OptimizerState, momentum: float = 0.9,
             weight_decay: float = 1e-4):
    """``v = momentum * v + (g + wd * p)``; ``p = p - lr * v``, in place.

    Non-finite gradients abort the step before anything is modified.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients in {', '.join(sorted(bad))}; step aborted")
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        v = state.velocity[k]
        v *= p.dtype.type(momentum)
        v += g
        if weight_decay:
            v += p.dtype.type(weight_decay) * p
        p -= p.dtype.type(state.lr) * v
    return params, state


# ---------------------------------------------------------------------------
# data


def iteration_rngs(seed: int, iteration: int):
    """Independent labeled/unlabeled streams pre-assigned to each iteration."""
    return (np.random.default_rng([seed, iteration, 0]),
            np.random.default_rng([seed, iteration, 1]))


def _choose(rng, n_total: int, k: int) -> np.ndarray:
    return rng.choice(n_total, size=k, replace=k > n_total)


def labeled_batch(scenes, idx, rng, aug: AugConfig, fill: float):
    images, boxes, labels = [], [], []
    for i in idx:
        sc = scenes[int(i)]
        rec = sample_weak(rng, aug)
        img, bx = apply_weak(sc.image, sc.boxes, rec, fill)
        images.append(img)
        boxes.append(bx)
        labels.append(sc.labels)
    return np.stack(images), boxes, labels


def unlabeled_batch(images, idx, rng, aug: AugConfig, fill: float):
    """Weak views for the teacher and strong views of the same geometry."""
    weak, strong = [], []
    for i in idx:
        rec = sample_weak(rng, aug)
        w, _ = apply_weak(images[int(i)], np.zeros((0, 4)), rec, fill)
        weak.append(w)
        strong.append(strong_augment(w, rng, aug, fill))
    return np.stack(weak), np.stack(strong)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict
    teacher: TeacherState | None
    checkpoint: Path
    metrics_log: Path
    iterations: int
    evals: list = field(default_factory=list)


def _zero_pair():
    return (0.0, 0.0)


def train_step(cfg: TrainConfig, arch: ArchConfig, params: dict, teacher: TeacherState | None,
               labeled, unlabeled_images, iteration: int, aug: AugConfig, fill: float):
    """Forward/backward for one iteration. Returns ``(grads, LossReport, extras)``."""
    rng_l, rng_u = iteration_rngs(cfg.seed, iteration)
    leaves = bind(params)
    idx = _choose(rng_l, len(labeled), cfg.n_s)
    images, boxes, labels = labeled_batch(labeled, idx, rng_l, aug, fill)
    layout = make_layout(arch, images.shape[1], images.shape[2])
    assign = stack_assignments([assign_targets(layout, b, l, arch.num_classes, cfg.fg_thr, cfg.bg_thr)
                                for b, l in zip(boxes, labels)])
    sup = supervised_loss(forward(leaves, images, arch), assign, cfg.sup_cls_norm)
    scale, distill = _zero_pair(), _zero_pair()
    extras = {"s": 0}
    active = iteration >= cfg.burn_in and cfg.unsupervised
    if active:
        uidx = _choose(rng_u, len(unlabeled_images), cfg.n_u)
        weak, strong = unlabeled_batch(unlabeled_images, uidx, rng_u, aug, fill)
        s = int(rng_u.integers(1, cfg.max_scale_exp + 1))
        extras["s"] = s
        full = forward(leaves, strong, arch)
        if cfg.lambda_s:
            down = forward(leaves, downsample(strong, s), arch)
            c, r, _ = scale_consistency_loss(full, down, s, cfg.reweight_scale, cfg.hist_bins)
            scale = (c, r)
        if cfg.lambda_d:
            t_out = forward(teacher.params, weak, arch)
            c, r, _ = self_distill_loss(t_out, full, cfg.distill_mode, cfg.tau, cfg.tau_bg,
                                        cfg.reweight_distill, cfg.hist_bins)
            distill = (c, r)
    lam_s = cfg.lambda_s if active else 0.0
    lam_d = cfg.lambda_d if active else 0.0
    loss, report = total_loss(sup, scale, distill, cfg.n_u if active else 0, cfg.n_s, lam_s, lam_d)
    try:
        grads = backward(loss, leaves)
    except FloatingPointError as exc:
        raise FloatingPointError(f"iteration {iteration}: {exc}; components {report.as_dict()}") from exc
    return grads, report, extras


def _checkpoint(path, params, teacher, opt, arch, cfg, iteration):
    groups = {"student": params, "momentum": opt.velocity}
    if teacher is not None:
        groups["teacher"] = teacher.params
    meta = {"iteration": iteration, "lr": opt.lr, "train_config": config_dict(cfg),
            "teacher_last_update": teacher.last_update_iteration if teacher else None}
    save_checkpoint(path, groups, arch, meta)


def config_dict(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def _truncate_log(path: Path, upto: int) -> None:
    if not path.exists():
        return
    keep = []
    with open(path) as fh:
        for line in fh:
            if line.strip() and json.loads(line)["iter"] < upto:
                keep.append(line)
    with open(path, "w") as fh:
        fh.writelines(keep)


def train(cfg: TrainConfig, arch: ArchConfig, labeled, unlabeled_images, out_dir,
          aug: AugConfig = DEFAULT_AUG, fill: float | None = None, eval_scenes=None,
          resume: bool = False, stop_after: int | None = None) -> TrainResult:
    """Run (or resume) a training job writing into ``out_dir``.

    Args:
        cfg: optimisation and loss settings.
        arch: detector architecture.
        labeled: labeled scenes.
        unlabeled_images: plain images; their annotations never enter here.
        out_dir: receives ``metrics.jsonl``, ``last.ckpt`` and ``final.ckpt``.
        fill: padding value for geometric augmentation (default: mean
            intensity over labeled and unlabeled images).
        eval_scenes: optional held-out scenes for periodic AP@0.5.
        resume: continue from ``out_dir/last.ckpt`` if present.
        stop_after: stop (with a checkpoint) after this many iterations,
            simulating an interruption.
    """
    cfg.validate()
    if not labeled:
        raise ValueError("training needs at least one labeled scene")
    if cfg.unsupervised and not len(unlabeled_images):
        raise ValueError("unsupervised terms enabled but no unlabeled images given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    last = out_dir / "last.ckpt"
    if fill is None:
        imgs = [s.image for s in labeled] + list(unlabeled_images)
        fill = float(np.mean([float(im.mean(dtype=np.float64)) for im in imgs]))

    start = 0
    params = init_params(arch, cfg.seed)
    opt = init_optimizer(params, cfg.lr)
    teacher = None
    if resume and last.exists():
        groups, arch_ck, meta = load_checkpoint(last)
        if arch_ck != arch:
            raise ValueError("checkpoint architecture differs from the requested one")
        params = groups["student"]
        opt = OptimizerState(groups["momentum"], meta["lr"])
        if "teacher" in groups:
            teacher = TeacherState(groups["teacher"], cfg.ema_schedule().validate(),
                                   meta["teacher_last_update"])
        start = int(meta["iteration"])
        _truncate_log(log_path, start)
        log.info("resuming at iteration %d", start)
    elif log_path.exists():
        log_path.unlink()

    evals = []
    end = cfg.iterations if stop_after is None else min(cfg.iterations, start + stop_after)
    with open(log_path, "a") as fh:
        for it in range(start, end):
            if teacher is None and cfg.unsupervised and it >= cfg.burn_in:
                teacher = init_teacher(params, cfg.ema_schedule(), it - 1)
            opt.lr = cfg.lr_at(it)
            grads, report, extras = train_step(cfg, arch, params, teacher, labeled,
                                               unlabeled_images, it, aug, fill)
            sgd_step(params, grads, opt, cfg.momentum, cfg.weight_decay)
            alpha = None
            if teacher is not None:
                ema_update(teacher, params, it)
                alpha = current_alpha(teacher.schedule, it)
            rec = {"iter": it, "lr": opt.lr, "s": extras["s"], "alpha": alpha, **report.as_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            done = it + 1
            if cfg.eval_interval and eval_scenes is not None and done % cfg.eval_interval == 0:
                from sedkit.evaluation import evaluate
                r = evaluate(params, eval_scenes, arch)
                evals.append({"iter": done, "AP50": r.ap50})
                log.info("iter %d AP50 %.4f", done, r.ap50)
            if cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0 and done < end:
                fh.flush()
                _checkpoint(last, params, teacher, opt, arch, cfg, done)
    _checkpoint(last, params, teacher, opt, arch, cfg, end)
    final = out_dir / "final.ckpt"
    if end == cfg.iterations:
        _checkpoint(final, params, teacher, opt, arch, cfg, end)
    return TrainResult(params, teacher, final if end == cfg.iterations else last, log_path, end, evals)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def pretrained_from(path: os.PathLike, group: str = "student"):
    groups, arch, _ = load_checkpoint(path)
    return groups[group], arch
