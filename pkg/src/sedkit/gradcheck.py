"""Central finite-difference check of every training loss term.

A tiny float64 detector is evaluated on random images. For each term the
tape gradient is compared with ``(f(x + h) - f(x - h)) / 2h`` on a sample of
coordinates per parameter tensor (always including the largest-gradient
entry). Stop-gradient targets are held at their unperturbed values during
the difference quotients, which is the function the tape differentiates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from sedkit.augment import downsample
from sedkit.detector import (ArchConfig, assign_targets, backward, bind, forward, init_params,
                             make_layout, param_count, stack_assignments)
from sedkit.losses import scale_consistency_loss, self_distill_loss, supervised_loss, total_loss

TINY_ARCH = ArchConfig(num_classes=3, stem_channels=(4, 8), level_channels=(8, 8, 8), head_channels=8)


@dataclass
class TermResult:
    name: str
    max_rel_err: float
    checked: int
    value: float


def _problem(seed: int = 0, image_size: int = 32, batch: int = 2):
    rng = np.random.default_rng(seed)
    arch = TINY_ARCH
    params = init_params(arch, seed, dtype=np.float64)
    # zero biases over dead inputs would put ReLUs exactly on their kink
    for k in params:
        if k.endswith(".b") and k != "cls.b":
            params[k] = rng.uniform(0.05, 0.15, size=params[k].shape)
    # larger heads so the class scores are far from uniform
    params["cls.w"] *= 20.0
    params["reg.w"] *= 10.0
    teacher = init_params(arch, seed + 1, dtype=np.float64)
    teacher["cls.w"] *= 40.0
    teacher["cls.b"][-1] = 0.0
    images = rng.uniform(0, 1, size=(batch, image_size, image_size, 3))
    weak = np.clip(images + rng.normal(0, 0.05, size=images.shape), 0, 1)
    layout = make_layout(arch, image_size, image_size)
    boxes = [np.array([[2.0, 3.0, 14.0, 13.0], [10.0, 8.0, 30.0, 30.0]]),
             np.array([[4.0, 16.0, 12.0, 26.0]])]
    labels = [np.array([0, 2]), np.array([1])]
    assign = stack_assignments([assign_targets(layout, b, l, arch.num_classes)
                                for b, l in zip(boxes[:batch], labels[:batch])])
    return arch, params, teacher, images, weak, assign


def loss_terms(arch, params, teacher, images, weak, assign, s: int = 1) -> dict:
    """Name -> ``(fn, fd_fn)`` closures mapping bound parameters to a scalar loss.

    ``fn`` is the training-time call; ``fd_fn`` evaluates the same value with
    every stop-gradient target frozen at ``params``.
    """
    t_out = forward(teacher, weak, arch)
    small = downsample(images, s)
    frozen = (forward(params, images, arch), forward(params, small, arch))

    def sup(i):
        f = lambda p: supervised_loss(forward(p, images, arch), assign)[i]
        return f, f

    def scale(i, rw):
        def f(p, targets=None):
            return scale_consistency_loss(forward(p, images, arch), forward(p, small, arch), s, rw,
                                          targets=targets)[i]
        return f, lambda p: f(p, frozen)

    def distill(i, mode, rw):
        f = lambda p: self_distill_loss(t_out, forward(p, images, arch), mode, reweight=rw)[i]
        return f, f

    def composite(p, targets=None):
        full = forward(p, images, arch)
        sc = scale_consistency_loss(full, forward(p, small, arch), s, True, targets=targets)[:2]
        di = self_distill_loss(t_out, full, "soft", reweight=True)[:2]
        return total_loss(supervised_loss(full, assign), sc, di, n_u=2, n_s=2)[0]

    return {
        "supervised_cls": sup(0),
        "supervised_reg": sup(1),
        "scale_cls": scale(0, False),
        "scale_cls_reweighted": scale(0, True),
        "scale_reg": scale(1, True),
        "distill_cls": distill(0, "soft", False),
        "distill_cls_reweighted": distill(0, "soft", True),
        "distill_reg": distill(1, "soft", True),
        "distill_hard_cls_reweighted": distill(0, "hard", True),
        "distill_hard_reg": distill(1, "hard", True),
        "composite": (composite, lambda p: composite(p, frozen)),
    }


def check_term(fn, params: dict, h: float = 1e-5, per_tensor: int = 4, seed: int = 0,
               floor: float = 1e-6, fd_fn=None) -> tuple[float, int, float]:
    """Max relative error ``|a - n| / max(|a|, |n|, floor)`` over sampled coordinates.

    ``fd_fn`` (default ``fn``) is used for the difference quotients.
    """
    fd_fn = fn if fd_fn is None else fd_fn
    rng = np.random.default_rng(seed)
    leaves = bind(params)
    loss = fn(leaves)
    grads = backward(loss, leaves)
    worst, checked = 0.0, 0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        picks = {int(np.argmax(np.abs(g)))}
        picks.update(int(i) for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False))
        for i in sorted(picks):
            old = flat[i]
            flat[i] = old + h
            fp = float(fd_fn(bind(params, False)).data)
            flat[i] = old - h
            fm = float(fd_fn(bind(params, False)).data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked, float(loss.data)


def run_grad_check(seed: int = 0, h: float = 1e-5, per_tensor: int = 4, terms=None) -> list[TermResult]:
    arch, params, teacher, images, weak, assign = _problem(seed)
    if param_count(arch) > 5000:
        raise RuntimeError("gradient-check model exceeds 5k parameters")
    fns = loss_terms(arch, params, teacher, images, weak, assign)
    if terms is not None:
        unknown = sorted(set(terms) - set(fns))
        if unknown:
            raise ValueError(f"unknown loss term(s) {unknown}; choose from {sorted(fns)}")
        fns = {k: fns[k] for k in terms}
    out = []
    for name, (fn, fd_fn) in fns.items():
        err, n, value = check_term(fn, params, h, per_tensor, seed, fd_fn=fd_fn)
        out.append(TermResult(name, err, n, value))
    return out


if __name__ == "__main__":
    t0 = time.time()
    for r in run_grad_check():
        print(f"{r.name:30s} err {r.max_rel_err:.2e} n {r.checked} value {r.value:.4f}")
    print(f"{time.time() - t0:.1f}s, {param_count(TINY_ARCH)} params")
