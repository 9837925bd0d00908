"""End-to-end acceptance checks, one test per criterion.

Criteria 6 to 10 share one session fixture that trains the supervised
baseline and three SED variants on the default toy dataset for three seeds.
Each test prints a single pass/fail line; the lines are repeated in the
terminal summary.
"""
import filecmp
from fractions import Fraction
import itertools
import math
import time

import numpy as np
import pytest

from conftest import random_boxes, record_acceptance
from sedkit.detector import ArchConfig
from sedkit.ema import EMASchedule, TeacherState, current_alpha, ema_update
from sedkit.evaluation import compute_ap, evaluate, multiscale_ensemble, multiscale_report, score_distance_hist
from sedkit.geometry import nms_indices, iou
from sedkit.gradcheck import run_grad_check
from sedkit.losses import GradHistogram, reweight_factors, reweighted_mean
from sedkit.matcher import assignment_cost, solve_assignment
from sedkit.synthdata import DatasetConfig, generate_dataset
from sedkit.trainer import TrainConfig, apply_mode, train
from sedkit.detector import predict_detections
from test_evaluation import micro_scene, oracle_ap50
from test_geometry import reference_nms

SEEDS = (0, 1, 2)
MODES = ("supervised", "sed", "sed-hard", "sed-no-reweight")


# ---------------------------------------------------------------------------
# oracles and identities


def test_criterion_01_gradient_exactness():
    t0 = time.time()
    results = run_grad_check()
    elapsed = time.time() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    names = {r.name for r in results}
    ok = (worst.max_rel_err < 1e-4 and elapsed < 120
          and {"supervised_cls", "supervised_reg", "scale_cls", "scale_reg", "distill_cls", "distill_reg",
               "scale_cls_reweighted", "distill_cls_reweighted", "composite"} <= names)
    record_acceptance(1, ok, f"{len(results)} terms, max rel err {worst.max_rel_err:.2e} ({worst.name}), "
                             f"{elapsed:.1f}s")
    assert ok


def _brute_min(cost, perms):
    n = cost.shape[0]
    sums = cost[np.arange(n), perms].sum(axis=1)
    near = perms[sums <= sums.min() + 1e-9]
    return min(math.fsum(cost[np.arange(n), p]) for p in near)


def test_criterion_02_assignment_oracle():
    rng = np.random.default_rng(2024)
    bad = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        for _ in range(200):
            cost = rng.uniform(0, 10, size=(n, n))
            if assignment_cost(cost, solve_assignment(cost)) != _brute_min(cost, perms):
                bad += 1
    record_acceptance(2, bad == 0, f"1200 matrices (n = 2..7), {bad} mismatches against brute force")
    assert bad == 0


def test_criterion_03_nms_and_ap_oracles():
    rng = np.random.default_rng(99)
    nms_bad = 0
    for _ in range(200):
        n = int(rng.integers(1, 21))
        boxes = random_boxes(rng, n, 60.0)
        scores = rng.uniform(size=n)
        labels = rng.integers(0, 3, size=n)
        thr = float(rng.uniform(0.1, 0.9))
        ref = reference_nms([tuple(b) for b in boxes], scores.tolist(), labels.tolist(), thr)
        nms_bad += nms_indices(boxes, scores, labels, thr).tolist() != ref
    ap_bad = 0
    for _ in range(100):
        scenes = [micro_scene(rng) for _ in range(int(rng.integers(1, 4)))]
        dets, gts = [d for d, _ in scenes], [g for _, g in scenes]
        got = compute_ap(dets, gts, 2, iou_thrs=(0.5,)).ap50
        ap_bad += abs(got - float(oracle_ap50(dets, gts, 2))) > 1e-12
    ok = nms_bad == 0 and ap_bad == 0
    record_acceptance(3, ok, f"nms {200 - nms_bad}/200 match, AP {100 - ap_bad}/100 match")
    assert ok


def test_criterion_04_reweighting_identities():
    rng = np.random.default_rng(5)
    bins_ok = True
    for _ in range(50):
        g = rng.uniform(0, 1, size=int(rng.integers(1, 500))) ** 3
        M = int(rng.integers(1, 16))
        h = GradHistogram.build(g, M)
        idx = h.bin_index(g)
        # exact rational identity over the implementation's own bin counts
        bins_ok &= all(sum(Fraction(1, int(h.counts[j])) for _ in range(int((idx == j).sum()))) == 1
                       for j in np.unique(idx))
        # and every float weight is the correctly rounded 1 / (M R)
        w = reweight_factors(g, M)
        bins_ok &= all(w[i] == float(Fraction(1, M * int(h.counts[idx[i]]))) for i in range(len(g)))
    kl = rng.uniform(0, 3, size=300)
    m1 = abs(reweighted_mean(kl, rng.uniform(0, 1, 300), 1) - kl.mean())
    two = reweighted_mean([0.4, 0.6], [0.2, 0.7], 2)
    ok = bins_ok and m1 <= 1e-12 and two == pytest.approx(0.5, abs=1e-15)
    record_acceptance(4, ok, f"bin sums exact {bins_ok}, M=1 gap {m1:.1e}, 2-sample example {two}")
    assert ok


def test_criterion_05_ema_identities():
    rng = np.random.default_rng(8)
    student = {"w": rng.normal(size=(4, 4))}
    gap0 = rng.normal(size=(4, 4))
    worst = 0.0
    for alpha in (0.9, 0.99, 0.5):
        t = TeacherState({"w": student["w"] + gap0}, EMASchedule("none", alpha))
        for k in range(1, 200):
            ema_update(t, student, k)
            worst = max(worst, float(np.abs((t.params["w"] - student["w"]) - alpha ** k * gap0).max()))
    sched = EMASchedule("step", 0.99, 0.9, milestone=2400, total=3000)
    step_ok = current_alpha(sched, 2399) == 0.99 and current_alpha(sched, 2400) == 0.9
    default = TrainConfig().ema_schedule()
    default_ok = (default.policy, default.alpha_start, default.alpha_end) == ("step", 0.99, 0.9)
    ok = worst <= 1e-9 and step_ok and default_ok
    record_acceptance(5, ok, f"max |gap - alpha^k gap0| {worst:.1e}, step schedule {step_ok}, default {default_ok}")
    assert ok


# ---------------------------------------------------------------------------
# end-to-end experiments


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    arch = ArchConfig()
    out = {}
    for seed in SEEDS:
        data = generate_dataset(DatasetConfig(seed=seed))
        imgs = data.unlabeled_images()
        for mode in MODES:
            cfg = apply_mode(TrainConfig(seed=seed), mode)
            t0 = time.time()
            res = train(cfg, arch, data.labeled, imgs, root / f"{mode}_{seed}")
            report = evaluate(res.params, data.test, arch)
            elapsed = time.time() - t0
            dist = score_distance_hist(res.params, data.test, arch).mean_distance
            out[mode, seed] = {"ap50": report.ap50, "time": elapsed, "dist": dist, "params": res.params,
                               "dir": root / f"{mode}_{seed}", "cfg": cfg, "data": data}
            print(f"{mode:16s} seed {seed}: AP50 {report.ap50:.4f} distance {dist:.4f} ({elapsed:.0f}s)")
    return out


def _mean(exp, mode):
    return float(np.mean([exp[mode, s]["ap50"] for s in SEEDS]))


def test_criterion_06_end_to_end_trend(experiments):
    sup, sed = _mean(experiments, "supervised"), _mean(experiments, "sed")
    runtime = sum(experiments[m, s]["time"] for m in ("supervised", "sed") for s in SEEDS)
    ok = sed - sup >= 0.05 and runtime <= 15 * 60
    record_acceptance(6, ok, f"AP50 seed-mean SED {sed:.4f} vs supervised {sup:.4f} "
                             f"(+{100 * (sed - sup):.2f} points), runtime {runtime / 60:.1f} min")
    assert ok


def test_criterion_07_ablation_ordering(experiments):
    soft, hard, sup = _mean(experiments, "sed"), _mean(experiments, "sed-hard"), _mean(experiments, "supervised")
    wins = sum(experiments["sed", s]["ap50"] > experiments["sed-hard", s]["ap50"] for s in SEEDS)
    ok = soft >= hard >= sup and wins >= 2
    record_acceptance(7, ok, f"soft {soft:.4f}, hard {hard:.4f}, supervised {sup:.4f}; soft > hard in {wins}/3 seeds")
    assert ok


def test_criterion_08_scale_consistency_effect(experiments):
    pairs = [(experiments["sed", s]["dist"], experiments["supervised", s]["dist"]) for s in SEEDS]
    ok = all(a < b for a, b in pairs)
    record_acceptance(8, ok, "mean score distance SED vs supervised: "
                      + ", ".join(f"{a:.4f} < {b:.4f}" if a < b else f"{a:.4f} !< {b:.4f}" for a, b in pairs))
    assert ok


def test_criterion_09_reweighting_effect(experiments):
    rw, van = _mean(experiments, "sed"), _mean(experiments, "sed-no-reweight")
    ok = rw >= van
    record_acceptance(9, ok, f"AP50 seed-mean reweighted {rw:.4f} vs vanilla averaging {van:.4f}")
    assert ok


def test_criterion_10_multiscale(experiments):
    arch = ArchConfig()
    exp = experiments["sed", 0]
    scenes = exp["data"].test
    identical = all(multiscale_ensemble(exp["params"], s.image, arch, (1.0,))
                    == predict_detections(exp["params"], s.image, arch) for s in scenes)
    report = {}
    for mode in ("supervised", "sed"):
        rows = multiscale_report(experiments[mode, 0]["params"], scenes, arch, (0.5, 1.0, 1.5))
        report[mode] = {r["scale"]: r["AP50"] for r in rows}
    rows_ok = all(list(r) == ["0.5", "1", "1.5", "ensemble"] for r in report.values())
    gains = {m: report[m]["ensemble"] - report[m]["1"] for m in report}
    for m, r in report.items():
        print(f"multi-scale {m:10s} " + "  ".join(f"{k} {v:.4f}" for k, v in r.items())
              + f"  ensemble gain {100 * gains[m]:+.2f}")
    ok = identical and rows_ok
    record_acceptance(10, ok, f"{{1.0}} equals single-scale {identical}; per-scale and ensemble rows {rows_ok}; "
                              f"ensemble gain supervised {100 * gains['supervised']:+.2f}, "
                              f"SED {100 * gains['sed']:+.2f} points (informational)")
    assert ok


def test_criterion_11_determinism(experiments, tmp_path):
    exp = experiments["sed", 0]
    data = exp["data"]
    train(exp["cfg"], ArchConfig(), data.labeled, data.unlabeled_images(), tmp_path / "again")
    same = {f: filecmp.cmp(exp["dir"] / f, tmp_path / "again" / f, shallow=False)
            for f in ("metrics.jsonl", "final.ckpt")}
    ok = all(same.values())
    record_acceptance(11, ok, "rerun of SED seed 0: " + ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                                  for k, v in same.items()))
    assert ok
