"""Command-line entry point.

Relative output paths are placed under the output root, which defaults to
``./runs`` and can be moved with the ``SEDKIT_OUTPUT_ROOT`` environment
variable. Relative input paths are looked up in the working directory first
and then under the output root.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

import sedkit
from sedkit import synthdata
from sedkit.config import SCHEMA_VERSION, ConfigError, RunConfig, dump_config, load_config, to_dict
from sedkit.detector import CheckpointVersionError, load_checkpoint
from sedkit.geometry import InvalidBoxError

log = logging.getLogger("sedkit")

ENV_OUTPUT_ROOT = "SEDKIT_OUTPUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ANALYSES = ("size-cdf", "pseudo-pr", "score-distance", "grad-profile")
SPLITS = ("labeled", "unlabeled", "test", "all")
RUN_MANIFEST = "run.json"


class ValidationError(Exception):
    """Bad user input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# paths


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT) or "runs")


def out_path(p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else output_root() / p


def in_path(p, what: str) -> Path:
    p = Path(p)
    for cand in (p, out_path(p)):
        if cand.exists():
            return cand
    raise ValidationError(f"{what} not found: {p}")


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(in_path(path, "config file"))


def _dataset(manifest):
    path = in_path(manifest, "dataset manifest")
    if path.is_dir():
        path = in_path(path / "manifest.json", "dataset manifest")
    return synthdata.dataset_from_manifest(path), path


def _scenes(ds, split: str):
    if split == "all":
        return ds.labeled + ds.unlabeled + ds.test
    return getattr(ds, split)


def _checkpoint_params(path, group: str):
    groups, arch, meta = load_checkpoint(in_path(path, "checkpoint"))
    if group not in groups:
        raise ValidationError(f"checkpoint has no '{group}' parameters (found {', '.join(sorted(groups))})")
    return groups[group], arch, meta


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def code_version() -> str:
    return f"sedkit {sedkit.__version__} ({sedkit.BACKEND} kernels)"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synthdata.write_manifest(cfg.data, out / "manifest.json")
    dump_config(cfg, out / "config.yaml")
    n_lab, n_unl, n_test = synthdata.split_counts(cfg.data)
    if args.export:
        ds = synthdata.generate_dataset(cfg.data)
        for split in ("labeled", "unlabeled", "test"):
            for scene in getattr(ds, split):
                synthdata.export_scene(scene, out / "scenes" / split)
    print(f"scenes {len(manifest['scenes'])}: labeled {n_lab} unlabeled {n_unl} test {n_test}")
    print(f"manifest {out / 'manifest.json'}")
    return EXIT_OK


@dataclasses.dataclass
class RunManifest:
    config: dict
    schema_version: int
    code_version: str
    seed: int
    output_dir: str
    data_manifest: str
    artifacts: dict

    def write(self, path: Path) -> Path:
        return _write_json(path, dataclasses.asdict(self))


def cmd_train(args) -> int:
    from sedkit.trainer import read_metrics, train

    cfg = _load_run_config(args.config)
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    ds, manifest_path = _dataset(args.data)
    if ds.config != cfg.data:
        raise ValidationError("dataset manifest was generated with different dataset settings than the config")
    out = out_path(args.out)
    run_file = out / RUN_MANIFEST
    if run_file.exists() and not args.resume:
        raise ValidationError(f"{out} already holds a run; pass --resume or choose another --out")
    if args.resume and run_file.exists():
        previous = json.loads(run_file.read_text())
        if previous.get("config") != to_dict(cfg):
            raise ValidationError("--resume with a config that differs from the stored run")
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=to_dict(cfg), schema_version=SCHEMA_VERSION, code_version=code_version(),
        seed=cfg.train.seed, output_dir=str(out), data_manifest=str(manifest_path.resolve()),
        artifacts={"config": "config.yaml", "metrics_log": "metrics.jsonl",
                   "last_checkpoint": "last.ckpt", "final_checkpoint": "final.ckpt",
                   "summary": "summary.json"},
    )
    manifest.write(run_file)
    dump_config(cfg, out / "config.yaml")
    tcfg = cfg.train_config()
    t0 = time.time()
    result = train(tcfg, cfg.arch, ds.labeled, [s.image for s in ds.unlabeled], out,
                   eval_scenes=ds.test if tcfg.eval_interval else None, resume=args.resume,
                   stop_after=args.stop_after)
    if result.iterations < tcfg.iterations:
        print(f"stopped at iteration {result.iterations}; continue with --resume")
        return EXIT_OK
    last = read_metrics(result.metrics_log)[-1]
    _write_json(out / "summary.json", {"mode": cfg.mode, "iterations": result.iterations,
                                       "final_loss": last["total"], "seconds": round(time.time() - t0, 1),
                                       "periodic_eval": result.evals})
    missing = [k for k, v in manifest.artifacts.items() if not (out / v).exists()]
    if missing:
        raise RuntimeError(f"run finished without artifacts: {missing}")
    print(f"trained {cfg.mode} for {result.iterations} iterations; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from sedkit.evaluation import evaluate, multiscale_report, write_csv

    params, arch, _ = _checkpoint_params(args.checkpoint, args.group)
    ds, _ = _dataset(args.data)
    if arch.num_classes != ds.config.num_classes:
        raise ValidationError("checkpoint and dataset disagree on the number of classes")
    scenes = _scenes(ds, args.split)
    report = evaluate(params, scenes, arch, args.score_thr, args.nms_thr)
    rows = [{"split": args.split, "scale": "single", **report.as_row()}]
    if args.multiscale:
        scales = tuple(args.scales)
        if any(s <= 0 for s in scales):
            raise ValidationError("--scales must be positive")
        rows += [{"split": args.split, **r}
                 for r in multiscale_report(params, scenes, arch, scales, args.nms_thr, args.score_thr)]
    path = write_csv(out_path(args.out), rows)
    for r in rows:
        print(f"{r['scale']:>9s}  AP50 {r['AP50']:.4f}  AP75 {r['AP75']:.4f}  AP {r['AP']:.4f}")
    for flag in report.flags:
        log.warning(flag)
    print(f"wrote {path}")
    return EXIT_OK


def _analysis_rows(name, args, ds):
    from sedkit import evaluation as ev

    split = args.split or {"size-cdf": "all", "pseudo-pr": "unlabeled",
                           "score-distance": "test", "grad-profile": "unlabeled"}[name]
    scenes = _scenes(ds, split)
    if name == "size-cdf":
        sizes, frac = synthdata.size_cdf(scenes)
        rows = [{"size": float(a), "fraction": float(b)} for a, b in zip(sizes, frac)]
        return rows, {"split": split, "boxes": int(sum(len(s.boxes) for s in scenes))}
    params, arch, _ = _checkpoint_params(args.checkpoint, args.group)
    if name == "pseudo-pr":
        curves = ev.pseudo_label_pr(params, scenes, arch)
        rows = [{"iou": c.iou, "threshold": float(t), "precision": p, "recall": r}
                for c in curves for t, p, r in zip(c.thresholds, c.precision, c.recall)]
        return rows, {"split": split, "flags": [f for c in curves for f in c.flags]}
    if name == "score-distance":
        h = ev.score_distance_hist(params, scenes, arch, args.scale_exp, args.bins)
        rows = [{"bin": j, "d_lo": float(h.edges[j]), "d_hi": float(h.edges[j + 1]),
                 "fg": int(h.fg_counts[j]), "bg": int(h.bg_counts[j]),
                 "fg_bg_ratio": float(h.ratio[j])} for j in range(len(h.fg_counts))]
        return rows, {"split": split, "mean_distance": h.mean_distance, "total": h.total}
    rows = ev.scale_gradient_profile(params, [s.image for s in scenes], arch, args.scale_exp, args.bins)
    return rows, {"split": split, "samples": int(sum(r["count"] for r in rows))}


def cmd_analyze(args) -> int:
    from sedkit.evaluation import write_csv

    unknown = [n for n in args.names if n not in ANALYSES]
    if unknown:
        raise ValidationError(f"unknown analysis {', '.join(unknown)}; valid options: {', '.join(ANALYSES)}")
    if args.checkpoint is None and any(n != "size-cdf" for n in args.names):
        raise ValidationError("--checkpoint is required for every analysis except size-cdf")
    ds, _ = _dataset(args.data)
    out = out_path(args.out)
    summary = {}
    for name in args.names:
        rows, info = _analysis_rows(name, args, ds)
        path = write_csv(out / f"{name}.csv", rows)
        summary[name] = {"csv": path.name, "rows": len(rows), **info}
        print(f"{name}: {len(rows)} rows -> {path}")
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def _read_predictions(path):
    try:
        data = json.loads(in_path(path, "prediction file").read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc

    def item(rec):
        if not isinstance(rec, dict) or "probs" not in rec or "box" not in rec:
            raise ValidationError(f"{path}: each prediction needs 'probs' and 'box'")
        return (np.asarray(rec["probs"], dtype=np.float64), np.asarray(rec["box"], dtype=np.float64))

    if not isinstance(data, list) or not data:
        raise ValidationError(f"{path}: expected a nonempty list of predictions")
    if isinstance(data[0], list):
        return [[item(r) for r in part] for part in data], True
    return [item(r) for r in data], False


def cmd_match_demo(args) -> int:
    from sedkit.matcher import match_predictions

    p1, b1 = _read_predictions(args.preds1)
    p2, b2 = _read_predictions(args.preds2)
    if b1 != b2:
        raise ValidationError("one prediction file is batched and the other is not")
    try:
        result = match_predictions(p1, p2, args.lambda_iou)
    except (ValueError, InvalidBoxError) as exc:
        raise ValidationError(str(exc)) from exc
    items = result if b1 else [result]
    out = []
    for k, (pairs, total) in enumerate(items):
        out.append({"item": k, "pairs": [list(p) for p in pairs], "total_cost": total})
        print(f"item {k}: pairs {[tuple(p) for p in pairs]} total cost {total:.6f}")
    if args.out:
        print(f"wrote {_write_json(out_path(args.out), out)}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from sedkit.gradcheck import run_grad_check

    t0 = time.time()
    try:
        results = run_grad_check(args.seed, args.h, args.per_tensor, args.terms)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    ok = True
    for r in results:
        good = r.max_rel_err < args.tol
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} {r.name:28s} max rel err {r.max_rel_err:.2e} over {r.checked} coords")
    print(f"{time.time() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from sedkit.trainer import MODES

    p = _Parser(prog="sedkit", description="Scale-equivalent distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a dataset manifest")
    g.add_argument("--config", help="YAML run config (default: built-in defaults)")
    g.add_argument("--out", default="data", help="output directory")
    g.add_argument("--export", action="store_true", help="also write every scene as .npy + .json")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config")
    t.add_argument("--data", default="data/manifest.json", help="dataset manifest (or its directory)")
    t.add_argument("--out", default="run")
    t.add_argument("--mode", choices=MODES, help="override the config's ablation mode")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--stop-after", type=int, help="stop after this many iterations (resumable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP/AR report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="data/manifest.json")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--group", default="student", help="parameter group to evaluate")
    e.add_argument("--multiscale", action="store_true", help="add per-scale and ensemble rows")
    e.add_argument("--scales", type=float, nargs="+", default=[0.5, 1.0, 1.5])
    e.add_argument("--score-thr", type=float, default=0.05)
    e.add_argument("--nms-thr", type=float, default=0.5)
    e.add_argument("--out", default="eval.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help=f"diagnostic CSVs: {', '.join(ANALYSES)}")
    a.add_argument("names", nargs="+", metavar="NAME")
    a.add_argument("--checkpoint")
    a.add_argument("--data", default="data/manifest.json")
    a.add_argument("--split", choices=SPLITS)
    a.add_argument("--group", default="student")
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--scale-exp", type=int, default=1, help="downsampling exponent s")
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("match-demo", help="match two prediction files")
    m.add_argument("preds1")
    m.add_argument("preds2")
    m.add_argument("--lambda-iou", type=float, default=1.0)
    m.add_argument("--out", help="write the matching as JSON")
    m.set_defaults(func=cmd_match_demo)

    c = sub.add_parser("grad-check", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--per-tensor", type=int, default=4)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--terms", nargs="+")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, synthdata.DatasetConfigError, CheckpointVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
