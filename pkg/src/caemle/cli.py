"""Experiment runner.

    caemle run <config.ini>           run a pipeline for every configured seed
    caemle compare <base> <cand>      metric deltas between two results.json files
    caemle metrics <labels.csv>       ACC / NMI of a (y, c) label file

``run`` writes into the configured output directory (under $CAEMLE_OUTPUT_ROOT
when that is set and the path is relative)::

    results.json        config echo, per-seed metrics, aggregate mean/std
    summary.csv         one row per seed plus mean and std rows
    seed_<k>/           model.json + model.bin checkpoint, pretrain_loss.csv,
                        history.csv, labels.csv, centroids.csv, features.csv (deep_ifl)

Exit codes: 0 every seed succeeded, 2 some seed failed, 1 configuration error.
"""

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cae import build_cae, pretrain, save_model, write_loss_history
from .clustering import train_cae_mle, write_history
from .config import ConfigError, load_config
from .data import load_idx, load_mnist, load_usps, make_synthetic_blobs
from .ifl import deep_ifl, write_features
from .metrics import acc, nmi

log = logging.getLogger("caemle")

RESULTS_SCHEMA = "caemle-results/1"
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


@dataclass
class RunResult:
    config: dict
    dataset: str
    pipeline: str
    per_seed: list = field(default_factory=list)
    out_dir: str = None

    def aggregate(self):
        agg = {}
        for key in ("acc", "nmi", "final_L_r", "wall_time"):
            vals = [r[key] for r in self.per_seed if r.get(key) is not None and r.get("error") is None]
            agg[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            agg[f"{key}_std"] = float(np.std(vals)) if vals else None
        agg["n_ok"] = sum(1 for r in self.per_seed if r.get("error") is None)
        agg["n_failed"] = len(self.per_seed) - agg["n_ok"]
        return agg

    def to_json(self):
        return {"schema": RESULTS_SCHEMA, "version": __version__, "pipeline": self.pipeline,
                "dataset": self.dataset, "seeds": [r["seed"] for r in self.per_seed],
                "config": self.config, "per_seed": self.per_seed, "aggregate": self.aggregate()}


def load_dataset(spec):
    if spec.kind == "synthetic":
        ds = make_synthetic_blobs(spec.classes, spec.per_class, spec.image_size, spec.sigma, spec.data_seed)
    elif spec.kind == "mnist":
        ds = load_mnist(spec.path)
    elif spec.kind == "idx":
        ds = load_idx(spec.images, spec.labels)
    else:
        ds = load_usps(spec.path)
    if spec.limit and spec.limit < len(ds):
        idx = np.sort(np.random.default_rng(spec.limit_seed).choice(len(ds), spec.limit, replace=False))
        ds = ds.subset(idx, f"{ds.name}[{spec.limit}]")
    return ds


def _write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "label"])
        writer.writerows(enumerate(int(v) for v in labels))


def _write_matrix(path, mat):
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")


def run_seed(cfg, dataset, seed, out_dir):
    """One pipeline run; returns the per-seed record (never raises)."""
    seed_dir = Path(out_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    record = {"seed": seed, "acc": None, "nmi": None, "final_L_r": None, "error": None,
              "artifacts": {}}
    t0 = time.perf_counter()
    try:
        cae_cfg = cfg.cae_config(dataset.images.shape[1:], seed)
        clu_cfg = replace(cfg.clustering, seed=seed)
        images = dataset.images
        if cfg.pipeline == "deep_ifl":
            res = deep_ifl(images, cae_cfg, clu_cfg, replace(cfg.ifl, seed=seed))
            model, labels, final = res.final.model, res.labels, res.final
            write_features(seed_dir / "features.csv", res.features, res.folding.folds)
            write_features(seed_dir / "features_normalized.csv", res.normalized, res.folding.folds)
            record["artifacts"]["features"] = str(seed_dir / "features.csv")
            record["artifacts"]["features_normalized"] = str(seed_dir / "features_normalized.csv")
        else:
            model = build_cae(cae_cfg)
            pretrain(model, images)
            final, labels = None, None
            if cfg.pipeline == "cae_mle":
                final = train_cae_mle(model, images, clu_cfg)
                labels = final.labels
        write_loss_history(seed_dir / "pretrain_loss.csv", model.history)
        record["artifacts"]["pretrain_loss"] = str(seed_dir / "pretrain_loss.csv")
        ckpt_json, ckpt_bin = save_model(model, seed_dir / "model")
        record["artifacts"]["checkpoint"] = str(ckpt_json)
        record["artifacts"]["checkpoint_blob"] = str(ckpt_bin)
        record["final_L_r"] = float(model.history[-1]) if model.history else None
        if final is not None:
            write_history(seed_dir / "history.csv", final.history)
            _write_labels(seed_dir / "labels.csv", labels)
            _write_matrix(seed_dir / "centroids.csv", final.centroids)
            record["artifacts"].update(history=str(seed_dir / "history.csv"),
                                       labels=str(seed_dir / "labels.csv"),
                                       centroids=str(seed_dir / "centroids.csv"))
            record["iterations"] = final.iterations
            record["converged"] = final.converged
            if final.history:
                record["final_L_r"] = final.history[-1]["L_r"]
            if dataset.labels is not None:
                record["acc"] = float(acc(dataset.labels, labels))
                record["nmi"] = float(nmi(dataset.labels, labels))
    except Exception as exc:  # one failed seed must not stop the others
        log.error("seed %s failed: %s", seed, exc)
        record["error"] = f"{type(exc).__name__}: {exc}"
        record["traceback"] = traceback.format_exc()
    record["wall_time"] = time.perf_counter() - t0
    return record


def _seed_task(args):
    return run_seed(*args)


def run(config_path):
    """Execute a config file; returns ``(RunResult, exit code)``."""
    cfg = load_config(config_path)
    dataset = load_dataset(cfg.dataset)
    out_dir = cfg.output_path()
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(cfg.to_dict(), dataset.name, cfg.pipeline, out_dir=str(out_dir))
    tasks = [(cfg, dataset, seed, out_dir) for seed in cfg.seeds]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            result.per_seed = list(pool.map(_seed_task, tasks))
    else:
        result.per_seed = [_seed_task(t) for t in tasks]

    payload = result.to_json()
    (out_dir / "results.json").write_text(json.dumps(payload, indent=2))
    _write_summary(out_dir / "summary.csv", result)
    print(format_table(payload))
    failed = payload["aggregate"]["n_failed"]
    return result, EXIT_PARTIAL if failed else EXIT_OK


def _write_summary(path, result):
    agg = result.aggregate()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "acc", "nmi", "final_L_r", "wall_time", "error"])
        for r in result.per_seed:
            writer.writerow([r["seed"], r["acc"], r["nmi"], r["final_L_r"], r["wall_time"], r["error"] or ""])
        writer.writerow(["mean", agg["acc_mean"], agg["nmi_mean"], agg["final_L_r_mean"], agg["wall_time_mean"], ""])
        writer.writerow(["std", agg["acc_std"], agg["nmi_std"], agg["final_L_r_std"], agg["wall_time_std"], ""])


def _fmt(v, pct=True):
    if v is None:
        return "-"
    return f"{100 * v:.2f}" if pct else f"{v:.4g}"


def format_table(payload):
    agg = payload["aggregate"]
    lines = [f"{payload['pipeline']} on {payload['dataset']}",
             f"{'seed':>6} {'ACC':>8} {'NMI':>8} {'L_r':>10} {'time[s]':>9}"]
    for r in payload["per_seed"]:
        if r.get("error"):
            lines.append(f"{r['seed']:>6}  FAILED: {r['error']}")
            continue
        lines.append(f"{r['seed']:>6} {_fmt(r['acc']):>8} {_fmt(r['nmi']):>8} "
                     f"{_fmt(r['final_L_r'], False):>10} {r['wall_time']:>9.1f}")
    if agg["acc_mean"] is not None:
        lines.append(f"{'mean':>6} {_fmt(agg['acc_mean'])}±{_fmt(agg['acc_std'])} "
                     f"{_fmt(agg['nmi_mean'])}±{_fmt(agg['nmi_std'])}")
    return "\n".join(lines)


def compare(baseline, candidate):
    """Per-metric mean deltas (candidate minus baseline).

    Accepts result dicts or paths to results.json files. Raises ValueError
    when the two runs used different datasets or seeds.
    """
    a = _load_result(baseline)
    b = _load_result(candidate)
    if a["dataset"] != b["dataset"]:
        raise ValueError(f"dataset mismatch: {a['dataset']!r} vs {b['dataset']!r}")
    if sorted(a["seeds"]) != sorted(b["seeds"]):
        raise ValueError(f"seed mismatch: {a['seeds']} vs {b['seeds']}")
    deltas = {}
    for metric in ("acc", "nmi"):
        ma, mb = a["aggregate"].get(f"{metric}_mean"), b["aggregate"].get(f"{metric}_mean")
        deltas[metric] = None if ma is None or mb is None else mb - ma
    return {"baseline": a.get("pipeline"), "candidate": b.get("pipeline"),
            "dataset": a["dataset"], "seeds": a["seeds"], "delta": deltas}


def _load_result(obj):
    if isinstance(obj, dict):
        return obj
    data = json.loads(Path(obj).read_text())
    if data.get("schema") != RESULTS_SCHEMA:
        raise ValueError(f"{obj} is not a {RESULTS_SCHEMA} file")
    return data


def metrics_from_csv(path):
    """ACC and NMI from a CSV with ground truth in column 1 and clusters in column 2."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not rows[0][0].lstrip("-").isdigit():
        rows = rows[1:]
    y = np.array([int(r[0]) for r in rows])
    c = np.array([int(r[1]) for r in rows])
    return {"acc": float(acc(y, c)), "nmi": float(nmi(y, c)), "n": int(len(y))}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="caemle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the pipeline described by a config file")
    p_run.add_argument("config")
    p_cmp = sub.add_parser("compare", help="delta report between two results.json files")
    p_cmp.add_argument("baseline")
    p_cmp.add_argument("candidate")
    p_met = sub.add_parser("metrics", help="ACC/NMI for a CSV of (y, c) rows")
    p_met.add_argument("labels")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            _, code = run(args.config)
        except (ConfigError, FileNotFoundError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return code
    if args.command == "compare":
        try:
            report = compare(args.baseline, args.candidate)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for metric, d in report["delta"].items():
            print(f"{metric.upper()}: " + ("-" if d is None else f"{d:+.4f}"))
        return EXIT_OK
    try:
        res = metrics_from_csv(args.labels)
    except (ValueError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ACC {res['acc']:.4f}  NMI {res['nmi']:.4f}  (n={res['n']})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
