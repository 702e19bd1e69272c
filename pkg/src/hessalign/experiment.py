"""Multi-seed experiment runner and the on-disk output layout.

    outdir/run_<seed>/metrics.csv
    outdir/run_<seed>/summary.json
    outdir/run_<seed>/checkpoint.json
    outdir/aggregate.json

Every file carries the resolved config and a version stamp.  Wall-clock
times are logged but never written, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

from .config import ExperimentConfig, version_stamp
from .environments import EnvironmentSet, build_cmnist, generate_synthetic, load_mnist_idx
from .evaluation import aggregate_runs, fgsm_eval, transfer_attack
from .model import init_params, load_checkpoint, save_checkpoint
from .training import metrics_csv, run_summary, train

log = logging.getLogger("hessalign")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def header(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.identity(), "version": version_stamp()}


@lru_cache(maxsize=2)
def _mnist(images_path: str, labels_path: str):
    return load_mnist_idx(images_path, labels_path)


def build_envs(cfg: ExperimentConfig, seed: int) -> EnvironmentSet:
    d = cfg.data
    if d.kind == "synthetic":
        return generate_synthetic(d.train, d.test, seed_offset=seed)
    digits, labels = _mnist(d.images_path, d.labels_path)
    return build_cmnist(digits, labels, d.train, d.test, seed_offset=seed)


def run_one(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    """Train one seed and write its run directory; returns the summary dict."""
    envs = build_envs(cfg, seed)
    params, head = init_params(cfg.model.layer_sizes, seed, cfg.model.activation)
    tc = cfg.train_config(seed)

    def progress(rec):
        log.debug("seed %d step %d test_acc %.4f (%.1fs)", seed, rec.step, rec.test_accuracy, rec.wall_time)

    result = train(envs, params, head, tc, log=progress)
    run_dir = out / f"run_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    h = header(cfg)
    lines = [f"config: {json.dumps(h['config'], sort_keys=True)}", f"version: {json.dumps(h['version'], sort_keys=True)}", f"seed: {seed}"]
    (run_dir / "metrics.csv").write_text(metrics_csv(result.records, lines))
    summary = run_summary(result, tc)
    dump_json(run_dir / "summary.json", {**h, "seed": seed, "summary": summary})
    save_checkpoint(run_dir / "checkpoint.json", result.params, result.head, {**h, "seed": seed})
    log.info("seed %d done: test accuracy %.4f", seed, summary["final"]["test_accuracy"])
    return summary


def _worker(args):
    cfg, seed, out = args
    return run_one(cfg, seed, Path(out))


def thread_cap() -> int:
    env = os.environ.get("HESSALIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer HESSALIGN_THREADS=%r", env)
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, out, seeds: list[int] | None = None, parallel: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else cfg.seeds()
    workers = max(1, min(parallel, thread_cap(), len(seeds)))
    if workers == 1:
        summaries = [run_one(cfg, s, out) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_worker, [(cfg, s, str(out)) for s in seeds]))
    agg = {**header(cfg), "seeds": seeds, "aggregate": aggregate_runs(summaries)}
    dump_json(out / "aggregate.json", agg)
    return agg


# ---------------------------------------------------------------------------
# evaluation commands


def _csv(rows: list[dict], meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# config: {json.dumps(meta['config'], sort_keys=True)}\n")
    buf.write(f"# version: {json.dumps(meta['version'], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
    return buf.getvalue()


def _checkpoint_envs(cfg: ExperimentConfig, checkpoint):
    params, head, meta = load_checkpoint(checkpoint)
    seed = int(meta.get("seed", cfg.seed_base))
    return params, head, seed, build_envs(cfg, seed)


def run_attack(cfg: ExperimentConfig, checkpoint, out) -> dict:
    params, head, seed, envs = _checkpoint_envs(cfg, checkpoint)
    rows, details = [], []
    for delta in cfg.attack.deltas:
        res = transfer_attack(params, head, envs.train, envs.test[1], cfg.attack.config(delta))
        rows.append({"delta": float(delta), "worst_gap": res.worst_gap, "test_accuracy_at_worst": res.test_accuracy_at_worst,
                     "clean_test_accuracy": res.clean_test_accuracy, "max_radius": res.max_radius})
        details.append({"delta": float(delta), **res.to_dict()})
    meta = header(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "attack.json", {**meta, "seed": seed, "checkpoint": Path(checkpoint).name, "results": details})
    (out / "attack.csv").write_text(_csv(rows, meta))
    return {"seed": seed, "rows": rows}


def run_fgsm(cfg: ExperimentConfig, checkpoint, out) -> dict:
    params, head, seed, envs = _checkpoint_envs(cfg, checkpoint)
    clip = "data" if cfg.fgsm.clip == "data" else None
    accs = fgsm_eval(params, head, envs.test[1], cfg.fgsm.epsilons, clip=clip)
    rows = [{"epsilon": float(e), "test_accuracy": a} for e, a in zip(cfg.fgsm.epsilons, accs)]
    meta = header(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "fgsm.json", {**meta, "seed": seed, "checkpoint": Path(checkpoint).name, "results": rows})
    (out / "fgsm.csv").write_text(_csv(rows, meta))
    return {"seed": seed, "rows": rows}
