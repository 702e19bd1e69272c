"""Command line: ``hessalign {train,verify,attack,fgsm,gen-data,repro}``.

Exit codes: 0 success, 1 oracle or recipe-band failure, 2 configuration or
input error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def parse_seeds(text: str) -> list[int]:
    """``"0,1,5"`` or ``"0-9"`` or a mix of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo_i, hi_i + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hessalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hessalign {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--seeds", help="override seeds, e.g. 0-9 or 0,3,7")
    t.add_argument("--parallel", type=int, default=1, help="worker processes (capped by HESSALIGN_THREADS)")

    sub.add_parser("verify", help="run the oracle suite")

    for name in ("attack", "fgsm"):
        a = sub.add_parser(name, help=f"{name} sweep against a trained checkpoint")
        a.add_argument("--checkpoint", required=True)
        a.add_argument("--config", required=True)
        a.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="write the generated environments to JSON")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", help="override seeds")
    r = sub.add_parser("repro", help="run a reproduction recipe and check its bands")
    r.add_argument("--recipe", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--check-only", action="store_true", help="skip training, check existing outputs")
    r.add_argument("--parallel", type=int, default=1)
    return p


def _err(msg: str) -> None:
    print(f"hessalign: error: {msg}", file=sys.stderr)


def cmd_train(args) -> int:
    from .experiment import run_experiment
    from .training import DivergenceError

    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    out = Path(args.out or cfg.output_dir)
    try:
        agg = run_experiment(cfg, out, seeds, args.parallel)
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    acc = agg["aggregate"].get("final.test_accuracy")
    if acc:
        print(f"{len(agg['seeds'])} run(s) -> {out}: test accuracy {acc['mean']:.4f} +/- {acc['std']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    return verify.main()


def _eval_cmd(args, fn) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    res = fn(cfg, ckpt, Path(args.out))
    for row in res["rows"]:
        print("  ".join(f"{k}={v:.6g}" for k, v in row.items()))
    return EXIT_OK


def cmd_attack(args) -> int:
    from .experiment import run_attack

    return _eval_cmd(args, run_attack)


def cmd_fgsm(args) -> int:
    from .experiment import run_fgsm

    return _eval_cmd(args, run_fgsm)


def cmd_gen_data(args) -> int:
    from .config import version_stamp
    from .environments import save_environment_set
    from .experiment import build_envs

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in parse_seeds(args.seeds) if args.seeds else cfg.seeds():
        path = out / f"data_{seed}.json"
        save_environment_set(path, build_envs(cfg, seed), {"config": cfg.identity(), "version": version_stamp(), "seed": seed})
        print(path)
    return EXIT_OK


def cmd_repro(args) -> int:
    from .repro import check_recipe, load_recipe, run_recipe

    recipe = load_recipe(args.recipe)
    out = Path(args.out)
    elapsed = None if args.check_only else run_recipe(recipe, out, args.parallel)
    report = check_recipe(recipe, out, elapsed)
    text = report.markdown()
    (out / "report.md").write_text(text)
    print(text)
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "attack": cmd_attack, "fgsm": cmd_fgsm, "gen-data": cmd_gen_data,
            "repro": cmd_repro}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
