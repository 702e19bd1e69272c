"""Reproduction recipes: named groups of runs plus expected metric bands.

A recipe file (YAML) looks like::

    name: correlation_shift
    budget_seconds: 300
    base: ../synthetic_correlation.yaml      # relative to the recipe file
    runs:
      erm:        {penalty: {method: erm, alpha: 0.0, beta: 0.0}}
      hutchinson: {penalty: {method: hutchinson}}
    bands:
      - metric: erm:final.test_accuracy
        min: 0.05
        max: 0.30
        tag: PAPER
        note: ERM latches onto the spurious color
      - metric: hutchinson:final.test_accuracy
        at_least: erm:final.test_accuracy
        offset: 0.30
        tag: PAPER

Each run is the base config deep-merged with its override block.  Metrics
are ``<run>:<dotted key>`` references into that run's ``aggregate.json``
(the mean is used), so a recipe can be checked long after it was trained.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, config_from_dict

TAGS = ("PAPER", "TRIVIAL", "DERIVED")


class RecipeError(ValueError):
    pass


@dataclass
class Band:
    metric: str
    tag: str
    min: float | None = None
    max: float | None = None
    at_least: str | None = None
    above: str | None = None
    offset: float = 0.0
    note: str = ""

    def __post_init__(self):
        if self.tag not in TAGS:
            raise RecipeError(f"band {self.metric!r}: tag must be one of {TAGS}, got {self.tag!r}")
        if self.at_least and self.above:
            raise RecipeError(f"band {self.metric!r}: use at_least or above, not both")
        if self.min is None and self.max is None and not (self.at_least or self.above):
            raise RecipeError(f"band {self.metric!r} constrains nothing")

    def describe(self) -> str:
        parts = []
        if self.min is not None:
            parts.append(f">= {self.min:g}")
        if self.max is not None:
            parts.append(f"<= {self.max:g}")
        ref = self.at_least or self.above
        if ref:
            sign = ">=" if self.at_least else ">"
            off = f" {'+' if self.offset >= 0 else '-'} {abs(self.offset):g}" if self.offset else ""
            parts.append(f"{sign} {ref}{off}")
        return " and ".join(parts)

    def check(self, lookup) -> tuple[bool, float]:
        value = lookup(self.metric)
        ok = True
        if self.min is not None:
            ok &= value >= self.min
        if self.max is not None:
            ok &= value <= self.max
        if self.at_least:
            ok &= value >= lookup(self.at_least) + self.offset
        if self.above:
            ok &= value > lookup(self.above) + self.offset
        return bool(ok), value


@dataclass
class ReproRecipe:
    name: str
    base: Path
    runs: dict[str, dict]
    bands: list[Band]
    budget_seconds: float = 600.0
    source: Path | None = None

    def config(self, run: str) -> ExperimentConfig:
        if run not in self.runs:
            raise RecipeError(f"recipe {self.name!r} has no run {run!r}")
        try:
            base = yaml.safe_load(self.base.read_text())
        except OSError as exc:
            raise RecipeError(f"cannot read base config {self.base}: {exc.strerror or exc}") from exc
        merged = deep_merge(base, self.runs[run])
        merged["name"] = f"{self.name}-{run}"
        try:
            return config_from_dict(merged)
        except ConfigError as exc:
            raise RecipeError(f"recipe {self.name!r} run {run!r}: {exc}") from exc

    def configs(self) -> dict[str, ExperimentConfig]:
        return {run: self.config(run) for run in self.runs}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_recipe(path) -> ReproRecipe:
    p = Path(path)
    try:
        d = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise RecipeError(f"cannot read recipe {p}: {exc.strerror or exc}") from exc
    if not isinstance(d, dict):
        raise RecipeError(f"{p}: recipe root must be a mapping")
    unknown = sorted(set(d) - {"name", "base", "runs", "bands", "budget_seconds"})
    if unknown:
        raise RecipeError(f"{p}: unknown key(s) {unknown}")
    try:
        bands = [Band(**b) for b in d.get("bands", [])]
    except TypeError as exc:
        raise RecipeError(f"{p}: bad band: {exc}") from exc
    runs = d.get("runs") or {}
    for b in bands:
        for ref in (b.metric, b.at_least, b.above):
            if ref and ref.split(":", 1)[0] not in runs:
                raise RecipeError(f"{p}: band references unknown run in {ref!r}")
    return ReproRecipe(
        name=d["name"], base=(p.parent / d["base"]).resolve(), runs=runs, bands=bands,
        budget_seconds=float(d.get("budget_seconds", 600)), source=p,
    )


def run_recipe(recipe: ReproRecipe, out, parallel: int = 1) -> float:
    """Train every run of the recipe under ``out/<run>``; returns elapsed seconds."""
    from .experiment import run_experiment

    out = Path(out)
    t0 = time.perf_counter()
    for run, cfg in recipe.configs().items():
        run_experiment(cfg, out / run, parallel=parallel)
    return time.perf_counter() - t0


def _lookup(out: Path, cache: dict):
    def get(ref: str) -> float:
        run, key = ref.split(":", 1)
        if run not in cache:
            path = out / run / "aggregate.json"
            if not path.is_file():
                raise RecipeError(f"missing outputs: {path}")
            cache[run] = json.loads(path.read_text())["aggregate"]
        agg = cache[run]
        if key not in agg:
            raise RecipeError(f"{run}/aggregate.json has no metric {key!r}")
        return float(agg[key]["mean"])

    return get


@dataclass
class RecipeReport:
    recipe: str
    rows: list[dict] = field(default_factory=list)
    elapsed: float | None = None
    budget_seconds: float | None = None

    @property
    def passed(self) -> bool:
        within = self.elapsed is None or self.budget_seconds is None or self.elapsed <= self.budget_seconds
        return within and all(r["passed"] for r in self.rows)

    def markdown(self) -> str:
        lines = [f"# Recipe `{self.recipe}`: {'PASS' if self.passed else 'FAIL'}", ""]
        if self.elapsed is not None:
            lines.append(f"Runtime {self.elapsed:.1f}s (budget {self.budget_seconds:.0f}s)")
            lines.append("")
        lines.append("| metric | value | expected | tag | result |")
        lines.append("|---|---|---|---|---|")
        for r in self.rows:
            lines.append(f"| `{r['metric']}` | {r['value']:.4f} | {r['expected']} | [{r['tag']}] | {'pass' if r['passed'] else 'FAIL'} |")
        lines += ["", "```csv", "metric,value,expected,tag,passed"]
        lines += [f"{r['metric']},{r['value']!r},{r['expected']},{r['tag']},{r['passed']}" for r in self.rows]
        lines += ["```", ""]
        return "\n".join(lines)


def check_recipe(recipe: ReproRecipe, out, elapsed: float | None = None) -> RecipeReport:
    """Compare the aggregates under ``out`` with the recipe's bands."""
    get = _lookup(Path(out), {})
    report = RecipeReport(recipe.name, elapsed=elapsed, budget_seconds=recipe.budget_seconds)
    for b in recipe.bands:
        ok, value = b.check(get)
        report.rows.append({"metric": b.metric, "value": value, "expected": b.describe(), "tag": b.tag, "passed": ok, "note": b.note})
    return report
