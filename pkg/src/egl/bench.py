"""Experiment harness: optimizer x problem x seed grids, success metrics,
trace files and summary tables.

Config files are INI style::

    [suite]
    objectives = sphere:2:0, rastrigin:5:0
    optimizers = egl, nelder_mead, random_search
    seeds = 0-9
    budget = 10000
    output_dir = results

    [egl]
    m = 16
    width = 32

A section named after an optimizer overrides its defaults. Sections with a
``type`` key define variants (``[egl_small]`` with ``type = egl``).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from egl.baselines import nelder_mead, random_search
from egl.core import STREAM_X0, Rng, RunRecord, read_trace
from egl.objectives import FAMILIES, BudgetedObjective, Objective, parse_problem
from egl.optimizer import ConvergentEglConfig, EglConfig, run_convergent_egl, run_egl, run_igl

SUMMARY_COLUMNS = ["problem", "optimizer", "seed_count", "y_best_median", "y_best_iqr", "success_rate",
                   "evals", "success_rate_analytic"]
CURVE_RATIO = 1.1


class ConfigError(ValueError):
    pass


# --- metrics -------------------------------------------------------------------

def success(y_best: float, y0: float, y_star: float) -> bool:
    """Absolute gap at most 1 and relative gap at most 1e-2 of the start."""
    gap = y_best - y_star
    if y0 <= y_star:
        return bool(gap <= 1.0)
    return bool(gap <= 1.0 and gap / (y0 - y_star) <= 1e-2)


def scaled_distance_curve(run: RunRecord | np.ndarray, y0: float, y_star: float) -> np.ndarray:
    """Delta y_best per evaluation: (best so far - y*) / (y0 - y*).

    The running best includes ``y0`` itself so optimizers that never evaluate
    the start point still begin at 1.
    """
    y = run.y if isinstance(run, RunRecord) else np.asarray(run, dtype=float)
    if not y0 > y_star:
        raise ValueError("need y0 > y_star")
    best = np.minimum(np.minimum.accumulate(y), y0) if len(y) else np.zeros(0)
    return np.clip((best - y_star) / (y0 - y_star), 0.0, 1.0)


def geometric_grid(length: int, ratio: float = CURVE_RATIO) -> np.ndarray:
    """1-based evaluation indices rounded from powers of ``ratio``, always
    ending at ``length``."""
    if length < 1:
        return np.zeros(0, dtype=np.int64)
    k_max = int(math.floor(math.log(length) / math.log(ratio))) + 1
    t = np.unique(np.round(ratio ** np.arange(k_max + 1)).astype(np.int64))
    t = t[t <= length]
    if t[-1] != length:
        t = np.append(t, length)
    return t


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    name: str
    kind: str
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SuiteConfig:
    objectives: tuple[str, ...]
    optimizers: tuple[OptimizerSpec, ...]
    seeds: tuple[int, ...]
    budget: int
    output_dir: str = "results"
    jobs: int = 1

    def __post_init__(self):
        if not self.objectives:
            raise ConfigError("at least one objective is required")
        if not self.optimizers:
            raise ConfigError("at least one optimizer is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.budget < 1:
            raise ConfigError("budget must be positive")
        names = [o.name for o in self.optimizers]
        if len(set(names)) != len(names):
            raise ConfigError("optimizer names must be unique")
        for spec in self.optimizers:
            if spec.kind not in OPTIMIZERS:
                raise ConfigError(f"unknown optimizer type {spec.kind!r}")
        for p in self.objectives:
            try:
                parse_problem(p)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"bad objective {p!r}: {exc}") from exc


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def parse_seeds(value: str) -> tuple[int, ...]:
    seeds = []
    for part in _split(value):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def _coerce(raw: str, current: Any) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or current is None:
        try:
            return float(text) if any(c in text.lower() for c in ".e") else int(text)
        except ValueError:
            if current is None:
                return text
            raise
    return text


def _typed_overrides(kind: str, raw: dict[str, str]) -> dict:
    defaults = OPTIMIZERS[kind].defaults()
    out = {}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{kind} has no parameter {key!r}")
        try:
            out[key] = _coerce(value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{kind}.{key}: {exc}") from exc
    return out


def parse_config(text: str) -> SuiteConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if not cp.has_section("suite"):
        raise ConfigError("missing [suite] section")
    suite = cp["suite"]
    try:
        budget = int(suite.get("budget", "10000"))
        seeds = parse_seeds(suite.get("seeds", "0"))
        jobs = int(suite.get("jobs", "1"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    specs = []
    for name in _split(suite.get("optimizers", "")):
        raw = dict(cp[name]) if cp.has_section(name) else {}
        kind = raw.pop("type", name)
        if kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer type {kind!r}")
        specs.append(OptimizerSpec(name, kind, _typed_overrides(kind, raw)))
    return SuiteConfig(tuple(_split(suite.get("objectives", ""))), tuple(specs), seeds, budget,
                       suite.get("output_dir", "results"), jobs)


def load_config(path: str | Path) -> SuiteConfig:
    return parse_config(Path(path).read_text())


# --- optimizer registry ----------------------------------------------------------

@dataclass(frozen=True)
class _Entry:
    run: Callable[[dict, BudgetedObjective, np.ndarray, int], RunRecord]
    defaults: Callable[[], dict]
    describe: str


def _egl_like(runner):
    def run(overrides, bo, x0, seed):
        return runner(EglConfig(**{**overrides, "budget": bo.budget}), bo, x0, seed)
    return run


def _run_convergent(overrides, bo, x0, seed):
    kw = dict(overrides)
    source = kw.pop("grad_source", "ls")
    return run_convergent_egl(ConvergentEglConfig(**kw), bo, x0, seed, grad_source=source)


def _egl_defaults() -> dict:
    d = dataclasses.asdict(EglConfig())
    d.pop("budget")
    return d


OPTIMIZERS: dict[str, _Entry] = {
    "egl": _Entry(_egl_like(run_egl), _egl_defaults, "explicit gradient learning"),
    "igl": _Entry(_egl_like(run_igl), _egl_defaults, "same loop, gradient of a value network"),
    "convergent_egl": _Entry(_run_convergent,
                             lambda: {**dataclasses.asdict(ConvergentEglConfig()), "grad_source": "ls"},
                             "sufficient-decrease schedule, closed-form or network gradient"),
    "nelder_mead": _Entry(lambda o, bo, x0, seed: nelder_mead(bo, x0, seed=seed, **o),
                          lambda: {"scale": None}, "downhill simplex"),
    "random_search": _Entry(lambda o, bo, x0, seed: random_search(bo, seed=seed),
                            lambda: {}, "uniform sampling of the box"),
}


# --- running ---------------------------------------------------------------------

def start_point(obj: Objective, seed: int) -> np.ndarray:
    """Shared x0 for every optimizer on a given seed: uniform over the
    central 80% of the box."""
    u = Rng(seed).stream(STREAM_X0).uniform(size=obj.dim)
    return obj.lower + (obj.upper - obj.lower) * (0.1 + 0.8 * u)


def run_one(problem: str, spec: OptimizerSpec, seed: int, budget: int) -> RunRecord:
    obj = parse_problem(problem)
    bo = BudgetedObjective(obj, budget)
    return OPTIMIZERS[spec.kind].run(spec.overrides, bo, start_point(obj, seed), seed)


@dataclass
class RunResult:
    problem: str
    optimizer: str
    seed: int
    y0: float
    y_star_analytic: float | None
    record: RunRecord | None = None
    error: str | None = None
    path: Path | None = None


@dataclass
class SuiteResult:
    runs: list[RunResult]
    y_star_ref: dict[str, float]
    summary: list[dict]
    output_dir: Path

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.runs if r.error is not None]


def _slug(problem: str) -> str:
    return problem.replace(":", "-")


def _run_cell(args) -> tuple[RunRecord | None, str | None]:
    problem, spec, seed, budget = args
    try:
        return run_one(problem, spec, seed, budget), None
    except Exception as exc:  # persisted as a failed cell, the grid goes on
        return None, f"{type(exc).__name__}: {exc}"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int, bool)) or value is None or isinstance(value, str):
        return value.item() if isinstance(value, np.generic) else value
    return str(value)


def _write_run(res: RunResult, out: Path) -> None:
    d = out / "runs" / _slug(res.problem) / res.optimizer
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"seed{res.seed}.csv"
    res.record.save(path)
    side = res.record.sidecar()
    side.update({"problem": res.problem, "optimizer": res.optimizer, "y0": res.y0,
                 "y_star_analytic": res.y_star_analytic, "info": _jsonable(res.record.info),
                 "event_count": len(res.record.events)})
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    res.path = path


def run_suite(cfg: SuiteConfig, output_dir: str | Path | None = None, progress: Callable | None = None) -> SuiteResult:
    """Run the full grid, then compute y* references, summary and curves."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(p, spec, s, cfg.budget) for p in cfg.objectives for spec in cfg.optimizers for s in cfg.seeds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        outcomes = []
        for cell in cells:
            outcomes.append(_run_cell(cell))
            if progress is not None:
                progress(cell, outcomes[-1])
    runs = []
    problems = {p: parse_problem(p) for p in cfg.objectives}
    for (problem, spec, seed, _), (record, error) in zip(cells, outcomes):
        obj = problems[problem]
        res = RunResult(problem, spec.name, seed, obj(start_point(obj, seed)), obj.y_star, record, error)
        if record is not None:
            _write_run(res, out)
        runs.append(res)
    failures = [{"problem": r.problem, "optimizer": r.optimizer, "seed": r.seed, "error": r.error}
                for r in runs if r.error is not None]
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    entries = [_run_data(r) for r in runs if r.record is not None]
    summary, y_star_ref = write_reports(entries, out)
    return SuiteResult(runs, y_star_ref, summary, out)


# --- reporting -------------------------------------------------------------------

@dataclass
class _RunData:
    problem: str
    optimizer: str
    seed: int
    y: np.ndarray
    y0: float
    y_star_analytic: float | None
    evaluations_used: int


def _run_data(r: RunResult) -> _RunData:
    return _RunData(r.problem, r.optimizer, r.seed, r.record.y, r.y0, r.y_star_analytic,
                    r.record.evaluations_used)


def reference_optima(entries: Sequence[_RunData]) -> dict[str, float]:
    """Best value seen on each problem across every run (and its start)."""
    ref: dict[str, float] = {}
    for e in entries:
        best = min(float(np.min(e.y)) if len(e.y) else math.inf, e.y0)
        ref[e.problem] = min(ref.get(e.problem, math.inf), best)
    return ref


def _fmt(v: float) -> str:
    return repr(float(v))


def summarize(entries: Sequence[_RunData], y_star_ref: dict[str, float]) -> list[dict]:
    groups: dict[tuple[str, str], list[_RunData]] = {}
    for e in entries:
        groups.setdefault((e.problem, e.optimizer), []).append(e)
    rows = []
    for (problem, opt), runs in sorted(groups.items()):
        y_best = np.array([float(np.min(r.y)) if len(r.y) else math.inf for r in runs])
        q1, q3 = np.percentile(y_best, [25, 75])
        ys = y_star_ref[problem]
        ok = [success(b, r.y0, ys) for b, r in zip(y_best, runs)]
        analytic = runs[0].y_star_analytic
        ok_an = [success(b, r.y0, analytic) for b, r in zip(y_best, runs)] if analytic is not None else None
        rows.append({
            "problem": problem,
            "optimizer": opt,
            "seed_count": len(runs),
            "y_best_median": _fmt(np.median(y_best)),
            "y_best_iqr": _fmt(q3 - q1),
            "success_rate": _fmt(np.mean(ok)),
            "evals": int(np.median([r.evaluations_used for r in runs])),
            "success_rate_analytic": "" if ok_an is None else _fmt(np.mean(ok_an)),
        })
    return rows


def mean_curves(entries: Sequence[_RunData], y_star_ref: dict[str, float]) -> dict[str, tuple[np.ndarray, dict]]:
    """Per problem: geometric t grid and the seed-averaged Delta y per optimizer."""
    by_problem: dict[str, dict[str, list[np.ndarray]]] = {}
    length: dict[str, int] = {}
    for e in entries:
        ys = y_star_ref[e.problem]
        curve = scaled_distance_curve(e.y, e.y0, ys) if e.y0 > ys else np.zeros(len(e.y))
        by_problem.setdefault(e.problem, {}).setdefault(e.optimizer, []).append(curve)
        length[e.problem] = max(length.get(e.problem, 0), len(curve))
    out = {}
    for problem, per_opt in sorted(by_problem.items()):
        grid = geometric_grid(length[problem])
        cols = {}
        for opt, curves in sorted(per_opt.items()):
            # a run that stopped early keeps its last value
            pts = [c[np.minimum(grid, len(c)) - 1] if len(c) else np.ones(len(grid)) for c in curves]
            cols[opt] = np.mean(pts, axis=0)
        out[problem] = (grid, cols)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def summary_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_reports(entries: Sequence[_RunData], out: Path) -> tuple[list[dict], dict[str, float]]:
    ref = reference_optima(entries)
    rows = summarize(entries, ref)
    (out / "summary.csv").write_text(summary_text(rows))
    analytic = {e.problem: e.y_star_analytic for e in entries}
    _write_csv(out / "problems.csv", ["problem", "y_star_ref", "y_star_analytic"],
               [[p, _fmt(v), "" if analytic[p] is None else _fmt(analytic[p])] for p, v in sorted(ref.items())])
    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for problem, (grid, cols) in mean_curves(entries, ref).items():
        names = list(cols)
        _write_csv(curve_dir / f"{_slug(problem)}.csv", ["t"] + names,
                   [[int(t)] + [_fmt(cols[n][i]) for n in names] for i, t in enumerate(grid)])
    return rows, ref


def load_runs(directory: str | Path) -> list[_RunData]:
    """Read every trace and sidecar under ``directory/runs``."""
    entries = []
    for side_path in sorted(Path(directory).glob("runs/*/*/seed*.json")):
        side = json.loads(side_path.read_text())
        _, y = read_trace(side_path.with_suffix(".csv"))
        entries.append(_RunData(side["problem"], side["optimizer"], int(side["seed"]), y, float(side["y0"]),
                                side.get("y_star_analytic"), int(side["evaluations_used"])))
    return entries


# --- CLI -------------------------------------------------------------------------

def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.jobs is not None:
        cfg = dataclasses.replace(cfg, jobs=args.jobs)

    def progress(cell, outcome):
        problem, spec, seed, _ = cell
        rec, err = outcome
        status = f"y_best={rec.y_best:.6g}" if rec is not None else f"FAILED {err}"
        print(f"{problem} {spec.name} seed={seed} {status}", file=sys.stderr, flush=True)

    result = run_suite(cfg, args.out, progress=None if args.quiet else progress)
    sys.stdout.write(summary_text(result.summary))
    return 1 if result.failures else 0


def _cmd_list(args) -> int:
    print("problems (name:dim[:instance]):")
    for name, fam in FAMILIES.items():
        rot = "rotated" if fam.rotated else "separable"
        print(f"  {name:20s} min_dim={fam.min_dim} {rot}")
    print("optimizers:")
    for name, entry in OPTIMIZERS.items():
        print(f"  {name:20s} {entry.describe}")
        for key, value in entry.defaults().items():
            print(f"      {key} = {value}")
    return 0


def _cmd_curve(args) -> int:
    path = Path(args.run)
    _, y = read_trace(path)
    side_path = path.with_suffix(".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    y0 = float(side.get("y0", y[0]))
    if args.y_star is not None:
        y_star = args.y_star
    elif side.get("y_star_analytic") is not None:
        y_star = float(side["y_star_analytic"])
    else:
        y_star = float(np.min(y))
    if not y0 > y_star:
        print("y0 must exceed y*", file=sys.stderr)
        return 2
    curve = scaled_distance_curve(y, y0, y_star)
    t = np.arange(1, len(y) + 1) if args.full else geometric_grid(len(y))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["t", "delta_y_best"])
    for ti in t:
        w.writerow([int(ti), _fmt(curve[ti - 1])])
    return 0


def _cmd_summarize(args) -> int:
    out = Path(args.dir)
    entries = load_runs(out)
    if not entries:
        print(f"no runs found under {out}", file=sys.stderr)
        return 2
    rows, _ = write_reports(entries, out)
    sys.stdout.write(summary_text(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Benchmark black-box optimizers.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a suite from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--jobs", type=int, default=None, help="worker processes")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_cmd_run)

    ls = sub.add_parser("list", help="list problems and optimizers")
    ls.set_defaults(func=_cmd_list)

    c = sub.add_parser("curve", help="print the scaled distance curve of one run")
    c.add_argument("--run", required=True, help="trace CSV written by `bench run`")
    c.add_argument("--y-star", type=float, default=None)
    c.add_argument("--full", action="store_true", help="every evaluation instead of a geometric grid")
    c.set_defaults(func=_cmd_curve)

    s = sub.add_parser("summarize", help="rebuild summary and curves from run files")
    s.add_argument("--dir", required=True)
    s.set_defaults(func=_cmd_summarize)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
