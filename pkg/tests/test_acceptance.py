"""End-to-end acceptance criteria 1-10.

Each test prints one ``criterion N: PASS|FAIL`` line (visible without -s).
The race (7) and the EGL/IGL comparison (8) share one session fixture;
run with ``pytest tests/test_acceptance.py -v`` to see the table.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from egl.bench import (OPTIMIZERS, OptimizerSpec, SuiteConfig, load_config, run_one, run_suite,
                       scaled_distance_curve, start_point, success)
from egl.gradnet import ls_mean_gradient, sample_ball
from egl.mappings import InputMap, OutputMap, TrustRegion, recover_gradient, squash, unsquash
from egl.nn import Network, backward_input
from egl.objectives import BudgetedObjective, Objective, make_benchmark, parse_problem
from egl.optimizer import ConvergentEglConfig, EglConfig, run_convergent_egl

ROOT = Path(__file__).resolve().parents[1]
RACE_CONFIG = ROOT / "configs" / "race.ini"
RACE_CELLS = [f"{f}:{n}" for n in (2, 5)
              for f in ("sphere", "ellipsoid", "rastrigin", "rosenbrock", "step_ellipsoid", "schaffer_f7")]


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number: int, ok: bool, detail: str) -> None:
        with capman.global_and_fixture_disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)

    return emit


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# --- 1-3: least-squares mean-gradient ---------------------------------------------

def test_criterion_1_exact_ls(report):
    def run():
        worst_err = worst_res = 0.0
        for n in (1, 2, 5, 10):
            rng = np.random.default_rng(n)
            for _ in range(20):
                c, d = rng.normal(size=n), rng.normal()
                x = rng.uniform(-1, 1, size=(n + 4, n))
                sol = ls_mean_gradient((x, x @ c + d))
                worst_err = max(worst_err, float(np.linalg.norm(sol.g_mse - c)))
                worst_res = max(worst_res, sol.residual)
        return worst_err, worst_res

    (err, res), secs = _timed(run)
    ok = err <= 1e-10 and res <= 1e-18 and secs < 1.0
    report(1, ok, f"max |g - c| = {err:.2e}, max residual = {res:.2e}, {secs:.2f}s")
    assert ok


def test_criterion_2_symmetric_quadratic(report):
    def run():
        worst = 0.0
        for n in (2, 5):
            rng = np.random.default_rng(10 + n)
            for _ in range(20):
                a = rng.normal(size=(n, n))
                x0 = rng.uniform(-2, 2, size=n)
                v = rng.uniform(-0.3, 0.3, size=(2 * n, n))
                x = np.vstack([x0 + v, x0 - v])
                y = np.sum((x @ a.T) ** 2, axis=1)
                g = ls_mean_gradient((x, y)).g_mse
                worst = max(worst, float(np.linalg.norm(g - 2 * a.T @ a @ x0)))
        return worst

    worst, secs = _timed(run)
    ok = worst <= 1e-9 and secs < 1.0
    report(2, ok, f"max error = {worst:.2e}, {secs:.2f}s")
    assert ok


def test_criterion_3_controllable_accuracy(report):
    n, m = 3, 12

    def err(x0, eps, rng):
        pts = x0 + sample_ball(rng, m, n, eps)
        g = ls_mean_gradient((pts, np.sum(pts ** 3, axis=1))).g_mse
        return float(np.linalg.norm(g - 3 * x0 ** 2))

    def run():
        medians = []
        for eps in (0.1, 0.05, 0.025):
            ratios = []
            for seed in range(10):
                x0 = np.random.default_rng(seed).uniform(-1, 1, n)
                ratios.append(err(x0, eps / 2, np.random.default_rng(100 + seed)) /
                              err(x0, eps, np.random.default_rng(100 + seed)))
            medians.append(float(np.median(ratios)))
        return medians

    medians, secs = _timed(run)
    ok = max(medians) <= 0.75 and secs < 5.0
    report(3, ok, "median err(eps/2)/err(eps) = " + ", ".join(f"{r:.3f}" for r in medians) + f", {secs:.2f}s")
    assert ok


# --- 4: convergent EGL terminal bound ------------------------------------------------

def test_criterion_4_terminal_bound(report):
    n = 5

    def run():
        rows = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            q = np.linalg.qr(rng.normal(size=(n, n)))[0]
            a = q @ np.diag(rng.uniform(0.5, 4.0, n)) @ q.T
            obj = Objective("quad", n, np.full(n, -5.0), np.full(n, 5.0), lambda x, a=a: float(x @ a @ x),
                            np.zeros(n), 0.0)
            bo = BudgetedObjective(obj, 1_000_000)
            rec = run_convergent_egl(ConvergentEglConfig(), bo, rng.uniform(-4, 4, n), seed)
            eps, alpha = rec.info["epsilon_final"], rec.info["alpha_final"]
            grad = float(np.linalg.norm(2 * a @ rec.info["x_final"]))
            rows.append((grad, 5 * eps / alpha, eps <= ConvergentEglConfig().epsilon_bar))
        return rows

    rows, secs = _timed(run)
    ok = all(g <= bound and done for g, bound, done in rows) and secs < 10.0
    worst = max(g / b for g, b, _ in rows)
    report(4, ok, f"max |grad| / (5 eps/alpha) = {worst:.3f} over 10 seeds, {secs:.2f}s")
    assert ok


# --- 5: network gradients ---------------------------------------------------------------

def test_criterion_5_gradient_checks(report):
    archs = [(0, 0, True, False), (8, 1, True, True), (6, 2, False, True)]
    h = 1e-5

    def run():
        worst_p = worst_x = 0.0
        for k, (width, blocks, residual, spline) in enumerate(archs):
            rng = np.random.default_rng(k)
            net = Network(3, 2, width=width, n_blocks=blocks, residual=residual, spline=spline,
                          activation="tanh", rng=rng)
            if spline:
                net.params["spline"][:] = rng.normal(0, 0.5, net.params["spline"].shape)
            x = rng.uniform(-0.9, 0.9, size=(4, 3))
            w = rng.normal(size=(4, 2))
            net.forward(x)
            grads, _ = net.backward(w)
            for name, p in net.params.items():
                for _ in range(20):
                    idx = tuple(rng.integers(0, s) for s in p.shape)
                    old = p[idx]
                    p[idx] = old + h
                    lp = float(np.sum(w * net.forward(x)))
                    p[idx] = old - h
                    lm = float(np.sum(w * net.forward(x)))
                    p[idx] = old
                    fd, an = (lp - lm) / (2 * h), grads[name][idx]
                    worst_p = max(worst_p, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
            scalar = Network(3, 1, width=width, n_blocks=blocks, residual=residual, spline=spline,
                             activation="tanh", rng=rng)
            if spline:
                scalar.params["spline"][:] = rng.normal(0, 0.5, scalar.params["spline"].shape)
            for _ in range(20):
                xp = rng.uniform(-1.2, 1.2, size=3)
                g = backward_input(scalar, xp)
                fd = np.array([(scalar.forward(xp + e)[0] - scalar.forward(xp - e)[0]) / (2 * h)
                               for e in h * np.eye(3)])
                worst_x = max(worst_x, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
        return worst_p, worst_x

    (wp, wx), secs = _timed(run)
    ok = wp <= 1e-5 and wx <= 1e-4 and secs < 10.0
    report(5, ok, f"param rel err = {wp:.2e}, input rel err = {wx:.2e}, {secs:.2f}s")
    assert ok


# --- 6: mappings ------------------------------------------------------------------------

def test_criterion_6_mapping_exactness(report):
    rng = np.random.default_rng(6)

    def squash_ref(v):
        if v < -1:
            return -math.log(-v) - 1
        if v >= 1:
            return math.log(v) + 1
        return v

    x = np.concatenate([rng.uniform(-100, 100, 5000), rng.uniform(-2, 2, 5000)])
    sq_ulp = int(np.max(np.abs(squash(x) - np.array([squash_ref(v) for v in x])) /
                        np.spacing(np.abs(np.array([squash_ref(v) for v in x])) + 1e-300)))
    sq_ok = np.allclose(squash(x), [squash_ref(v) for v in x], rtol=4 * np.finfo(float).eps, atol=0)

    lo, hi = np.array([-5.0, -1.0]), np.array([3.0, 4.0])
    hmap = InputMap(TrustRegion(lo, hi))
    pts = rng.uniform(lo, hi, size=(5000, 2))
    a, b = 2 / (hi - lo), -(hi + lo) / (hi - lo)
    ref = np.array([[math.atanh(min(max(a[i] * p[i] + b[i], -(1 - 1e-6)), 1 - 1e-6)) for i in range(2)]
                    for p in pts])
    at_ok = np.allclose(hmap.forward(pts), ref, rtol=8 * np.finfo(float).eps, atol=0)

    trip_in = float(np.abs(hmap.inverse(hmap.forward(pts)) - pts).max())
    om = OutputMap(q_low=-3.0, q_high=11.0, fitted=True)
    ys = rng.uniform(-1e4, 1e4, 10_000)
    trip_out = float(np.max(np.abs(om.inverse(om.forward(ys)) - ys) / np.maximum(1.0, np.abs(ys))))
    trip_sq = float(np.max(np.abs(unsquash(squash(x)) - x) / np.maximum(1.0, np.abs(x))))

    worst_rec = 0.0
    for _ in range(10):
        n = 3
        c = rng.normal(size=n)
        region = TrustRegion(rng.uniform(-5, -1, n), rng.uniform(1, 5, n))
        h = InputMap(region)
        xt0 = rng.uniform(-0.5, 0.5, n)
        v = rng.uniform(-1e-5, 1e-5, size=(2 * n, n))
        xt = np.vstack([xt0 + v, xt0 - v])
        y = h.inverse(xt) @ c
        om_k = OutputMap().fit(region.center @ c + np.linspace(-1, 1, 50) * (np.abs(c) @ region.width))
        assert np.all(np.abs(om_k.linear(y)) < 1)
        gt = ls_mean_gradient((xt, om_k.forward(y))).g_mse
        x0 = h.inverse(xt0)
        worst_rec = max(worst_rec, float(np.abs(recover_gradient(gt, h, om_k, x0, y=float(x0 @ c)) - c).max()))

    ok = sq_ok and at_ok and max(trip_in, trip_out, trip_sq) <= 1e-9 and worst_rec <= 1e-8
    report(6, ok, f"squash ulp = {sq_ulp}, arctanh match = {at_ok}, round trip = "
                  f"{max(trip_in, trip_out, trip_sq):.1e}, recovery = {worst_rec:.1e}")
    assert ok


# --- 7, 8: race and EGL vs IGL ---------------------------------------------------------------

@pytest.fixture(scope="session")
def race(tmp_path_factory):
    cfg = load_config(RACE_CONFIG)
    out = tmp_path_factory.mktemp("race")
    t = time.perf_counter()
    main = run_suite(cfg, out / "race")
    race_secs = time.perf_counter() - t
    igl_spec = next(o for o in cfg.optimizers if o.name == "egl")
    igl_spec = OptimizerSpec("igl", "igl", dict(igl_spec.overrides))
    side = run_suite(dataclasses.replace(cfg, objectives=("schaffer_f7:2", "step_ellipsoid:2"),
                                         optimizers=(igl_spec,)), out / "igl")
    runs = {}
    for r in main.runs + side.runs:
        assert r.error is None, r.error
        runs[(r.problem, r.optimizer, r.seed)] = (r.y0, r.record.y_best, r.record)
    return {"runs": runs, "seeds": cfg.seeds, "budget": cfg.budget, "secs": race_secs,
            "optimizers": [o.name for o in cfg.optimizers]}


def _y_star(race, problem):
    return min(min(y0, yb) for (p, _, _), (y0, yb, _) in race["runs"].items() if p == problem)


def test_criterion_7_race(race, report):
    ge = gt = 0
    lines = []
    for cell in RACE_CELLS:
        ys = _y_star(race, cell)
        rates = {}
        for opt in ("egl", "nelder_mead", "random_search"):
            ok = [success(race["runs"][(cell, opt, s)][1], race["runs"][(cell, opt, s)][0], ys)
                  for s in race["seeds"]]
            rates[opt] = float(np.mean(ok))
        e, others = rates["egl"], (rates["nelder_mead"], rates["random_search"])
        ge += all(e >= o for o in others)
        gt += all(e > o for o in others)
        lines.append(f"{cell}: egl {e:.1f} nm {others[0]:.1f} rs {others[1]:.1f}")
    ok = ge >= 9 and gt >= 6
    report(7, ok, f">= both on {ge}/12 cells, > both on {gt}/12, race {race['secs'] / 60:.1f} min\n    "
           + "\n    ".join(lines))
    assert ok


def test_criterion_8_egl_vs_igl(race, report):
    parts = []
    ok = True
    for cell in ("schaffer_f7:2", "step_ellipsoid:2"):
        ys = _y_star(race, cell)
        med = {}
        for opt in ("egl", "igl"):
            finals = []
            for s in race["seeds"]:
                y0, yb, _ = race["runs"][(cell, opt, s)]
                finals.append((min(yb, y0) - ys) / (y0 - ys) if y0 > ys else 0.0)
            med[opt] = float(np.median(finals))
        ok &= med["egl"] <= med["igl"]
        parts.append(f"{cell}: egl {med['egl']:.2e} igl {med['igl']:.2e}")
    report(8, ok, "median final delta y_best; " + "; ".join(parts))
    assert ok


# --- 9: determinism and budget ------------------------------------------------------------------

def test_criterion_9_determinism_and_budget(report):
    race_cfg = load_config(RACE_CONFIG)
    egl_over = next(o for o in race_cfg.optimizers if o.name == "egl").overrides
    specs = [
        OptimizerSpec("egl", "egl", egl_over),
        OptimizerSpec("igl", "igl", egl_over),
        OptimizerSpec("egl_half_half", "egl", {**egl_over, "explore_mode": "half_half"}),
        OptimizerSpec("convergent_ls", "convergent_egl", {}),
        OptimizerSpec("convergent_model", "convergent_egl", {"grad_source": "model", "n_minibatches": 20}),
        OptimizerSpec("nelder_mead", "nelder_mead", {}),
        OptimizerSpec("random_search", "random_search", {}),
    ]
    problem = "rosenbrock:2"
    bad = []
    checked = 0
    for spec in specs:
        if spec.kind in ("egl", "igl"):
            warm = EglConfig(**spec.overrides).warmup_evaluations()
        elif spec.kind == "convergent_egl":
            warm = 1 + 2 * parse_problem(problem).dim  # start point and one gradient batch
        else:
            warm = parse_problem(problem).dim + 1  # the initial simplex / first draws
        for budget in (warm, warm + 1, 10_000):
            for seed in range(3):
                a = run_one(problem, spec, seed, budget)
                b = run_one(problem, spec, seed, budget)
                checked += 1
                if not (a == b and a.evaluations_used <= budget and len(a.y) == a.evaluations_used):
                    bad.append((spec.name, budget, seed))
    ok = not bad
    report(9, ok, f"{checked} (optimizer, budget, seed) cells rerun; mismatches: {bad or 'none'}")
    assert ok


# --- 10: half-half exploration ----------------------------------------------------------------

def test_criterion_10_half_half(report):
    race_cfg = load_config(RACE_CONFIG)
    base = {**next(o for o in race_cfg.optimizers if o.name == "egl").overrides, "m": 8}
    parts = []
    ok = True
    for problem in ("sphere:20", "ellipsoid:20"):
        obj = parse_problem(problem)
        med = {}
        for mode in ("ball", "half_half"):
            spec = OptimizerSpec(mode, "egl", {**base, "explore_mode": mode})
            finals = []
            for seed in range(10):
                rec = run_one(problem, spec, seed, 10_000)
                y0 = obj(start_point(obj, seed))
                finals.append(scaled_distance_curve(rec, y0, obj.y_star)[-1])
            med[mode] = float(np.median(finals))
        ok &= med["half_half"] <= med["ball"]
        parts.append(f"{problem}: half_half {med['half_half']:.2e} ball {med['ball']:.2e}")
    report(10, ok, "median final delta y_best (analytic y*); " + "; ".join(parts))
    assert ok
