"""End-to-end acceptance criteria.

Each test prints one PASS or FAIL line for its criterion and then asserts
it. Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the
detail lines inline); all tolerances are pinned below.
"""
import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from mvlab.adjoint import (picard_contraction_probe, solve_first_adjoint, solve_second_adjoint,
                           verify_transposition_first, verify_transposition_second)
from mvlab.benchmarks import lq_benchmark, lq_diffusion_benchmark, lq_moment_cost, tanh_benchmark
from mvlab.cli import build_config, reference_config
from mvlab.coefficients import FAMILIES, WHICH, ControlSet, check_lions_lift, make_model
from mvlab.forward import ControlPath, TimeGrid, simulate
from mvlab.meanfield import ParticleEnsemble
from mvlab.pmp import cost_expansion_check, improve_control, perturb_control, smp_check, smp_gap
from mvlab.variation import loglog_slope, remainder_rates, smoothing_sweep

pytestmark = pytest.mark.acceptance

LIFT_ERROR = 1e-4
LIFT_ORDER = (1.8, 2.2)
SLOPE_LINEAR = (0.8, 1.2)
SLOPE_QUADRATIC = (1.7, 2.3)
ZETA_FLOOR = 2.0
CI_LEVEL = 0.9
CLOSED_FORM_RMSE = 0.05
CONTRACTION_FIRST = 0.5
DUALITY_RESIDUAL = 0.05
DUALITY_ORDER = 0.4
EXHAUSTIVE_GAP = 0.02


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail, seconds):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{seconds:.1f} s]")
        assert ok, detail
    return report


def table_model():
    rows = [{"A0": 0.1, "Ax": -0.5, "am": 0.2, "B0": 0.3, "Bm": 0.1, "Fxx": 1.0, "fm": 0.2, "R": 0.2},
            {"A0": -0.2, "Ax": 0.4, "am": 0.3, "B0": 0.1, "Bx": 0.2, "Fxx": 2.0, "fmm": 0.5, "R": 0.4}]
    return make_model("custom_table", 1, 1, ControlSet("box", low=[-1.0], high=[1.0]), [1.0],
                      {"Hxx": 1.0, "hmm": 0.5, "hxm": [0.3]}, schedule=(np.array([0.0, 0.5]), rows))


def test_lions_derivative_lift(verdict):
    start = time.perf_counter()
    models = {"scalar_interaction": tanh_benchmark()[0], "linear_quadratic": lq_benchmark(2)[0],
              "custom_table": table_model()}
    assert set(models) == set(FAMILIES)
    rng = np.random.default_rng(2024)
    failures, worst, orders = [], 0.0, []
    for family, model in models.items():
        n = model.n_state
        mu = ParticleEnsemble(rng.normal(size=(64, n)))
        # a unit mean shift moves the interaction statistic at unit rate, so the
        # truncation error sits above rounding and the order is measurable
        direction = ParticleEnsemble(1.0 + rng.normal(size=(64, n)))
        x = rng.normal(size=n)
        for which in WHICH:
            rep = check_lions_lift(model, which, 0.25, x, mu, [0.3], direction)
            worst = max(worst, rep.best_error)
            if not rep.exact_truncation:
                orders.append(rep.order)
            if not rep.passed(LIFT_ERROR, LIFT_ORDER):
                failures.append(f"{family}.{which}")
    detail = (f"worst best-step error {worst:.2e} < {LIFT_ERROR:g}, measured orders "
              f"{min(orders):.3f} to {max(orders):.3f}; failures: {failures or 'none'}")
    verdict(1, not failures, detail, time.perf_counter() - start)


@pytest.fixture(scope="module")
def reference():
    return build_config(reference_config())


def test_remainder_rates(verdict, reference):
    cfg = reference
    start = time.perf_counter()
    assert (cfg.N, cfg.grid.M, len(cfg.seeds)) == (4096, 128, 16)
    assert cfg.eps.tolist() == [2.0 ** -k for k in range(3, 8)]
    rep = remainder_rates(cfg.model, cfg.space, cfg.grid, cfg.control_path(), cfg.perturbation, cfg.eps,
                          cfg.replicate_seeds(), cfg.xi, cfg.offset, level=CI_LEVEL, workers=4)
    s = rep.slopes
    ok = all(SLOPE_LINEAR[0] <= s[k] <= SLOPE_LINEAR[1] for k in ("xi", "y"))
    ok &= all(SLOPE_QUADRATIC[0] <= s[k] <= SLOPE_QUADRATIC[1] for k in ("z", "eta"))
    ok &= s["zeta"] > ZETA_FLOOR and rep.ci["zeta"][0] > ZETA_FLOOR
    detail = ", ".join(f"{k} {v:.3f}" for k, v in s.items())
    detail += f"; zeta {int(100 * CI_LEVEL)}% CI [{rep.ci['zeta'][0]:.3f}, {rep.ci['zeta'][1]:.3f}]"
    verdict(2, ok, detail, time.perf_counter() - start)


def test_smoothing_estimate(verdict, reference):
    cfg = reference
    start = time.perf_counter()
    seeds = cfg.replicate_seeds()[:cfg.raw["rates"]["smoothing_seeds"]]
    rep = smoothing_sweep(cfg.model, cfg.space, cfg.grid, cfg.control_path(), cfg.perturbation, cfg.eps, seeds,
                          cfg.xi, offset=cfg.offset, workers=4)
    assert len(rep.ratios) == 3 and rep.eps.size == 5
    ok = all(rep.decreasing(name) for name in rep.ratios)
    detail = "; ".join(f"{name} {np.array2string(v, precision=3)}" for name, v in rep.ratios.items())
    verdict(3, ok, detail, time.perf_counter() - start)


def test_first_adjoint(verdict):
    start = time.perf_counter()
    model, space, xi = lq_benchmark(1)
    grid = TimeGrid(1.0, 32)
    ubar = ControlPath.constant(grid, 10_000, [0.0])
    base = simulate(model, space, grid, ubar, 10_000, xi, 1)
    pic = solve_first_adjoint(model, space, base, ubar, method="picard_regression")
    ref = solve_first_adjoint(model, space, base, ubar, method="lq_closed_form")
    rmse = float(np.sqrt(np.mean((pic.p - ref.p) ** 2) / np.mean(ref.p**2)))
    ok = rmse < CLOSED_FORM_RMSE
    probes = []
    for name, (m, s, x0) in {"lq": (model, space, xi), "tanh": tanh_benchmark()}.items():
        b = simulate(m, s, grid, ControlPath.constant(grid, 4096, [0.0]), 4096, x0, 2)
        rep = picard_contraction_probe(m, s, b, ControlPath.constant(grid, 4096, [0.0]), [0.125, 0.25, 0.5, 1.0])
        ok &= rep.factors[0] < CONTRACTION_FIRST and rep.nondecreasing
        probes.append(f"{name} factors {np.array2string(rep.factors, precision=3)}")
    verdict(4, ok, f"relative RMSE of p {rmse:.2e}; " + "; ".join(probes), time.perf_counter() - start)


def duality_residuals(M, N, seed):
    model, space, xi = lq_benchmark(1)
    grid = TimeGrid(1.0, M)
    ubar = ControlPath.constant(grid, N, [0.0])
    base = simulate(model, space, grid, ubar, N, xi, seed)
    adj1 = solve_first_adjoint(model, space, base, ubar)
    adj2 = solve_second_adjoint(model, space, base, ubar, adj1)
    first = verify_transposition_first(model, space, base, adj1, 4, seed=seed).relative
    second = verify_transposition_second(model, space, base, ubar, adj2, 2, seed=seed).relative
    return first, second


def test_transposition_duality(verdict):
    start = time.perf_counter()
    steps = (16, 32, 64, 128)
    mean_first, mean_second, worst = [], [], {}
    for M in steps:
        runs = [duality_residuals(M, 10_000, seed) for seed in range(4)]
        first = np.concatenate([r[0] for r in runs])
        second = np.concatenate([r[1] for r in runs])
        mean_first.append(first.mean())
        mean_second.append(second.mean())
        worst[M] = max(first.max(), second.max())
    dts = 1.0 / np.array(steps)
    order_first = loglog_slope(dts, np.array(mean_first))
    order_second = loglog_slope(dts, np.array(mean_second))
    ok = worst[64] < DUALITY_RESIDUAL and min(order_first, order_second) >= DUALITY_ORDER
    detail = (f"worst relative residual at M=64 {worst[64]:.2%}; observed order in dt "
              f"{order_first:.2f} (first), {order_second:.2f} (second)")
    verdict(5, ok, detail, time.perf_counter() - start)


def test_maximum_principle(verdict):
    start = time.perf_counter()
    model, space, xi = lq_diffusion_benchmark()
    small = TimeGrid(1.0, 6)
    pts = np.linspace(-1.0, 1.0, 9)
    schedules = np.array(list(itertools.product(pts, repeat=small.M)))[:, :, None]
    best = float(lq_moment_cost(model, space, small, schedules, xi).min())
    found = improve_control(model, space, small, ControlPath.constant(small, 4096, [0.0]), xi, 11, iterations=30)
    found_cost = float(lq_moment_cost(model, space, small, found.control.values.mean(axis=1)[None], xi)[0])
    exhaustive_gap = abs(found_cost - best) / abs(best)

    grid = TimeGrid(1.0, 32)
    res = improve_control(model, space, grid, ControlPath.constant(grid, 4096, [0.0]), xi, 12, iterations=30)
    rep = smp_check(model, space, grid, res.control, xi, 13)
    bad = perturb_control(res.control, grid, [0.5], (0.25, 0.75), model.control_set)
    neg = smp_check(model, space, grid, bad, xi, 13)
    ok = exhaustive_gap < EXHAUSTIVE_GAP and rep.min_mean >= -rep.tol and neg.min_mean < -neg.tol
    detail = (f"improved vs exhaustive {exhaustive_gap:.2%}; min gap {rep.min_mean:.2e} >= -{rep.tol:.2e}; "
              f"perturbed min gap {neg.min_mean:.2e} < -{neg.tol:.2e}")
    verdict(6, ok, detail, time.perf_counter() - start)


def test_cost_expansion(verdict):
    start = time.perf_counter()
    model, space, xi = lq_benchmark(1)
    grid = TimeGrid(1.0, 64)
    N = 100_000
    ubar = ControlPath.constant(grid, N, [0.0])
    base = simulate(model, space, grid, ubar, N, xi, 21)
    adj1 = solve_first_adjoint(model, space, base, ubar)
    adj2 = solve_second_adjoint(model, space, base, ubar, adj1)
    sweep = [0.5, 0.25, 0.125, 0.0625]
    rep = cost_expansion_check(model, space, grid, ubar, [1.0], sweep, xi, 21, 0.25, adj1, adj2, base=base)
    zero = cost_expansion_check(model, space, grid, ubar, [0.0], sweep, xi, 21, 0.25, adj1, adj2, base=base)
    self_gap = smp_gap(model, space, base, ubar, adj1, adj2, "self")
    ok = rep.decreasing and np.all(zero.remainder == 0.0) and np.all(self_gap.mean == 0.0)
    detail = (f"|R/eps| {np.array2string(rep.ratio, precision=4)}; zero-spike remainder "
              f"{np.abs(zero.remainder).max():g}; self gap {np.abs(self_gap.mean).max():g}")
    verdict(7, ok, detail, time.perf_counter() - start)


def test_infrastructure(verdict):
    start = time.perf_counter()
    model, space, xi = tanh_benchmark()
    grid = TimeGrid(1.0, 32)
    ubar = ControlPath.constant(grid, 1500, [0.0])
    one = simulate(model, space, grid, ubar, 1500, xi, 5, workers=1)
    four = simulate(model, space, grid, ubar, 1500, xi, 5, workers=4)
    same = np.array_equal(one.x, four.x) and np.array_equal(one.noise, four.noise)
    tests = Path(__file__).parent
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-m",
                           "trivial or derivative_check", str(tests)], capture_output=True, text=True,
                          cwd=tests.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()
    ok = same and proc.returncode == 0
    detail = f"workers 1 vs 4 bit-identical: {same}; closed-form and derivative checks: {summary}"
    verdict(8, ok, detail, time.perf_counter() - start)
