"""Command-line experiment harness.

    mvlab <subcommand> [--config PATH] [--seed N] [--out DIR] [--workers K] [--strict]

Subcommands: simulate, rates, adjoint-check, smp-check, expand, optimize,
lions-check. A user config (YAML) is merged over the shipped reference
config. Every run writes its artifacts, ``summary.txt`` and ``manifest.txt``
(config hash, versions, seeds and a sha256 per artifact) to the output
directory.

Exit status: 0 when every assertion passes, 1 when one fails, 2 for an
invalid config and 3 for a simulation fault. With ``--strict`` the run stops
at the first failed assertion.

Replicate ``r`` in the ``seeds`` list uses the stream seed
``derive_seed(master, r)``; all noise, initial states, test processes and
bootstrap draws are Philox streams keyed by that seed and a purpose tag.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import math
import platform
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .adjoint import (TestProcess, picard_contraction_probe, solve_first_adjoint, solve_second_adjoint,
                      verify_transposition_first, verify_transposition_second)
from .benchmarks import lq_benchmark, lq_diffusion_benchmark, lq_moment_cost, tanh_benchmark
from .coefficients import WHICH, ControlSet, ModelError, check_lions_lift, make_model
from .forward import (ControlPath, GaussianInitial, SimulationFault, TimeGrid, cost, make_spike_control,
                      simulate)
from .galerkin import TEST, GalerkinSpace, derive_seed, dirichlet_space, philox
from .meanfield import ParticleEnsemble
from .pmp import cost_expansion_check, improve_control, perturb_control, smp_check
from .variation import (STATISTICS, remainder_rates, smoothing_sweep, solve_first_variation)

SUBCOMMANDS = ("simulate", "rates", "adjoint-check", "smp-check", "expand", "optimize", "lions-check")
BENCHMARKS = {"tanh": tanh_benchmark, "lq": lq_benchmark, "lq_diffusion": lq_diffusion_benchmark}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class AssertionFailed(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------

def reference_config() -> dict:
    text = resources.files("mvlab").joinpath("configs/reference.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}.{key}" if path else str(key)
        if key not in out:
            raise ConfigError(where, "unknown key")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "params":
            out[key] = merge(out[key], value, where)
        else:
            out[key] = value
    return out


def _get(cfg, path):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def _int(cfg, path, low=None):
    v = _get(cfg, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if low is not None and v < low:
        raise ConfigError(path, f"must be >= {low}, got {v}")
    return v


def _float(cfg, path, positive=False):
    v = _get(cfg, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, f"expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(path, f"must be > 0, got {v}")
    return float(v)


def _vector(cfg, path, length=None, allow_none=False):
    v = _get(cfg, path)
    if v is None and allow_none:
        return None
    try:
        arr = np.atleast_1d(np.asarray(v, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a list of numbers, got {v!r}") from None
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(path, "expected a flat list of finite numbers")
    if length is not None and arr.size != length:
        raise ConfigError(path, f"expected {length} entries, got {arr.size}")
    return arr


@dataclass
class ExperimentConfig:
    raw: dict
    model: object
    space: GalerkinSpace
    grid: TimeGrid
    N: int
    xi: GaussianInitial
    base_control: np.ndarray
    perturbation: np.ndarray
    offset: float
    eps: np.ndarray
    eps_realized: np.ndarray
    seed: int
    seeds: list
    workers: int
    output_dir: Path

    def replicate_seeds(self) -> list:
        return [derive_seed(self.seed, r) for r in self.seeds]

    @property
    def tol(self) -> dict:
        return self.raw["tolerances"]

    def control_path(self, grid: TimeGrid | None = None, N: int | None = None) -> ControlPath:
        return ControlPath.constant(grid or self.grid, N or self.N, self.base_control)

    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _control_set(cfg) -> ControlSet:
    kind = _get(cfg, "control.set.kind")
    if kind == "box":
        low = _vector(cfg, "control.set.low")
        high = _vector(cfg, "control.set.high", low.size)
        if np.any(low > high):
            raise ConfigError("control.set.high", "must be >= low")
        return ControlSet("box", low=low, high=high)
    if kind == "finite_grid":
        pts = _get(cfg, "control.set.points")
        try:
            arr = np.asarray(pts, dtype=float)
            arr = arr[:, None] if arr.ndim == 1 else arr
        except (TypeError, ValueError):
            raise ConfigError("control.set.points", "expected a list of control points") from None
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ConfigError("control.set.points", "expected a nonempty list of control points")
        return ControlSet("finite_grid", points=arr)
    raise ConfigError("control.set.kind", f"expected box or finite_grid, got {kind!r}")


def build_config(raw: dict) -> ExperimentConfig:
    cfg = raw
    M = _int(cfg, "grid.M", 1)
    T = _float(cfg, "grid.T", positive=True)
    grid = TimeGrid(T, M)
    N = _int(cfg, "particles", 1)
    seed = _int(cfg, "seed", 0)
    workers = _int(cfg, "workers", 1)
    seeds = _get(cfg, "seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a nonempty list of non-negative integers")
    bench = _get(cfg, "model.benchmark")
    if bench is not None:
        if bench not in BENCHMARKS:
            raise ConfigError("model.benchmark", f"expected one of {sorted(BENCHMARKS)} or null")
        try:
            model, space, xi = BENCHMARKS[bench]()
        except ModelError as exc:
            raise ConfigError("model", str(exc)) from None
    else:
        n = _int(cfg, "space.n_state", 1)
        w = _int(cfg, "space.n_noise", 1)
        eig = _vector(cfg, "space.eigenvalues", n, allow_none=True)
        weights = _vector(cfg, "space.hs_weights", w, allow_none=True)
        try:
            if eig is None:
                space = dirichlet_space(n, w, _float(cfg, "space.diffusivity", positive=True),
                                        hs_weights=weights)
            else:
                space = GalerkinSpace(n, w, eig, np.ones(w) if weights is None else weights)
        except ValueError as exc:
            raise ConfigError("space", str(exc)) from None
        U = _control_set(cfg)
        psi = _vector(cfg, "model.psi", n, allow_none=True)
        params = _get(cfg, "model.params") or {}
        if not isinstance(params, dict):
            raise ConfigError("model.params", "expected a mapping")
        bound = _get(cfg, "model.lipschitz_bound")
        try:
            model = make_model(_get(cfg, "model.family"), n, w, U, psi, params,
                               schedule=_get(cfg, "model.schedule"), lipschitz_bound=bound)
        except (ModelError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from None
        mean = _vector(cfg, "initial.mean", n)
        std = _vector(cfg, "initial.std", n)
        if np.any(std < 0):
            raise ConfigError("initial.std", "must be >= 0")
        xi = GaussianInitial(mean, std)
    d = model.control_dim
    base = _vector(cfg, "control.base", d)
    if not np.all(model.control_set.contains(base)):
        raise ConfigError("control.base", "not in the control set")
    pert = _vector(cfg, "spike.perturbation", d)
    if not np.all(model.control_set.contains(pert)):
        raise ConfigError("spike.perturbation", "not in the control set")
    offset = _float(cfg, "spike.offset")
    eps = _vector(cfg, "eps")
    if np.any(eps <= 0) or np.any(eps > T):
        raise ConfigError("eps", "values must lie in (0, T]")
    realized = np.ceil(eps / grid.dt - 1e-9) * grid.dt
    if offset < 0 or offset + realized.max() > T + 1e-12:
        raise ConfigError("spike.offset", "spike window leaves [0, T]")
    out = Path(str(_get(cfg, "output_dir")))
    return ExperimentConfig(raw, model, space, grid, N, xi, base, pert, offset, eps, realized,
                            seed, seeds, workers, out)


def load_config(path: str | None, seed: int | None = None, out: str | None = None,
                workers: int | None = None) -> ExperimentConfig:
    raw = reference_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from None
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"not valid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be a mapping")
        raw = merge(raw, user)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    if workers is not None:
        raw["workers"] = workers
    return build_config(raw)


# -- run bookkeeping ----------------------------------------------------------------

class Run:
    def __init__(self, cfg: ExperimentConfig, subcommand: str, strict: bool):
        self.cfg = cfg
        self.subcommand = subcommand
        self.strict = strict
        self.out = cfg.output_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.checks: list[tuple[str, bool, str]] = []

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_json(self, name: str, obj) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        ok = bool(ok)
        self.checks.append((name, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok and self.strict:
            raise AssertionFailed(name)
        return ok

    def finish(self) -> bool:
        lines = [f"{self.subcommand}: {sum(ok for _, ok, _ in self.checks)}/{len(self.checks)} assertions passed"]
        lines += [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in self.checks]
        (self.out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.artifacts.append("summary.txt")
        cfg = self.cfg
        with open(self.path("config.resolved.yaml"), "w", encoding="utf-8") as fh:
            yaml.safe_dump(_plain(cfg.raw), fh, sort_keys=True)
        head = [
            f"subcommand: {self.subcommand}",
            f"config_sha256: {cfg.digest()}",
            f"mvlab: {__version__}",
            f"python: {platform.python_version()}",
            f"numpy: {np.__version__}",
            f"scipy: {scipy.__version__}",
            f"pyyaml: {yaml.__version__}",
            f"master_seed: {cfg.seed}",
            f"replicates: {' '.join(str(s) for s in cfg.seeds)}",
            f"replicate_seeds: {' '.join(str(s) for s in cfg.replicate_seeds())}",
            f"eps_realized: {' '.join(repr(float(e)) for e in cfg.eps_realized)}",
            "artifacts:",
        ]
        for name in sorted(set(self.artifacts)):
            digest = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
            head.append(f"{digest}  {name}")
        (self.out / "manifest.txt").write_text("\n".join(head) + "\n", encoding="utf-8")
        return all(ok for _, ok, _ in self.checks)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj))


def _plain(obj):
    return json.loads(json.dumps(obj, default=_jsonable))


# -- subcommands -----------------------------------------------------------------------

def cmd_simulate(run: Run) -> None:
    cfg = run.cfg
    seed = cfg.replicate_seeds()[0]
    path = simulate(cfg.model, cfg.space, cfg.grid, cfg.control_path(), cfg.N, cfg.xi, seed,
                    workers=cfg.workers)
    J = cost(cfg.model, path)
    mean = path.x.mean(axis=1)
    second = (path.x**2).sum(axis=2).mean(axis=1)
    n = cfg.space.n_state
    run.write_csv("path_summary.csv", ["step", "t", "m"] + [f"mean_x{i}" for i in range(n)] + ["second_moment"],
                  ([k, float(t), float(path.m[k])] + [float(v) for v in mean[k]] + [float(second[k])]
                   for k, t in enumerate(path.grid.times)))
    path.ensemble(cfg.grid.M).to_csv(run.path("final_ensemble.csv"))
    run.write_json("cost.json", {"cost": J, "seed": seed, "N": cfg.N, "M": cfg.grid.M})
    run.check("cost_finite", np.isfinite(J), f"J = {J:.6g}")


def cmd_rates(run: Run) -> None:
    cfg = run.cfg
    r = cfg.raw["rates"]
    tol = cfg.tol
    if np.unique(cfg.eps_realized).size != cfg.eps_realized.size:
        raise ConfigError("eps", f"values collide after rounding up to multiples of dt = {cfg.grid.dt}")
    seeds = cfg.replicate_seeds()
    ubar = cfg.control_path()
    report = remainder_rates(cfg.model, cfg.space, cfg.grid, ubar, cfg.perturbation, cfg.eps, seeds, cfg.xi,
                             cfg.offset, level=r["level"], workers=cfg.workers, n_boot=r["bootstrap"])
    report.to_csv(run.path("rates.csv"))
    run.write_csv("rates_slopes.csv", ["statistic", "slope", "ci_low", "ci_high"],
                  ([s, report.slopes[s], report.ci[s][0], report.ci[s][1]] for s in STATISTICS))
    report.to_json(run.path("rates.json"))
    lo1, hi1 = tol["slope_linear"]
    lo2, hi2 = tol["slope_quadratic"]
    for s in ("xi", "y"):
        run.check(f"slope_{s}", lo1 <= report.slopes[s] <= hi1, f"{report.slopes[s]:.3f} in [{lo1}, {hi1}]")
    for s in ("z", "eta"):
        run.check(f"slope_{s}", lo2 <= report.slopes[s] <= hi2, f"{report.slopes[s]:.3f} in [{lo2}, {hi2}]")
    floor = tol["zeta_floor"]
    ci = report.ci["zeta"]
    run.check("slope_zeta", report.slopes["zeta"] > floor and ci[0] > floor,
              f"{report.slopes['zeta']:.3f}, {int(100 * r['level'])}% CI [{ci[0]:.3f}, {ci[1]:.3f}] above {floor}")
    if r["smoothing"]:
        sm = smoothing_sweep(cfg.model, cfg.space, cfg.grid, ubar, cfg.perturbation, cfg.eps,
                             seeds[:r["smoothing_seeds"]], cfg.xi, offset=cfg.offset, workers=cfg.workers)
        run.write_csv("smoothing.csv", ["process"] + [f"eps={e!r}" for e in sm.eps],
                      ([name] + list(v) for name, v in sm.ratios.items()))
        for name in sm.ratios:
            run.check(f"smoothing_{name}", sm.decreasing(name), "ratio strictly decreasing in eps")


def _variation_instance(cfg, base, ubar, eps):
    spike = make_spike_control(ubar, cfg.perturbation, eps, cfg.offset, cfg.grid, cfg.model.control_set)
    first = solve_first_variation(cfg.model, cfg.space, base, ubar, spike, keep_terms=True)
    return TestProcess("first_variation", first.y, first.drift, first.diffusion)


def cmd_adjoint(run: Run) -> None:
    cfg = run.cfg
    a = cfg.raw["adjoint"]
    tol = cfg.tol
    seed = cfg.replicate_seeds()[0]
    ubar = cfg.control_path()
    base = simulate(cfg.model, cfg.space, cfg.grid, ubar, cfg.N, cfg.xi, seed, workers=cfg.workers)
    adj1 = solve_first_adjoint(cfg.model, cfg.space, base, ubar, method=a["method"], tol=a["tol"],
                               max_iters=a["max_iters"])
    run.write_csv("first_adjoint_summary.csv",
                  ["step", "t"] + [f"mean_p{i}" for i in range(cfg.space.n_state)] + ["mean_q_norm2"],
                  ([k, float(k * cfg.grid.dt)] + [float(v) for v in adj1.p[k].mean(axis=0)]
                   + [float((adj1.q[k]**2).sum(axis=(1, 2)).mean()) if k < cfg.grid.M else float("nan")]
                   for k in range(cfg.grid.M + 1)))
    run.write_json("picard.json", {"distances": adj1.distances, "method": adj1.method})
    if a["closed_form_check"] and cfg.model.is_linear:
        ref = solve_first_adjoint(cfg.model, cfg.space, base, ubar, method="lq_closed_form")
        rel_p = float(np.sqrt(np.mean((adj1.p - ref.p) ** 2) / np.mean(ref.p**2)))
        rel_q = float(np.sqrt(np.mean((adj1.q - ref.q) ** 2) / max(np.mean(ref.q**2), 1e-300)))
        run.write_json("closed_form.json", {"relative_rmse_p": rel_p, "relative_rmse_q": rel_q})
        run.check("closed_form_p", rel_p < tol["closed_form"], f"relative RMSE {rel_p:.3e}")
        run.check("closed_form_q", rel_q < tol["closed_form"], f"relative RMSE {rel_q:.3e}")
    probe = picard_contraction_probe(cfg.model, cfg.space, base, ubar, a["horizon_splits"])
    probe.to_json(run.path("contraction.json"))
    run.check("contraction_smallest", probe.factors[0] < tol["contraction"],
              f"factor {probe.factors[0]:.3f} at length {probe.lengths[0]}")
    run.check("contraction_monotone", probe.nondecreasing, f"factors {np.round(probe.factors, 4).tolist()}")
    inst = _variation_instance(cfg, base, ubar, a["instance_eps"])
    rep1 = verify_transposition_first(cfg.model, cfg.space, base, adj1, a["test_sources"], seed, [inst])
    rep1.to_json(run.path("transposition_first.json"))
    run.check("transposition_first", rep1.worst < tol["transposition"], f"worst relative residual {rep1.worst:.3e}")
    method2 = a["second_method"]
    adj2 = solve_second_adjoint(cfg.model, cfg.space, base, ubar, adj1, method=method2)
    rep2 = verify_transposition_second(cfg.model, cfg.space, base, ubar, adj2, a["test_pairs"], seed,
                                       [("first_variation", inst, inst)])
    rep2.to_json(run.path("transposition_second.json"))
    run.check("transposition_second", rep2.worst < tol["transposition"],
              f"worst relative residual {rep2.worst:.3e}")


def cmd_smp(run: Run) -> None:
    cfg = run.cfg
    s = cfg.raw["smp"]
    a = cfg.raw["adjoint"]
    seeds = cfg.replicate_seeds()
    ubar = cfg.control_path()
    if s["optimize"]:
        res = improve_control(cfg.model, cfg.space, cfg.grid, ubar, cfg.xi, seeds[0], s["iterations"], s["step"],
                              a["method"], a["second_method"])
        ubar = res.control
    cands = cfg.model.control_set.grid(s["candidates"]) if cfg.model.control_set.kind == "box" else None
    eval_seed = seeds[1] if len(seeds) > 1 else seeds[0]
    rep = smp_check(cfg.model, cfg.space, cfg.grid, ubar, cfg.xi, eval_seed, cands, a["method"],
                    a["second_method"], cfg.workers)
    rep.to_csv(run.path("smp_gap.csv"))
    run.write_json("smp.json", rep.summary())
    run.write_csv("control.csv", ["step", "t"] + [f"u{c}" for c in range(cfg.model.control_dim)],
                  ([k, float(k * cfg.grid.dt)] + [float(v) for v in ubar.values[k].mean(axis=0)]
                   for k in range(cfg.grid.M)))
    run.check("smp_inequality", rep.passed(),
              f"min mean gap {rep.min_mean:.3e} >= -{rep.tol:.3e}, fraction below {rep.fraction_below():.3%}")
    bad = perturb_control(ubar, cfg.grid, s["perturbation"], s["window"], cfg.model.control_set)
    neg = smp_check(cfg.model, cfg.space, cfg.grid, bad, cfg.xi, eval_seed, cands, a["method"],
                    a["second_method"], cfg.workers)
    run.write_json("smp_perturbed.json", neg.summary())
    run.check("smp_negative_certificate", neg.min_mean < -neg.tol,
              f"min mean gap {neg.min_mean:.3e} < -{neg.tol:.3e}")


def cmd_expand(run: Run) -> None:
    cfg = run.cfg
    e = cfg.raw["expand"]
    a = cfg.raw["adjoint"]
    seed = cfg.replicate_seeds()[0]
    ubar = cfg.control_path()
    rep = cost_expansion_check(cfg.model, cfg.space, cfg.grid, ubar, cfg.perturbation, e["eps"], cfg.xi, seed,
                               e["offset"], method=a["method"], second_method=a["second_method"])
    rep.to_csv(run.path("expansion.csv"))
    rep.to_json(run.path("expansion.json"))
    run.check("expansion_decreasing", rep.decreasing, f"|R/eps| = {np.round(rep.ratio, 6).tolist()}")


def cmd_optimize(run: Run) -> None:
    cfg = run.cfg
    o = cfg.raw["optimize"]
    a = cfg.raw["adjoint"]
    seed = cfg.replicate_seeds()[0]
    res = improve_control(cfg.model, cfg.space, cfg.grid, cfg.control_path(), cfg.xi, seed, o["iterations"],
                          o["step"], a["method"], a["second_method"])
    run.write_csv("control.csv", ["step", "t"] + [f"u{c}" for c in range(cfg.model.control_dim)],
                  ([k, float(k * cfg.grid.dt)] + [float(v) for v in res.control.values[k].mean(axis=0)]
                   for k in range(cfg.grid.M)))
    run.write_json("optimize.json", {"cost": res.cost, "history": res.history, "improved": res.improved})
    run.check("cost_not_increased", res.cost <= res.history[0], f"{res.history[0]:.6g} -> {res.cost:.6g}")
    if o["exhaustive_check"]:
        model = cfg.model
        if not model.is_linear or model.control_dim != 1 or model.control_set.kind != "box":
            raise ConfigError("optimize.exhaustive_check", "needs a linear model with a scalar box control")
        small = TimeGrid(cfg.grid.T, o["exhaustive_M"])
        pts = model.control_set.grid(9)[:, 0]
        sched = np.array(list(itertools.product(pts, repeat=small.M)))[:, :, None]
        J = lq_moment_cost(model, cfg.space, small, sched, cfg.xi)
        best = float(J.min())
        found = improve_control(model, cfg.space, small, ControlPath.constant(small, cfg.N, cfg.base_control),
                                cfg.xi, seed, o["iterations"], o["step"], a["method"], a["second_method"])
        schedule = found.control.values.mean(axis=1)
        J_found = float(lq_moment_cost(model, cfg.space, small, schedule[None], cfg.xi)[0])
        rel = abs(J_found - best) / abs(best)
        run.write_json("exhaustive.json", {"exhaustive_cost": best, "improved_cost": J_found, "relative": rel,
                                           "best_schedule": sched[int(J.argmin())][:, 0]})
        run.check("exhaustive_match", rel < cfg.tol["optimize"], f"relative difference {rel:.3%}")


def cmd_lions(run: Run) -> None:
    cfg = run.cfg
    lc = cfg.raw["lions"]
    tol = cfg.tol
    model = cfg.model
    seed = cfg.replicate_seeds()[0]
    rng = philox(seed, TEST, 2024)
    n = model.n_state
    mu = ParticleEnsemble(rng.normal(size=(lc["particles"], n)))
    direction = ParticleEnsemble(rng.normal(size=(lc["particles"], n)))
    x = rng.normal(size=n)
    u = cfg.base_control
    rows = {}
    for which in WHICH:
        rep = check_lions_lift(model, which, 0.0, x, mu, u, direction, tuple(lc["eps"]))
        rows[which] = {"best_error": rep.best_error, "order": rep.order, "rel_errors": rep.rel_errors,
                       "exact_truncation": rep.exact_truncation}
        detail = (f"best error {rep.best_error:.2e}, "
                  + ("exact difference quotient" if rep.exact_truncation else f"order {rep.order:.2f}"))
        run.check(f"lions_{which}", rep.passed(tol["lions_error"], tuple(tol["lions_order"])), detail)
    run.write_json("lions.json", rows)


COMMANDS = {"simulate": cmd_simulate, "rates": cmd_rates, "adjoint-check": cmd_adjoint, "smp-check": cmd_smp,
            "expand": cmd_expand, "optimize": cmd_optimize, "lions-check": cmd_lions}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mvlab", description="Mean-field control experiment harness")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="YAML config merged over the reference config")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("--strict", action="store_true", help="stop at the first failed assertion")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, args.subcommand, args.strict)
    try:
        COMMANDS[args.subcommand](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        run.check("simulation", False, str(exc))
        run.strict = False
        run.finish()
        return 3
    except AssertionFailed as exc:
        run.strict = False
        run.finish()
        print(f"stopped at failed assertion {exc}", file=sys.stderr)
        return 1
    return 0 if run.finish() else 1


if __name__ == "__main__":
    sys.exit(main())
