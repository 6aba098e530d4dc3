"""First and second variational equations and their rate statistics."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientModel
from .forward import ControlPath, GaussianInitial, StatePath, TimeGrid, make_spike_control, simulate
from .galerkin import BOOTSTRAP, GalerkinSpace, philox

STATISTICS = ("xi", "y", "z", "eta", "zeta")


@dataclass
class VariationPath:
    y: np.ndarray                 # (M+1, N, n)
    z: np.ndarray | None = None   # (M+1, N, n)
    drift: np.ndarray | None = None      # per-step drift of the solved process
    diffusion: np.ndarray | None = None  # per-step diffusion of the solved process


def _spike_terms(model, t, x, m, u, ue, names):
    """Differences phi(u_eps) - phi(u) for the named partials (empty name = value)."""
    out = {}
    for which, suffix in names:
        if suffix:
            hi = model.partial(which, suffix, t, x, m, ue)
            lo = model.partial(which, suffix, t, x, m, u)
        else:
            hi = model.value(which, t, x, m, ue)
            lo = model.value(which, t, x, m, u)
        out[(which, suffix)] = hi - lo
    return out


def solve_first_variation(model: CoefficientModel, space: GalerkinSpace, base: StatePath, ubar: ControlPath,
                          spike: ControlPath, source_scale: float = 1.0, keep_terms: bool = False) -> VariationPath:
    """Linearized particle system driven by the spike; reuses the base noise."""
    if base.noise is None:
        raise ValueError("base path carries no noise record")
    M, N, n = base.grid.M, base.N, space.n_state
    dt = base.grid.dt
    S = space.decay(dt)
    chi = spike.chi()
    psi = model.psi
    y = np.zeros((M + 1, N, n))
    drifts = np.empty((M, N, n)) if keep_terms else None
    diffs = np.empty((M, N, n, space.n_noise)) if keep_terms else None
    for k in range(M):
        t = k * dt
        x, m, u = base.x[k], base.m[k], ubar.values[k]
        my = float(np.mean(y[k] @ psi))
        drift = np.einsum("nij,nj->ni", model.a_x(t, x, m, u), y[k]) + model.a_m(t, x, m, u) * my
        diff = np.einsum("nijl,nl->nij", model.b_x(t, x, m, u), y[k]) + model.b_m(t, x, m, u) * my
        if chi[k]:
            d = _spike_terms(model, t, x, m, u, spike.values[k], [("a", ""), ("b", "")])
            drift = drift + source_scale * d[("a", "")]
            diff = diff + source_scale * d[("b", "")]
        if keep_terms:
            drifts[k], diffs[k] = drift, diff
        y[k + 1] = S * (y[k] + drift * dt + np.einsum("nij,nj->ni", diff, base.noise[k]))
    return VariationPath(y, None, drifts, diffs)


def solve_second_variation(model: CoefficientModel, space: GalerkinSpace, base: StatePath,
                           first: VariationPath, ubar: ControlPath, spike: ControlPath,
                           keep_terms: bool = False) -> VariationPath:
    """Second-order correction with quadratic sources in y and spike-times-y terms."""
    M, N, n = base.grid.M, base.N, space.n_state
    dt = base.grid.dt
    S = space.decay(dt)
    chi = spike.chi()
    psi = model.psi
    y = first.y
    z = np.zeros_like(y)
    drifts = np.empty((M, N, n)) if keep_terms else None
    diffs = np.empty((M, N, n, space.n_noise)) if keep_terms else None
    for k in range(M):
        t = k * dt
        x, m, u = base.x[k], base.m[k], ubar.values[k]
        mz = float(np.mean(z[k] @ psi))
        my = float(np.mean(y[k] @ psi))
        yk = y[k]
        drift = (np.einsum("nij,nj->ni", model.a_x(t, x, m, u), z[k]) + model.a_m(t, x, m, u) * mz
                 + 0.5 * np.einsum("nijk,nj,nk->ni", model.a_xx(t, x, m, u), yk, yk)
                 + 0.5 * model.y_mu_source("a", t, x, m, u, yk))
        diff = (np.einsum("nijl,nl->nij", model.b_x(t, x, m, u), z[k]) + model.b_m(t, x, m, u) * mz
                + 0.5 * np.einsum("nijkl,nk,nl->nij", model.b_xx(t, x, m, u), yk, yk)
                + 0.5 * model.y_mu_source("b", t, x, m, u, yk))
        if chi[k]:
            d = _spike_terms(model, t, x, m, u, spike.values[k],
                             [("a", "x"), ("a", "m"), ("b", "x"), ("b", "m")])
            drift = drift + np.einsum("nij,nj->ni", d[("a", "x")], yk) + d[("a", "m")] * my
            diff = diff + np.einsum("nijl,nl->nij", d[("b", "x")], yk) + d[("b", "m")] * my
        if keep_terms:
            drifts[k], diffs[k] = drift, diff
        z[k + 1] = S * (z[k] + drift * dt + np.einsum("nij,nj->ni", diff, base.noise[k]))
    return VariationPath(y, z, drifts, diffs)


def sup_square(v: np.ndarray) -> float:
    """E sup_k |v_k|^2 over grid points, averaged over particles."""
    return float(np.mean(np.max(np.sum(v**2, axis=-1), axis=0)))


def remainder_statistics(perturbed: StatePath, base: StatePath, first: VariationPath,
                         second: VariationPath) -> dict:
    xi = perturbed.x - base.x
    eta = xi - first.y
    zeta = eta - second.z
    return {"xi": sup_square(xi), "y": sup_square(first.y), "z": sup_square(second.z),
            "eta": sup_square(eta), "zeta": sup_square(zeta)}


def loglog_slope(eps, values) -> float:
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


@dataclass
class RateReport:
    eps: np.ndarray
    per_seed: np.ndarray          # (seeds, eps, statistic)
    slopes: dict
    ci: dict
    level: float
    seeds: list = field(default_factory=list)

    @property
    def means(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "statistic", "value"])
            for j, e in enumerate(self.eps):
                for s, name in enumerate(STATISTICS):
                    w.writerow([repr(float(e)), name, repr(float(self.means[j, s]))])

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"eps": self.eps.tolist(), "slopes": self.slopes, "ci": self.ci,
                       "level": self.level, "seeds": self.seeds}, fh, indent=2, sort_keys=True)


def bootstrap_slopes(eps, per_seed: np.ndarray, level: float = 0.9, n_boot: int = 2000,
                     seed: int = 0) -> dict:
    """Percentile intervals for the log-log slope, resampling seeds jointly across eps."""
    S = per_seed.shape[0]
    rng = philox(seed, BOOTSTRAP, S)
    idx = rng.integers(0, S, (n_boot, S))
    boot = per_seed[idx].mean(axis=1)            # (n_boot, eps, stat)
    X = np.log(eps)
    Xc = X - X.mean()
    slopes = np.einsum("e,bes->bs", Xc, np.log(boot)) / (Xc @ Xc)
    lo, hi = np.quantile(slopes, [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    return {name: [float(lo[s]), float(hi[s])] for s, name in enumerate(STATISTICS)}


def check_sweep(eps_list) -> np.ndarray:
    eps = np.sort(np.asarray(eps_list, dtype=float))[::-1]
    if eps.size < 4 or eps[0] / eps[-1] < 4 - 1e-12:
        raise ValueError("need at least 4 eps values spanning at least 2 octaves")
    return eps


def remainder_rates(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, ubar: ControlPath,
                    pert, eps_list, seeds, xi_sampler: GaussianInitial, offset: float = 0.0,
                    level: float = 0.9, workers: int = 1, n_boot: int = 2000) -> RateReport:
    """E sup-norm statistics of the remainders across an eps sweep, common noise per seed."""
    eps = check_sweep(eps_list)
    N = ubar.N

    def one(seed):
        base = simulate(model, space, grid, ubar, N, xi_sampler, seed)
        rows = []
        for e in eps:
            spike = make_spike_control(ubar, pert, e, offset, grid, model.control_set)
            pert_path = simulate(model, space, grid, spike, N, xi_sampler, seed, noise=base.noise)
            first = solve_first_variation(model, space, base, ubar, spike)
            second = solve_second_variation(model, space, base, first, ubar, spike)
            st = remainder_statistics(pert_path, base, first, second)
            rows.append([st[s] for s in STATISTICS])
        return rows

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_seed = np.array(list(pool.map(one, seeds)))
    else:
        per_seed = np.array([one(s) for s in seeds])
    means = per_seed.mean(axis=0)
    slopes = {name: loglog_slope(eps, means[:, s]) for s, name in enumerate(STATISTICS)}
    ci = bootstrap_slopes(eps, per_seed, level, n_boot, seed=int(seeds[0]))
    return RateReport(eps, per_seed, slopes, ci, level, [int(s) for s in seeds])


# -- smoothing -------------------------------------------------------------------

def phi_identity(k, t, x):
    return np.eye(x.shape[1])


def phi_oscillating(k, t, x):
    n = x.shape[1]
    c, s = np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)
    out = c * np.eye(n)
    if n > 1:
        out = out + 0.5 * s * np.eye(n, k=1)
    return out


def phi_state(k, t, x):
    """Bounded path-dependent weight diag(1 + tanh(x))."""
    N, n = x.shape
    out = np.zeros((N, n, n))
    idx = np.arange(n)
    out[:, idx, idx] = 1.0 + np.tanh(x)
    return out


TEST_PROCESSES = {"identity": phi_identity, "oscillating": phi_oscillating, "state": phi_state}


def smoothing_estimate(base: StatePath, first: VariationPath, phi) -> float:
    """sum_k |(1/N) sum_i phi_k^i y_k^i|^2 dt."""
    M, dt = base.grid.M, base.grid.dt
    total = 0.0
    for k in range(M):
        w = phi(k, k * dt, base.x[k])
        w = np.asarray(w, dtype=float)
        if w.ndim == 2:
            v = first.y[k].mean(axis=0) @ w.T
        else:
            v = np.einsum("nij,nj->i", w, first.y[k]) / base.N
        total += float(v @ v) * dt
    return total


@dataclass
class SmoothingReport:
    eps: np.ndarray
    ratios: dict                # name -> array over eps (mean over seeds)

    def decreasing(self, name) -> bool:
        r = self.ratios[name]
        return bool(np.all(r[:-1] > r[1:]))


def smoothing_sweep(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, ubar: ControlPath,
                    pert, eps_list, seeds, xi_sampler: GaussianInitial, phis=None,
                    offset: float = 0.0, workers: int = 1) -> SmoothingReport:
    eps = check_sweep(eps_list)
    phis = phis or TEST_PROCESSES
    N = ubar.N

    def one(seed):
        base = simulate(model, space, grid, ubar, N, xi_sampler, seed)
        out = np.empty((len(phis), eps.size))
        for j, e in enumerate(eps):
            spike = make_spike_control(ubar, pert, e, offset, grid, model.control_set)
            first = solve_first_variation(model, space, base, ubar, spike)
            for i, phi in enumerate(phis.values()):
                out[i, j] = smoothing_estimate(base, first, phi) / e
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            res = np.array(list(pool.map(one, seeds)))
    else:
        res = np.array([one(s) for s in seeds])
    mean = res.mean(axis=0)
    return SmoothingReport(eps, {name: mean[i] for i, name in enumerate(phis)})
