"""Hamiltonian, maximum-principle gaps, cost expansion and control improvement."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .adjoint import FirstAdjointPath, SecondAdjointPath, solve_first_adjoint, solve_second_adjoint
from .coefficients import CoefficientModel, ControlError
from .forward import (ControlPath, GaussianInitial, StatePath, TimeGrid, cost, cost_per_particle,
                      make_spike_control, simulate)
from .galerkin import GalerkinSpace, hs_inner
from .variation import check_sweep


def _as_batch(u, N):
    u = np.asarray(u, dtype=float)
    if u.ndim <= 1:
        u = np.broadcast_to(np.atleast_1d(u), (N, np.atleast_1d(u).size))
    return u


def hamiltonian(model: CoefficientModel, space: GalerkinSpace, t: float, x, m: float, u, p, q) -> np.ndarray:
    """<p, a> + <q, b>_{L2^0} - f per particle.

    ``x`` is (N, n); ``u`` is (N, d) or a single control shared by all rows.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = _as_batch(u, x.shape[0])
    if not np.all(model.control_set.contains(u)):
        raise ControlError("control is not in U")
    p = np.broadcast_to(np.asarray(p, dtype=float), x.shape)
    q = np.broadcast_to(np.asarray(q, dtype=float), (x.shape[0], space.n_state, space.n_noise))
    return (np.einsum("ni,ni->n", p, model.a(t, x, m, u)) + hs_inner(space, q, model.b(t, x, m, u))
            - model.f(t, x, m, u))


def hamiltonian_u(model: CoefficientModel, space: GalerkinSpace, t: float, x, m: float, u, p, q) -> np.ndarray:
    """Gradient of the Hamiltonian in the control, (N, d)."""
    return (np.einsum("ni,nic->nc", p, model.a_u(t, x, m, u))
            + np.einsum("nij,nijc,j->nc", q, model.b_u(t, x, m, u), space.hs_weights)
            - model.f_u(t, x, m, u))


def second_order_term(space: GalerkinSpace, P: np.ndarray, db: np.ndarray) -> np.ndarray:
    """<P db, db>_{L2^0} per particle; P is (N or 1, n, n) and db (N, n, w)."""
    return np.einsum("nij,nik,nkj,j->n", db, np.broadcast_to(P, (db.shape[0],) + P.shape[1:]), db,
                     space.hs_weights)


# -- maximum-principle gap ---------------------------------------------------------

@dataclass
class SMPGapReport:
    times: np.ndarray
    controls: np.ndarray      # (G, d) candidate controls
    mean: np.ndarray          # (M, G) particle-mean gap
    se: np.ndarray            # (M, G) standard error of the particle mean
    below: np.ndarray         # (M, N) min over candidates of the per-particle gap
    tol: float | None = None
    dt_bias: float | None = None

    @property
    def min_mean(self) -> float:
        return float(np.min(self.mean))

    @property
    def argmin(self) -> tuple:
        k, g = np.unravel_index(int(np.argmin(self.mean)), self.mean.shape)
        return int(k), int(g)

    def fraction_below(self, tol: float | None = None) -> float:
        tol = self.tol if tol is None else tol
        return float(np.mean(self.below < -tol))

    def passed(self, tol: float | None = None) -> bool:
        tol = self.tol if tol is None else tol
        return bool(self.min_mean >= -tol and self.fraction_below(tol) < 0.01)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"u{c}" for c in range(self.controls.shape[1])] + ["gap_mean", "gap_se"])
            for k, t in enumerate(self.times):
                for g, u in enumerate(self.controls):
                    w.writerow([k, repr(float(t))] + [repr(float(v)) for v in u]
                               + [repr(float(self.mean[k, g])), repr(float(self.se[k, g]))])

    def summary(self) -> dict:
        k, g = self.argmin
        return {"min_mean_gap": self.min_mean, "argmin_step": k, "argmin_control": self.controls[g].tolist(),
                "tol": self.tol, "dt_bias": self.dt_bias, "max_se": float(np.max(self.se)),
                "fraction_below_tol": None if self.tol is None else self.fraction_below(),
                "passed": None if self.tol is None else self.passed()}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def smp_gap(model: CoefficientModel, space: GalerkinSpace, base: StatePath, ubar: ControlPath,
            adj1: FirstAdjointPath, adj2: SecondAdjointPath, u_grid=None) -> SMPGapReport:
    """g = H(ubar) - H(u) - 1/2 <P db, db> with db = b(ubar) - b(u), for every step and candidate u.

    ``u_grid`` is a (G, d) array of candidates, or None for the 9-point
    grid of the control set. Candidates ``"self"`` evaluate u = ubar only.
    """
    M, dt, N = base.grid.M, base.grid.dt, base.N
    self_only = isinstance(u_grid, str) and u_grid == "self"
    if u_grid is None:
        u_grid = model.control_set.grid(9)
    if self_only:
        cands = np.full((1, model.control_dim), np.nan)
    else:
        cands = np.atleast_2d(np.asarray(u_grid, dtype=float))
        if not np.all(model.control_set.contains(cands)):
            raise ControlError("candidate controls must lie in U")
    G = cands.shape[0]
    mean = np.empty((M, G))
    se = np.empty((M, G))
    below = np.full((M, N), np.inf)
    for k in range(M):
        t = k * dt
        x, m, ub = base.x[k], base.m[k], ubar.values[k]
        p, q, P = adj1.p_pred[k], adj1.q[k], adj2.P_pred[k]
        h_bar = hamiltonian(model, space, t, x, m, ub, p, q)
        b_bar = model.b(t, x, m, ub)
        for g in range(G):
            u = ub if self_only else np.broadcast_to(cands[g], ub.shape)
            db = b_bar - model.b(t, x, m, u)
            gap = h_bar - hamiltonian(model, space, t, x, m, u, p, q) - 0.5 * second_order_term(space, P, db)
            mean[k, g] = gap.mean()
            se[k, g] = gap.std(ddof=1) / np.sqrt(N) if N > 1 else 0.0
            below[k] = np.minimum(below[k], gap)
    return SMPGapReport(np.arange(M) * dt, cands, mean, se, below)


def _adjoints(model, space, base, control, method, second_method):
    adj1 = solve_first_adjoint(model, space, base, control, method=method)
    adj2 = solve_second_adjoint(model, space, base, control, adj1, method=second_method)
    return adj1, adj2


def smp_check(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, ubar: ControlPath,
              xi_sampler: GaussianInitial, seed: int, u_grid=None, method: str = "picard_regression",
              second_method: str = "regression", workers: int = 1) -> SMPGapReport:
    """Gap report with a calibrated tolerance 3 max SE + dt bias.

    The dt bias is the largest change of the particle-mean gap between the
    run on ``grid`` and a run on the halved grid that shares its Brownian
    path, with the control held on each coarse step.
    """
    N = ubar.N
    coarse = simulate(model, space, grid, ubar, N, xi_sampler, seed, refine=2, workers=workers)
    adj1, adj2 = _adjoints(model, space, coarse, ubar, method, second_method)
    report = smp_gap(model, space, coarse, ubar, adj1, adj2, u_grid)
    fine_grid = grid.refined(2)
    fine_u = ubar.refined(2)
    fine = simulate(model, space, fine_grid, fine_u, N, xi_sampler, seed, workers=workers)
    f1, f2 = _adjoints(model, space, fine, fine_u, method, second_method)
    self_only = isinstance(u_grid, str) and u_grid == "self"
    fine_report = smp_gap(model, space, fine, fine_u, f1, f2, "self" if self_only else report.controls)
    bias = float(np.max(np.abs(report.mean - fine_report.mean[::2])))
    report.dt_bias = bias
    report.tol = 3.0 * float(np.max(report.se)) + bias
    return report


def perturb_control(ubar: ControlPath, grid: TimeGrid, shift, window=(0.25, 0.75), control_set=None) -> ControlPath:
    """ubar shifted by ``shift`` on the time window, projected back onto U."""
    vals = ubar.values.copy()
    t = np.arange(grid.M) * grid.dt
    sel = (t >= window[0]) & (t < window[1])
    vals[sel] = vals[sel] + np.asarray(shift, dtype=float)
    if control_set is not None:
        vals = control_set.project(vals.reshape(-1, vals.shape[-1])).reshape(vals.shape)
    return ControlPath(vals)


# -- cost expansion ----------------------------------------------------------------------

@dataclass
class ExpansionReport:
    eps: np.ndarray            # realized window lengths
    requested: np.ndarray
    delta_cost: np.ndarray     # J(u_eps) - J(ubar)
    predicted: np.ndarray      # -E sum_E (dH + 1/2 <P db, db>) dt
    se: np.ndarray             # standard error of the per-particle cost difference

    @property
    def remainder(self) -> np.ndarray:
        return self.delta_cost - self.predicted

    @property
    def ratio(self) -> np.ndarray:
        return np.abs(self.remainder) / self.eps

    @property
    def decreasing(self) -> bool:
        r = self.ratio
        return bool(np.all(r[1:] < r[:-1]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "requested_eps", "delta_cost", "predicted", "remainder", "ratio", "se"])
            for row in zip(self.eps, self.requested, self.delta_cost, self.predicted, self.remainder,
                           self.ratio, self.se):
                w.writerow([repr(float(v)) for v in row])

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"eps": self.eps.tolist(), "ratio": self.ratio.tolist(),
                       "remainder": self.remainder.tolist(), "decreasing": self.decreasing}, fh, indent=2)


def expansion_terms(model, space, base, ubar, spike, adj1, adj2) -> np.ndarray:
    """Per-particle sum over the window of (dH + 1/2 <P db, db>) dt."""
    dt = base.grid.dt
    total = np.zeros(base.N)
    for k in spike.spike.steps:
        t = k * dt
        x, m = base.x[k], base.m[k]
        ub, ue = ubar.values[k], spike.values[k]
        p, q, P = adj1.p_pred[k], adj1.q[k], adj2.P_pred[k]
        dH = hamiltonian(model, space, t, x, m, ue, p, q) - hamiltonian(model, space, t, x, m, ub, p, q)
        db = model.b(t, x, m, ue) - model.b(t, x, m, ub)
        total += dt * (dH + 0.5 * second_order_term(space, P, db))
    return total


def cost_expansion_check(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, ubar: ControlPath,
                         pert, eps_list, xi_sampler: GaussianInitial, seed: int, offset: float = 0.0,
                         adj1: FirstAdjointPath | None = None, adj2: SecondAdjointPath | None = None,
                         method: str = "picard_regression", second_method: str = "regression",
                         base: StatePath | None = None) -> ExpansionReport:
    """Remainder R(eps) = J(u_eps) - J(ubar) + E sum_E (dH + 1/2 <P db, db>) dt across a sweep.

    All runs share the Brownian path of the base run.
    """
    eps = check_sweep(eps_list)
    N = ubar.N
    if base is None:
        base = simulate(model, space, grid, ubar, N, xi_sampler, seed)
    if adj1 is None:
        adj1 = solve_first_adjoint(model, space, base, ubar, method=method)
    if adj2 is None:
        adj2 = solve_second_adjoint(model, space, base, ubar, adj1, method=second_method)
    j_bar = cost_per_particle(model, base)
    realized, dcost, pred, se = [], [], [], []
    for e in eps:
        spike = make_spike_control(ubar, pert, e, offset, grid, model.control_set)
        path = simulate(model, space, grid, spike, N, xi_sampler, seed, noise=base.noise)
        diff = cost_per_particle(model, path) - j_bar
        realized.append(spike.spike.eps)
        dcost.append(float(diff.mean()))
        se.append(float(diff.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0)
        pred.append(-float(expansion_terms(model, space, base, ubar, spike, adj1, adj2).mean()))
    return ExpansionReport(np.array(realized), eps, np.array(dcost), np.array(pred), np.array(se))


# -- control improvement -------------------------------------------------------------------

@dataclass
class ImprovementResult:
    control: ControlPath
    cost: float
    history: list = field(default_factory=list)
    improved: bool = True           # False when no iteration lowered the cost


def _is_common(values: np.ndarray) -> bool:
    return bool(np.all(values == values[:, :1]))


def improve_control(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, init: ControlPath,
                    xi_sampler: GaussianInitial, seed: int, iterations: int = 20, step: float = 1.0,
                    method: str = "picard_regression", second_method: str = "regression",
                    open_loop: bool | None = None, rtol: float = 1e-12) -> ImprovementResult:
    """Successive approximation with a best-so-far guard.

    Box sets take a projected ascent step along the control gradient of the
    Hamiltonian; the step halves whenever the cost does not drop. Finite
    sets move to the maximizer of H(u) + 1/2 <P (b(u) - b(ubar)), (b(u) -
    b(ubar))>, which equals H at ubar; if the cost does not drop only the
    times with the largest gains are updated, halving that share each time.
    Every evaluation reuses the Brownian path of ``seed``.
    """
    U = model.control_set
    init.check(U)
    N = init.N
    if open_loop is None:
        open_loop = _is_common(init.values)
    if U.kind == "finite_grid" and len(U.points) == 1:
        base = simulate(model, space, grid, init, N, xi_sampler, seed)
        return ImprovementResult(init, cost(model, base), [cost(model, base)], False)
    current = init
    base = simulate(model, space, grid, current, N, xi_sampler, seed)
    best_cost = cost(model, base)
    history = [best_cost]
    improved = False
    share = 1.0
    dt = grid.dt
    for _ in range(iterations):
        adj1 = solve_first_adjoint(model, space, base, current, method=method)
        if U.kind == "box":
            proposal = np.empty_like(current.values)
            for k in range(grid.M):
                x, m, u = base.x[k], base.m[k], current.values[k]
                g = hamiltonian_u(model, space, k * dt, x, m, u, adj1.p_pred[k], adj1.q[k])
                if open_loop:
                    g = np.broadcast_to(g.mean(axis=0), g.shape)
                proposal[k] = U.project(u + step * g)
        else:
            adj2 = solve_second_adjoint(model, space, base, current, adj1, method=second_method)
            proposal, gain = _grid_proposal(model, space, base, current, adj1, adj2, open_loop)
            if share < 1.0:
                keep = gain < np.quantile(gain, 1.0 - share)
                proposal[keep] = current.values[keep]
        cand = ControlPath(proposal)
        cand_path = simulate(model, space, grid, cand, N, xi_sampler, seed, noise=base.noise)
        c = cost(model, cand_path)
        history.append(c)
        if c < best_cost - rtol * max(1.0, abs(best_cost)):
            best_cost, current, base = c, cand, cand_path
            improved = True
        else:
            if U.kind == "box":
                step *= 0.5
            else:
                share *= 0.5
            if step < 1e-8 or share < 1.0 / (grid.M * 4):
                break
    return ImprovementResult(current, best_cost, history, improved)


def _grid_proposal(model, space, base, current, adj1, adj2, open_loop):
    """Per-step maximizer of the second-order augmented Hamiltonian over a finite set."""
    U = model.control_set
    dt = base.grid.dt
    M, N = current.M, current.N
    pts = U.points
    proposal = current.values.copy()
    gain = np.zeros((M, N))
    for k in range(M):
        x, m, ub = base.x[k], base.m[k], current.values[k]
        p, q, P = adj1.p_pred[k], adj1.q[k], adj2.P_pred[k]
        h_bar = hamiltonian(model, space, k * dt, x, m, ub, p, q)
        b_bar = model.b(k * dt, x, m, ub)
        vals = np.empty((len(pts), N))
        for g, pt in enumerate(pts):
            u = np.broadcast_to(pt, ub.shape)
            db = model.b(k * dt, x, m, u) - b_bar
            vals[g] = hamiltonian(model, space, k * dt, x, m, u, p, q) + 0.5 * second_order_term(space, P, db)
        if open_loop:
            j = int(np.argmax(vals.mean(axis=1)))
            proposal[k] = pts[j]
            gain[k] = vals[j].mean() - h_bar.mean()
        else:
            j = np.argmax(vals, axis=0)
            proposal[k] = pts[j]
            gain[k] = vals[j, np.arange(N)] - h_bar
    return proposal, gain
