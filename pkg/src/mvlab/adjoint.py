"""Backward solvers for the first- and second-order adjoint equations.

Both solvers run backward Euler on the particle grid. Writing ``S`` for the
one-step semigroup and ``dW_k`` for the recorded increments, every step
forms the predicted quantities

    p_pred = E_k[S p_{k+1}]           q_j = coefficient of dW_j in S p_{k+1}
    P_pred = E_k[S P_{k+1} S]         Q_j = coefficient of dW_j in S P_{k+1} S

by least squares on degree-2 polynomial features of the state (the law
statistic is constant across particles at a fixed step and sits in the
intercept). The predicted quantities pair exactly with the forward scheme,
so the duality identities hold step by step up to regression and sampling
error; the verifiers below measure them on the continuous-time left-point
form, which leaves an O(dt) residual.

Law-dependent driver terms of the first adjoint are frozen from the previous
Picard iterate.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .coefficients import CoefficientModel
from .forward import ControlPath, StatePath
from .galerkin import TEST, GalerkinSpace, hs_inner, philox

RIDGE = 1e-8
SYMMETRY_WARN = 1e-8


class PicardDivergence(RuntimeError):
    def __init__(self, ratios):
        self.ratios = list(ratios)
        super().__init__(f"Picard iteration is not contracting; last distance ratios {self.ratios}")


# -- regression ----------------------------------------------------------------

def poly_features(x: np.ndarray) -> np.ndarray:
    """Constant, linear and quadratic monomials of standardized coordinates."""
    N, n = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    z = np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    cols = [np.ones(N)]
    cols.extend(z[:, i] for i in range(n))
    cols.extend(z[:, i] * z[:, j] for i in range(n) for j in range(i, n))
    return np.column_stack(cols)


class StepRegression:
    """Joint least squares of a target on [phi(x), phi(x) dW_j / sd_j] at one step.

    The normal-equation factorization is computed once and reused for every
    target regressed at this step.
    """

    def __init__(self, x: np.ndarray, dW: np.ndarray, dt: float, weights: np.ndarray, ridge: float = RIDGE):
        self.phi = poly_features(x)
        self.scale = np.sqrt(weights * dt)
        self.xi = dW / self.scale
        design = self._design()
        N, F = design.shape
        gram = design.T @ design / N
        gram[np.diag_indices(F)] += ridge
        self.factor = cho_factor(gram)

    def _design(self):
        blocks = [self.phi] + [self.phi * self.xi[:, j:j + 1] for j in range(self.xi.shape[1])]
        return np.hstack(blocks)

    def fit(self, target: np.ndarray):
        """Return (conditional mean, dW coefficients) for an (N, ...) target.

        The coefficients have shape (N, w, ...).
        """
        N = target.shape[0]
        Y = target.reshape(N, -1)
        design = self._design()
        beta = cho_solve(self.factor, design.T @ Y / N)
        F = self.phi.shape[1]
        mean = self.phi @ beta[:F]
        w = self.xi.shape[1]
        coef = np.stack([self.phi @ beta[F * (j + 1):F * (j + 2)] / self.scale[j] for j in range(w)], axis=1)
        return mean.reshape(target.shape), coef.reshape((N, w) + target.shape[1:])


def _regressions(space: GalerkinSpace, base: StatePath, start: int = 0, ridge: float = RIDGE):
    dt = base.grid.dt
    return {k: StepRegression(base.x[k], base.noise[k], dt, space.hs_weights, ridge)
            for k in range(start, base.grid.M)}


# -- first adjoint ---------------------------------------------------------------

@dataclass
class FirstAdjointPath:
    p: np.ndarray          # (M+1, N, n)
    p_pred: np.ndarray     # (M, N, n)
    q: np.ndarray          # (M, N, n, w)
    driver: np.ndarray     # (M, N, n); dp = -A*p dt + driver dt + q dW
    law_term: np.ndarray   # (M, n) frozen law-dependent part of the driver
    method: str
    distances: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.p_pred.shape[0]

    def to_csv(self, path) -> None:
        M1, N, n = self.p.shape
        w = self.q.shape[-1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "particle"] + [f"p{i}" for i in range(n)]
                        + [f"q{i}_{j}" for i in range(n) for j in range(w)])
            for k in range(M1):
                for i in range(N):
                    qs = self.q[k, i].reshape(-1) if k < M1 - 1 else np.full(n * w, np.nan)
                    wr.writerow([k, i] + [repr(float(v)) for v in self.p[k, i]] + [repr(float(v)) for v in qs])


def first_terminal(model: CoefficientModel, x: np.ndarray, m: float) -> np.ndarray:
    """-h_x(x_i) - psi * mean_j h_m(x_j)."""
    return -model.h_x(x, m) - model.psi * float(np.mean(model.h_m(x, m)))


def _bx_star(space: GalerkinSpace, bx: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(b_x^* q)_l = sum_ij b_x[i, j, l] q_ij w_j, batched."""
    return np.einsum("nijl,nij,j->nl", bx, q, space.hs_weights)


def _law_term(model, space, t, x, m, u, p_pred, q) -> np.ndarray:
    s = (np.einsum("ni,ni->n", model.a_m(t, x, m, u), p_pred)
         + hs_inner(space, model.b_m(t, x, m, u), q) - model.f_m(t, x, m, u))
    return model.psi * float(np.mean(s))


def _distance(dp: np.ndarray, dq: np.ndarray, space: GalerkinSpace, dt: float) -> float:
    """max_k (E|dp_k|^2)^(1/2) + (sum_k E|dq_k|^2 dt)^(1/2)."""
    sup = float(np.sqrt(np.max(np.mean(np.sum(dp**2, axis=-1), axis=-1))))
    integral = float(np.sqrt(np.sum(np.mean(hs_inner(space, dq, dq), axis=-1)) * dt))
    return sup + integral


def _first_sweep(model, space, base, ubar, regs, start, law_terms):
    """One backward sweep over steps start..M-1 with frozen law terms (M, n)."""
    M, dt = base.grid.M, base.grid.dt
    S = space.decay(dt)
    N, n, w = base.N, space.n_state, space.n_noise
    p = np.empty((M + 1, N, n))
    p_pred = np.zeros((M, N, n))
    q = np.zeros((M, N, n, w))
    driver = np.zeros((M, N, n))
    p[M] = first_terminal(model, base.x[M], base.m[M])
    fresh = np.zeros((M, n))
    for k in range(M - 1, start - 1, -1):
        t = k * dt
        x, m, u = base.x[k], base.m[k], ubar.values[k]
        p_pred[k], qk = regs[k].fit(S * p[k + 1])
        q[k] = np.moveaxis(qk, 1, -1)
        ax = model.a_x(t, x, m, u)
        local = (np.einsum("nji,nj->ni", ax, p_pred[k]) + _bx_star(space, model.b_x(t, x, m, u), q[k])
                 - model.f_x(t, x, m, u))
        fresh[k] = _law_term(model, space, t, x, m, u, p_pred[k], q[k])
        driver[k] = -(local + law_terms[k])
        p[k] = p_pred[k] - dt * driver[k]
    p[:start] = np.nan
    return p, p_pred, q, driver, fresh


def _picard(model, space, base, ubar, start, tol, max_iters, ridge, regs=None, strict=True):
    regs = regs if regs is not None else _regressions(space, base, start, ridge)
    M, dt = base.grid.M, base.grid.dt
    law = np.zeros((M, space.n_state))
    prev = None
    distances = []
    for _ in range(max_iters):
        p, p_pred, q, driver, fresh = _first_sweep(model, space, base, ubar, regs, start, law)
        if prev is not None:
            d = _distance(p[start:] - prev[0][start:], q[start:] - prev[1][start:], space, dt)
            distances.append(d)
            ratios = _ratios(distances)
            if strict and len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
                raise PicardDivergence(ratios[-3:])
            if d <= tol:
                break
        prev = (p, q)
        law = fresh
    return FirstAdjointPath(p, p_pred, q, driver, law, "picard_regression", distances)


def _ratios(distances):
    out = []
    for a, b in zip(distances[:-1], distances[1:]):
        out.append(b / a if a > 0 else 0.0)
    return out


def _lq_closed_form(model, space, base, ubar):
    """Affine representation p = -(Gamma x + gamma) with deterministic Gamma."""
    if not model.is_linear or np.any(model.params["Axu"]) or np.any(model.params["Bxu"]):
        raise ValueError("lq_closed_form needs a linear model without state-control products")
    M, dt = base.grid.M, base.grid.dt
    S = space.decay(dt)
    N, n, w = base.N, space.n_state, space.n_noise
    wts = space.hs_weights
    psi = model.psi
    p = np.empty((M + 1, N, n))
    p_pred = np.empty((M, N, n))
    q = np.empty((M, N, n, w))
    driver = np.empty((M, N, n))
    law = np.empty((M, n))
    pr = model.params
    xM, mM = base.x[M], base.m[M]
    Gamma = pr["Hxx"].copy()
    gamma = (pr["hx"] + mM * pr["hxm"]) + psi * (pr["hmm"] * mM + pr["hm"] + pr["hxm"] @ xM.mean(axis=0))
    gamma = np.broadcast_to(gamma, (N, n)).copy()
    p[M] = -(xM @ Gamma.T + gamma)
    for k in range(M - 1, -1, -1):
        t = k * dt
        pr = model.coefficients_at(t)
        x, m, u = base.x[k], base.m[k], ubar.values[k]
        G = S[:, None] * Gamma * S[None, :]
        L = np.eye(n) + dt * pr["Ax"]
        drift_const = model.a(t, x, m, u) - x @ pr["Ax"].T           # (N, n)
        C1 = np.moveaxis(pr["Bx"], 0, -1)                             # (i, j, l)
        bcol = model.b(t, x, m, u)                                    # (N, n, w)
        d = bcol - np.einsum("ijl,nl->nij", C1, x)
        p_pred[k] = -(x + dt * model.a(t, x, m, u)) @ G.T - gamma * S
        q[k] = -np.einsum("ik,nkj->nij", G, bcol)
        law[k] = _law_term(model, space, t, x, m, u, p_pred[k], q[k])
        Gamma = (L.T @ G @ L + dt * np.einsum("j,kji,kl,ljm->im", wts, C1, G, C1)
                 + dt * pr["Fxx"])
        gamma = ((drift_const * dt) @ G.T + gamma * S) @ L
        gamma = gamma + dt * np.einsum("j,kji,nkj->ni", wts, C1, np.einsum("ik,nkj->nij", G, d))
        gamma = gamma + dt * (pr["fx"] + m * pr["fxm"]) - dt * law[k]
        p[k] = -(x @ Gamma.T + gamma)
        driver[k] = (p_pred[k] - p[k]) / dt
    return FirstAdjointPath(p, p_pred, q, driver, law, "lq_closed_form", [])


def solve_first_adjoint(model: CoefficientModel, space: GalerkinSpace, base: StatePath, ubar: ControlPath,
                        method: str = "picard_regression", tol: float = 1e-10, max_iters: int = 60,
                        ridge: float = RIDGE) -> FirstAdjointPath:
    """Solve the first adjoint along (base, ubar).

    ``picard_regression`` freezes the law terms from the previous iterate and
    stops when the surrogate distance between iterates drops below ``tol``.
    ``lq_closed_form`` propagates the affine representation of a linear model.
    """
    if ubar.values.shape[:2] != (base.grid.M, base.N):
        raise ValueError("control path does not match the base path")
    if method == "picard_regression":
        return _picard(model, space, base, ubar, 0, tol, max_iters, ridge)
    if method == "lq_closed_form":
        return _lq_closed_form(model, space, base, ubar)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class ContractionReport:
    lengths: np.ndarray
    factors: np.ndarray            # max successive-distance ratio per sub-horizon
    distances: list                # distance sequences per sub-horizon
    diverged: list

    @property
    def nondecreasing(self) -> bool:
        f = self.factors
        return bool(np.all(f[1:] >= f[:-1] - 1e-12))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"lengths": self.lengths.tolist(), "factors": self.factors.tolist(),
                       "distances": self.distances, "diverged": self.diverged}, fh, indent=2)


def picard_contraction_probe(model: CoefficientModel, space: GalerkinSpace, base: StatePath, ubar: ControlPath,
                             horizon_splits, max_iters: int = 30, tol: float = 1e-13,
                             ridge: float = RIDGE) -> ContractionReport:
    """Empirical contraction factor of the Picard map on [T - L, T] for each length L.

    The factor is the largest ratio of successive iterate distances. A
    sub-horizon whose ratios stay at or above 1 is flagged as diverged.
    """
    lengths = np.sort(np.asarray(horizon_splits, dtype=float))
    if lengths.size < 2:
        raise ValueError("need at least two sub-horizon lengths")
    M, dt = base.grid.M, base.grid.dt
    regs = None
    factors, seqs, diverged = [], [], []
    for L in lengths:
        steps = int(round(L / dt))
        if not 1 <= steps <= M:
            raise ValueError(f"sub-horizon {L} is not a positive multiple of dt within T")
        start = M - steps
        if regs is None:
            regs = _regressions(space, base, 0, ridge)
        adj = _picard(model, space, base, ubar, start, tol, max_iters, ridge, regs=regs, strict=False)
        ratios = _ratios(adj.distances)
        factors.append(max(ratios) if ratios else 0.0)
        seqs.append(adj.distances)
        diverged.append(bool(len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:])))
    return ContractionReport(lengths, np.array(factors), seqs, diverged)


# -- duality checks ----------------------------------------------------------------

@dataclass
class TranspositionReport:
    """Sides of each tested identity.

    The relative residual divides by max(|lhs|, |rhs|, scale), where
    ``scale`` is an optional magnitude such as the largest term of the
    identity.
    """
    names: list
    lhs: np.ndarray
    rhs: np.ndarray
    scale: np.ndarray | None = None

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.lhs - self.rhs)

    @property
    def relative(self) -> np.ndarray:
        scale = np.maximum(np.abs(self.lhs), np.abs(self.rhs))
        if self.scale is not None:
            scale = np.maximum(scale, self.scale)
        return np.divide(self.residual, scale, out=np.zeros_like(scale), where=scale > 0)

    @property
    def worst(self) -> float:
        return float(np.max(self.relative)) if len(self.names) else 0.0

    def as_dict(self) -> dict:
        return {name: {"lhs": float(l), "rhs": float(r), "residual": float(e), "relative": float(rel)}
                for name, l, r, e, rel in zip(self.names, self.lhs, self.rhs, self.residual, self.relative)}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2)


@dataclass
class TestProcess:
    """Forward test equation given by its realized initial value, drift and diffusion.

    ``x`` has shape (M+1, N, n); ``drift`` (M, N, n); ``diffusion`` (M, N, n, w).
    """
    name: str
    x: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray


def random_linear_test(model: CoefficientModel, space: GalerkinSpace, base: StatePath, seed: int,
                       index: int, scale: float = 0.5) -> TestProcess:
    """Test process with random affine drift and diffusion in (x, particle mean of x).

    The initial value is an affine function of the base initial state.
    """
    n, w = space.n_state, space.n_noise
    rng = philox(seed, TEST, index)
    c0, C0 = rng.normal(size=n), scale * rng.normal(size=(n, n))
    r0, R1, R2 = scale * rng.normal(size=n), scale * rng.normal(size=(n, n)), scale * rng.normal(size=(n, n))
    s0, S1 = scale * rng.normal(size=(n, w)), scale * rng.normal(size=(n, w, n))
    M, dt = base.grid.M, base.grid.dt
    S = space.decay(dt)
    N = base.N
    x = np.empty((M + 1, N, n))
    drift = np.empty((M, N, n))
    diff = np.empty((M, N, n, w))
    x[0] = c0 + base.x[0] @ C0.T
    for k in range(M):
        xm = x[k].mean(axis=0)
        drift[k] = r0 + x[k] @ R1.T + xm @ R2.T
        diff[k] = s0 + np.einsum("ijl,nl->nij", S1, x[k])
        x[k + 1] = S * (x[k] + drift[k] * dt + np.einsum("nij,nj->ni", diff[k], base.noise[k]))
    return TestProcess(f"random_{index}", x, drift, diff)


def zero_test(space: GalerkinSpace, base: StatePath) -> TestProcess:
    M, N, n, w = base.grid.M, base.N, space.n_state, space.n_noise
    return TestProcess("zero", np.zeros((M + 1, N, n)), np.zeros((M, N, n)), np.zeros((M, N, n, w)))


def first_duality_terms(space: GalerkinSpace, adj: FirstAdjointPath, test: TestProcess, dt: float) -> np.ndarray:
    """The five expectations of the first duality identity in left-point form.

    Order: terminal pairing, driver integral, initial pairing, drift integral,
    diffusion integral. The identity reads terms[0] - terms[1] = sum(terms[2:]).
    """
    M = adj.M
    return np.array([
        float(np.mean(np.sum(test.x[M] * adj.p[M], axis=-1))),
        dt * float(np.sum(np.mean(np.sum(test.x[:M] * adj.driver, axis=-1), axis=-1))),
        float(np.mean(np.sum(test.x[0] * adj.p[0], axis=-1))),
        dt * float(np.sum(np.mean(np.sum(test.drift * adj.p[:M], axis=-1), axis=-1))),
        dt * float(np.sum(np.mean(hs_inner(space, test.diffusion, adj.q), axis=-1))),
    ])


def first_duality_sides(space: GalerkinSpace, adj: FirstAdjointPath, test: TestProcess, dt: float):
    """Left and right sides of the first duality identity in left-point form."""
    terms = first_duality_terms(space, adj, test, dt)
    return float(terms[0] - terms[1]), float(np.sum(terms[2:]))


def verify_transposition_first(model: CoefficientModel, space: GalerkinSpace, base: StatePath,
                               adj: FirstAdjointPath, test_source_count: int = 3, seed: int = 0,
                               instances=()) -> TranspositionReport:
    """Check the first duality identity against random forward test equations.

    Each residual is normalized by the largest single term of its identity,
    so a test whose two sides nearly cancel does not inflate the relative
    error. ``instances`` holds extra ``TestProcess`` objects (for example the
    first variation under a spike).
    """
    tests = [random_linear_test(model, space, base, seed, i) for i in range(test_source_count)]
    tests.extend(instances)
    names, lhs, rhs, scale = [], [], [], []
    for test in tests:
        terms = first_duality_terms(space, adj, test, base.grid.dt)
        names.append(test.name)
        lhs.append(terms[0] - terms[1])
        rhs.append(np.sum(terms[2:]))
        scale.append(np.max(np.abs(terms)))
    return TranspositionReport(names, np.array(lhs), np.array(rhs), np.array(scale))


# -- second adjoint ----------------------------------------------------------------

@dataclass
class SecondAdjointPath:
    P: np.ndarray          # (M+1, N or 1, n, n)
    P_pred: np.ndarray     # (M, N or 1, n, n)
    Q: np.ndarray          # (M, N or 1, w, n, n)
    driver: np.ndarray     # (M, N or 1, n, n); F in dP = ... + F dt + Q dW
    deterministic: bool
    include_law_term: bool
    max_asymmetry: float = 0.0

    @property
    def M(self) -> int:
        return self.P_pred.shape[0]

    def to_csv(self, path) -> None:
        M1, N, n, _ = self.P.shape
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "particle"] + [f"P{i}_{j}" for i in range(n) for j in range(n)])
            for k in range(M1):
                for i in range(N):
                    wr.writerow([k, i] + [repr(float(v)) for v in self.P[k, i].reshape(-1)])


def jk_coefficients(model: CoefficientModel, base: StatePath, ubar: ControlPath, k: int,
                    include_law_term: bool = True):
    """J = a_x (N, n, n) and K_j (N, w, n, n) at step k.

    K_j = b_x[:, :, j, :] plus, when requested, the copy-averaged law
    derivative of b: z -> mean_l b_m(x_l)[:, j] <psi, z>.
    """
    t = k * base.grid.dt
    x, m, u = base.x[k], base.m[k], ubar.values[k]
    J = model.a_x(t, x, m, u)
    K = np.moveaxis(model.b_x(t, x, m, u), 2, 1)
    if include_law_term:
        bm = model.b_m(t, x, m, u).mean(axis=0)                   # (n, w)
        K = K + np.einsum("ij,l->jil", bm, model.psi)[None]
    return J, K


def hamiltonian_xx(model: CoefficientModel, space: GalerkinSpace, t, x, m, u, p, q) -> np.ndarray:
    """<p, a_xx> + <q, b_xx> - f_xx per particle."""
    out = np.einsum("ni,nijk->njk", p, model.a_xx(t, x, m, u))
    out = out + np.einsum("nij,nijkl,j->nkl", q, model.b_xx(t, x, m, u), space.hs_weights)
    return out - model.f_xx(t, x, m, u)


def second_terminal(model: CoefficientModel, x: np.ndarray, m: float) -> np.ndarray:
    # the mixed (y, mu) derivative of h vanishes for every shipped family
    return -model.h_xx(x, m)


def _sym(P, where: str):
    asym = float(np.max(np.abs(P - np.swapaxes(P, -1, -2)))) if P.size else 0.0
    if asym > SYMMETRY_WARN:
        warnings.warn(f"second adjoint asymmetry {asym:.3e} at {where}", RuntimeWarning, stacklevel=3)
    return 0.5 * (P + np.swapaxes(P, -1, -2)), asym


def _second_step(P_pred, Q, J, K, H, dt, wts):
    n = J.shape[-1]
    L = np.eye(n) + dt * J
    out = np.einsum("nki,nkl,nlj->nij", L, P_pred, L)
    out = out + dt * np.einsum("j,njki,nkl,njlm->nim", wts, K, P_pred, K)
    if Q is not None:
        KQ = np.einsum("njki,njkl->nil", K, Q * wts[None, :, None, None])
        out = out + dt * (KQ + np.swapaxes(KQ, -1, -2))
    return out + dt * H


def solve_second_adjoint(model: CoefficientModel, space: GalerkinSpace, base: StatePath, ubar: ControlPath,
                         first: FirstAdjointPath, method: str = "regression", include_law_term: bool = True,
                         ridge: float = RIDGE) -> SecondAdjointPath:
    """Backward Euler for the matrix-valued second adjoint.

    ``deterministic_lyapunov`` requires J, K and the driver to be the same
    for every particle and returns one matrix path with Q = 0.
    ``regression`` handles state-dependent coefficients.
    """
    M, dt = base.grid.M, base.grid.dt
    S = space.decay(dt)
    SS = S[:, None] * S[None, :]
    wts = space.hs_weights
    N, n, w = base.N, space.n_state, space.n_noise
    if method not in ("deterministic_lyapunov", "regression"):
        raise ValueError(f"unknown method {method!r}")
    det = method == "deterministic_lyapunov"
    rows = 1 if det else N
    P = np.empty((M + 1, rows, n, n))
    P_pred = np.empty((M, rows, n, n))
    Q = np.zeros((M, rows, w, n, n))
    driver = np.empty((M, rows, n, n))
    term = second_terminal(model, base.x[M], base.m[M])
    if det:
        _require_common(term, "terminal condition")
        term = term[:1]
    P[M] = term
    worst = 0.0
    regs = None if det else _regressions(space, base, 0, ridge)
    for k in range(M - 1, -1, -1):
        t = k * dt
        x, m, u = base.x[k], base.m[k], ubar.values[k]
        J, K = jk_coefficients(model, base, ubar, k, include_law_term)
        H = hamiltonian_xx(model, space, t, x, m, u, first.p_pred[k], first.q[k])
        if det:
            for name, arr in (("a_x", J), ("b_x", K), ("H_xx", H)):
                _require_common(arr, name)
            J, K, H = J[:1], K[:1], H[:1]
            P_pred[k] = SS * P[k + 1]
            Qk = None
        else:
            P_pred[k], Qk = regs[k].fit(SS * P[k + 1])
            Q[k] = Qk
        driver[k] = -H
        raw = _second_step(P_pred[k], Qk, J, K, H, dt, wts)
        P[k], asym = _sym(raw, f"step {k}")
        worst = max(worst, asym)
    return SecondAdjointPath(P, P_pred, Q, driver, det, include_law_term, worst)


def _require_common(arr, name):
    if arr.shape[0] > 1 and np.max(np.abs(arr - arr[:1])) > 1e-12:
        raise ValueError(f"{name} differs across particles; use the regression method")


def second_duality_terms(space: GalerkinSpace, adj: SecondAdjointPath, first_test: TestProcess,
                         second_test: TestProcess, JK, dt: float) -> np.ndarray:
    """The six expectations of the bilinear duality identity in left-point form.

    Order: terminal pairing, driver integral, initial pairing, drift integral,
    diffusion integral, Q integral. The identity reads
    terms[0] - terms[1] = sum(terms[2:]). ``JK(k)`` returns (J, K) at step k;
    the test processes supply their full drift and diffusion, from which
    u_j = drift - J phi and v_j = diffusion - K phi.
    """
    M = adj.M
    f1, f2 = first_test, second_test
    N = f1.x.shape[1]
    full = lambda a: np.broadcast_to(a, (N,) + a.shape[1:])
    terms = np.zeros(6)
    terms[0] = np.mean(np.einsum("nij,nj,ni->n", full(adj.P[M]), f1.x[M], f2.x[M]))
    terms[2] = np.mean(np.einsum("nij,nj,ni->n", full(adj.P[0]), f1.x[0], f2.x[0]))
    for k in range(M):
        J, K = JK(k)
        P, Q = full(adj.P[k]), full(adj.Q[k])
        p1, p2 = f1.x[k], f2.x[k]
        u1 = f1.drift[k] - np.einsum("nij,nj->ni", J, p1)
        u2 = f2.drift[k] - np.einsum("nij,nj->ni", J, p2)
        Kp1 = np.einsum("njil,nl->nij", K, p1)                     # (N, n, w)
        Kp2 = np.einsum("njil,nl->nij", K, p2)
        v1 = f1.diffusion[k] - Kp1
        v2 = f2.diffusion[k] - Kp2
        terms[1] += dt * np.mean(np.einsum("nij,nj,ni->n", full(adj.driver[k]), p1, p2))
        Pu1 = np.einsum("nij,nj->ni", P, u1)
        Pp1 = np.einsum("nij,nj->ni", P, p1)
        terms[3] += dt * np.mean(np.einsum("ni,ni->n", Pu1, p2) + np.einsum("ni,ni->n", Pp1, u2))
        PKp1 = np.einsum("nik,nkj->nij", P, Kp1)
        Pv1 = np.einsum("nik,nkj->nij", P, v1)
        terms[4] += dt * np.mean(hs_inner(space, PKp1, v2) + hs_inner(space, Pv1, Kp2 + v2))
        Qp2 = np.einsum("njik,nk->nij", Q, p2)
        Qp1 = np.einsum("njik,nk->nij", Q, p1)
        terms[5] += dt * np.mean(hs_inner(space, v1, Qp2) + hs_inner(space, Qp1, v2))
    return terms


def second_duality_sides(space: GalerkinSpace, adj: SecondAdjointPath, first_test: TestProcess,
                         second_test: TestProcess, JK, dt: float):
    """Both sides of the bilinear duality identity in left-point form."""
    terms = second_duality_terms(space, adj, first_test, second_test, JK, dt)
    return float(terms[0] - terms[1]), float(np.sum(terms[2:]))


def random_second_test(model: CoefficientModel, space: GalerkinSpace, base: StatePath, JK, seed: int,
                       index: int, scale: float = 0.5, zero_sources: bool = False) -> TestProcess:
    """phi = S(phi + (J phi + u) dt + (K phi + v) dW) with bounded adapted u, v."""
    n, w = space.n_state, space.n_noise
    rng = philox(seed, TEST, 1000 + index)
    c0, C0 = rng.normal(size=n), scale * rng.normal(size=(n, n))
    r0, r1 = scale * rng.normal(size=n), scale * rng.normal(size=n)
    s0, s1 = scale * rng.normal(size=(n, w)), scale * rng.normal(size=(n, w))
    if zero_sources:
        r0, r1, s0, s1 = 0 * r0, 0 * r1, 0 * s0, 0 * s1
    M, dt = base.grid.M, base.grid.dt
    S = space.decay(dt)
    N = base.N
    x = np.empty((M + 1, N, n))
    drift = np.empty((M, N, n))
    diff = np.empty((M, N, n, w))
    x[0] = c0 + base.x[0] @ C0.T
    for k in range(M):
        J, K = JK(k)
        xb = np.tanh(base.x[k])
        drift[k] = np.einsum("nij,nj->ni", J, x[k]) + r0 + r1 * xb
        diff[k] = np.einsum("njil,nl->nij", K, x[k]) + s0 + s1 * xb[:, :, None]
        x[k + 1] = S * (x[k] + drift[k] * dt + np.einsum("nij,nj->ni", diff[k], base.noise[k]))
    return TestProcess(f"pair_{index}", x, drift, diff)


def verify_transposition_second(model: CoefficientModel, space: GalerkinSpace, base: StatePath,
                                ubar: ControlPath, adj: SecondAdjointPath, test_pairs: int = 2,
                                seed: int = 0, instances=()) -> TranspositionReport:
    """Check the bilinear duality identity on random test pairs.

    Each pair (a, b) contributes the identities for (a, a), (b, b) and
    (a, b). Each residual is normalized by the largest single term of its
    identity; the cross identity may also use the Cauchy-Schwarz scale
    sqrt(|B(a, a)| |B(b, b)|) of the bilinear form, since B(a, b) itself can
    be close to zero. ``instances`` holds extra (name, first, second)
    triples of ``TestProcess`` objects, for example the first variation
    paired with itself.
    """
    cache = {}

    def JK(k):
        if k not in cache:
            J, K = jk_coefficients(model, base, ubar, k, adj.include_law_term)
            cache[k] = (J, K)
        return cache[k]

    dt = base.grid.dt
    names, lhs, rhs, scale = [], [], [], []

    def add(name, first_test, second_test, extra=0.0):
        terms = second_duality_terms(space, adj, first_test, second_test, JK, dt)
        names.append(name)
        lhs.append(terms[0] - terms[1])
        rhs.append(np.sum(terms[2:]))
        scale.append(max(float(np.max(np.abs(terms))), extra))
        return lhs[-1]

    for i in range(test_pairs):
        a = random_second_test(model, space, base, JK, seed, 2 * i)
        b = random_second_test(model, space, base, JK, seed, 2 * i + 1)
        laa = add(f"diagonal_{2 * i}", a, a)
        lbb = add(f"diagonal_{2 * i + 1}", b, b)
        add(f"cross_{i}", a, b, float(np.sqrt(abs(laa) * abs(lbb))))
    for name, a, b in instances:
        add(name, a, b)
    return TranspositionReport(names, np.array(lhs), np.array(rhs), np.array(scale))


def variation_test(name: str, y: np.ndarray, drift: np.ndarray, diffusion: np.ndarray) -> TestProcess:
    return TestProcess(name, y, drift, diffusion)
