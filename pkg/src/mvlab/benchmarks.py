"""Shipped benchmark models and exact moment recursions for linear-quadratic models."""
from __future__ import annotations

import numpy as np

from .coefficients import CoefficientModel, ControlSet, make_model
from .forward import GaussianInitial, TimeGrid
from .galerkin import GalerkinSpace, dirichlet_space


def tanh_benchmark(lipschitz_bound: float | None = 50.0):
    """Two-mode bounded interaction model; control enters drift and diffusion."""
    space = dirichlet_space(2, 2, diffusivity=0.05)
    U = ControlSet("box", low=[-1.0], high=[1.0])
    psi = np.array([1.0, 0.5])
    params = {
        "A0": [0.1, -0.05],
        "Ax": [[-0.5, 0.3], [0.2, -0.4]],
        "am": 0.6,
        "Au": [[0.3], [0.15]],
        "Axu": [[[0.1, 0.0], [0.0, 0.05]]],
        "amu": [0.2],
        "B0": [[0.3, 0.0], [0.0, 0.3]],
        "Bx": [[[0.4, 0.0], [0.1, 0.2]], [[0.1, 0.3], [0.0, 0.3]]],
        "Bm": [[0.2, 0.0], [0.0, 0.1]],
        "Bu": [[[0.8, 0.0], [0.0, 0.6]]],
        "Bxu": [[[[0.05, 0.0], [0.0, 0.03]], [[0.0, 0.03], [0.03, 0.0]]]],
        "Bmu": [[[0.1, 0.0], [0.0, 0.1]]],
        "Fxx": [[1.0, 0.2], [0.2, 0.8]],
        "fx": [0.1, 0.0],
        "fxm": [0.2, 0.1],
        "fmm": 0.5,
        "fm": 0.1,
        "R": [[0.2]],
        "fu": [0.05],
        "Hxx": [[0.5, 0.0], [0.0, 0.4]],
        "hx": [0.2, 0.1],
        "hxm": [0.1, 0.0],
        "hmm": 0.3,
        "hm": 0.1,
    }
    model = make_model("scalar_interaction", 2, 2, U, psi, params, lipschitz_bound=lipschitz_bound)
    xi = GaussianInitial(np.array([0.5, -0.3]), np.array([0.3, 0.3]))
    return model, space, xi


def lq_benchmark(n_state: int = 1):
    """Mean-field LQ model with control in drift and diffusion and state-dependent noise.

    The diffusion does not depend on the law.
    """
    n = n_state
    space = dirichlet_space(n, 1, diffusivity=0.1 / np.pi**2)
    U = ControlSet("box", low=[-1.0], high=[1.0])
    psi = np.ones(n) / n
    params = {
        "A0": 0.2 * np.ones(n),
        "Ax": -0.3 * np.eye(n),
        "am": 0.5,
        "Au": 0.8 * np.ones((n, 1)),
        "B0": 0.4 * np.ones((n, 1)),
        "Bx": 0.3 * np.eye(n)[:, :, None],
        "Bu": 0.5 * np.ones((1, n, 1)),
        "Fxx": np.eye(n),
        "fx": 0.1 * np.ones(n),
        "fxm": -0.4 * np.ones(n),
        "fmm": 0.6,
        "R": [[0.5]],
        "fu": [0.05],
        "Hxx": 0.8 * np.eye(n),
        "hx": 0.3 * np.ones(n),
        "hmm": 0.4,
    }
    model = make_model("linear_quadratic", n, 1, U, psi, params)
    xi = GaussianInitial(0.5 * np.ones(n), 0.2 * np.ones(n))
    return model, space, xi


def lq_diffusion_benchmark():
    """Scalar mean-field LQ model with the control acting only on the noise amplitude.

    The adjoint integrand q does not depend on the state, so the optimal
    control is a deterministic function of time.
    """
    space = GalerkinSpace(1, 1, np.array([-0.2]), np.array([1.0]))
    U = ControlSet("box", low=[-1.0], high=[1.0])
    params = {
        "A0": [0.1],
        "Ax": [[-0.3]],
        "am": 0.5,
        "B0": [[0.8]],
        "Bu": [[[0.6]]],
        "Fxx": [[1.0]],
        "fxm": [-0.4],
        "fmm": 0.6,
        "R": [[0.4]],
        "fu": [0.1],
        "Hxx": [[2.0]],
        "hmm": 0.4,
    }
    model = make_model("linear_quadratic", 1, 1, U, [1.0], params)
    xi = GaussianInitial(np.array([0.5]), np.array([0.2]))
    return model, space, xi


def lq_moment_cost(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, schedules,
                   xi: GaussianInitial) -> np.ndarray:
    """Exact mean-field cost of the discrete scheme under deterministic controls.

    ``schedules`` has shape (C, M, d); the first and second moments of the
    state are propagated through the exponential-Euler step in the
    infinite-particle limit. Returns the C costs.
    """
    if not model.is_linear or np.any(model.params["Axu"]) or np.any(model.params["Bxu"]):
        raise ValueError("moment recursion needs a linear model without state-control products")
    U = np.asarray(schedules, dtype=float)
    if U.ndim == 2:
        U = U[None]
    C, M, d = U.shape
    n, dt = space.n_state, grid.dt
    S = space.decay(dt)
    mean0 = np.asarray(xi.mean, dtype=float)
    std0 = np.broadcast_to(np.asarray(xi.std, dtype=float), mean0.shape)
    mu = np.broadcast_to(mean0, (C, n)).copy()
    sec = np.broadcast_to(np.outer(mean0, mean0) + np.diag(std0**2), (C, n, n)).copy()
    psi, w = model.psi, space.hs_weights
    total = np.zeros(C)

    def quad_cost(mu, sec, Q, lin, cross, mm, m1):
        m = mu @ psi
        return (0.5 * np.einsum("ij,cij->c", Q, sec) + mu @ lin + m * (mu @ cross)
                + 0.5 * mm * m**2 + m1 * m)

    for k in range(M):
        p = model.coefficients_at(k * dt)
        u = U[:, k]
        m = mu @ psi
        total += dt * (quad_cost(mu, sec, p["Fxx"], p["fx"], p["fxm"], p["fmm"], p["fm"])
                       + 0.5 * np.einsum("ci,ij,cj->c", u, p["R"], u) + u @ p["fu"] + p["f0"])
        L = np.eye(n) + dt * p["Ax"]
        c = p["A0"] + (p["am"] + u @ p["amu"])[:, None] * m[:, None] * psi + u @ p["Au"].T
        mu_a = mu @ L.T + dt * c
        sec_a = (np.einsum("ij,cjk,lk->cil", L, sec, L)
                 + dt * (np.einsum("ij,cj,ck->cik", L, mu, c) + np.einsum("ci,kj,cj->cik", c, L, mu))
                 + dt**2 * np.einsum("ci,ck->cik", c, c))
        # diffusion columns: d_j + Bx_j x with Bx_j[i, l] = Bx[l, i, j]
        dcol = (p["B0"][None] + m[:, None, None] * (p["Bm"][None] + np.einsum("cd,dij->cij", u, p["Bmu"]))
                + np.einsum("cd,dij->cij", u, p["Bu"]))
        Bxj = np.moveaxis(p["Bx"], 0, -1)  # (i, j, l)
        noise = np.zeros_like(sec)
        for j in range(space.n_noise):
            dj = dcol[:, :, j]
            K = Bxj[:, j, :]
            Kmu = mu @ K.T
            noise += w[j] * (np.einsum("ci,ck->cik", dj, dj) + np.einsum("ci,ck->cik", dj, Kmu)
                             + np.einsum("ci,ck->cik", Kmu, dj) + np.einsum("ij,cjk,lk->cil", K, sec, K))
        mu = S * mu_a
        sec = S[:, None] * (sec_a + dt * noise) * S[None, :]
    p = model.params
    total += quad_cost(mu, sec, p["Hxx"], p["hx"], p["hxm"], p["hmm"], p["hm"]) + p["h0"]
    return total


def lq_mean_rhs(model: CoefficientModel, space: GalerkinSpace, schedule):
    """Right-hand side of the mean ODE of a linear model under a piecewise-constant control."""
    p = model.params
    psi = model.psi
    U = np.asarray(schedule, dtype=float)

    def rhs(t, mu, grid: TimeGrid):
        k = min(int(t / grid.dt), grid.M - 1)
        u = U[k]
        return (space.eigenvalues * mu + p["A0"] + p["Ax"] @ mu
                + (p["am"] + u @ p["amu"]) * (psi @ mu) * psi + p["Au"] @ u)

    return rhs
