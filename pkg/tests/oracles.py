"""Independent reference computations used as test oracles.

Everything here is written per particle with explicit loops so that it
shares no vectorized code path with the package.
"""
from __future__ import annotations

import math

import numpy as np

from mvlab.coefficients import ControlSet, make_model
from mvlab.galerkin import GalerkinSpace


def outer_fn(kind, v):
    return math.tanh(v) if kind == "tanh" else v


def naive_coefficients(model, x, m, u):
    """a, b, f, h at one particle from the parameter dictionary, by plain loops."""
    p = model.params
    n, w, d = model.n_state, model.n_noise, model.control_dim
    g = [outer_fn(model.state_map, xi) for xi in x]
    r = outer_fn(model.law_map, m)
    a = np.zeros(n)
    for i in range(n):
        s = p["A0"][i]
        for j in range(n):
            coef = p["Ax"][i, j] + sum(u[c] * p["Axu"][c, i, j] for c in range(d))
            s += coef * g[j]
        s += sum(p["Au"][i, c] * u[c] for c in range(d))
        s += (p["am"] + sum(u[c] * p["amu"][c] for c in range(d))) * r * model.psi[i]
        a[i] = s
    b = np.zeros((n, w))
    for i in range(n):
        for j in range(w):
            s = p["B0"][i, j]
            for l in range(n):
                s += g[l] * (p["Bx"][l, i, j] + sum(u[c] * p["Bxu"][c, l, i, j] for c in range(d)))
            s += r * (p["Bm"][i, j] + sum(u[c] * p["Bmu"][c, i, j] for c in range(d)))
            s += sum(u[c] * p["Bu"][c, i, j] for c in range(d))
            b[i, j] = s

    def quad(Q, lin, cross, mm, m1):
        s = 0.0
        for i in range(n):
            for j in range(n):
                s += 0.5 * g[i] * Q[i, j] * g[j]
            s += lin[i] * g[i] + r * cross[i] * g[i]
        return s + 0.5 * mm * r * r + m1 * r

    f = quad(p["Fxx"], p["fx"], p["fxm"], p["fmm"], p["fm"]) + p["f0"]
    for c in range(d):
        f += p["fu"][c] * u[c]
        for e in range(d):
            f += 0.5 * u[c] * p["R"][c, e] * u[e]
    h = quad(p["Hxx"], p["hx"], p["hxm"], p["hmm"], p["hm"]) + p["h0"]
    return a, b, float(f), float(h)


COARSE_STEPS = (8e-2, 4e-2, 2e-2, 1e-2)


def fd_order(fun, point, direction, exact, steps=(1e-2, 1e-3, 1e-4, 1e-5)):
    """Central differences of ``fun`` along ``direction`` against ``exact``.

    Returns (best relative error, observed order, exact_truncation). The order
    is the median log-log slope over consecutive steps whose errors sit above
    the rounding floor; if no error does, the difference quotient is exact
    and the order is undefined. When the truncation error is visible at fewer
    than two consecutive steps, the order is measured on a coarser sweep.
    """
    best, order, exact_trunc = _fd_sweep(fun, point, direction, exact, steps)
    if not exact_trunc and math.isnan(order):
        _, order, coarse_exact = _fd_sweep(fun, point, direction, exact, COARSE_STEPS)
        exact_trunc = coarse_exact
    return best, order, exact_trunc


def _fd_sweep(fun, point, direction, exact, steps):
    exact = np.asarray(exact, dtype=float)
    scale = max(float(np.linalg.norm(exact)), 1e-300)
    size = max(float(np.linalg.norm(fun(point))), 1.0)
    errs, above = [], []
    for h in steps:
        fd = (np.asarray(fun(point + h * direction)) - np.asarray(fun(point - h * direction))) / (2 * h)
        e = float(np.linalg.norm(fd - exact)) / scale
        errs.append(e)
        above.append(e > 100 * np.finfo(float).eps * size / (h * scale))
    slopes = [math.log(errs[i] / errs[i + 1]) / math.log(steps[i] / steps[i + 1])
              for i in range(len(steps) - 1) if above[i] and above[i + 1]]
    order = float(np.median(slopes)) if slopes else float("nan")
    return min(errs), order, not any(above)


def unit_box(d=1, low=-1.0, high=1.0):
    return ControlSet("box", low=[low] * d, high=[high] * d)


def flat_space(n=1, w=1, eigenvalues=None, weights=None):
    lam = np.zeros(n) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    return GalerkinSpace(n, w, lam, np.ones(w) if weights is None else np.asarray(weights, dtype=float))


def lq(params, n=1, w=1, U=None, psi=None):
    return make_model("linear_quadratic", n, w, U or unit_box(), psi, params)


def random_params(rng, n, w, d, scale=0.4):
    """Random parameters for every slot of the coefficient families."""
    sym = lambda k: (lambda A: 0.5 * (A + A.T))(rng.normal(size=(k, k)))
    return {
        "A0": rng.normal(size=n), "Ax": scale * rng.normal(size=(n, n)), "Au": rng.normal(size=(n, d)),
        "Axu": scale * rng.normal(size=(d, n, n)), "am": rng.normal(), "amu": rng.normal(size=d),
        "B0": rng.normal(size=(n, w)), "Bx": scale * rng.normal(size=(n, n, w)),
        "Bu": scale * rng.normal(size=(d, n, w)), "Bxu": scale * rng.normal(size=(d, n, n, w)),
        "Bm": scale * rng.normal(size=(n, w)), "Bmu": scale * rng.normal(size=(d, n, w)),
        "Fxx": sym(n), "fx": rng.normal(size=n), "fxm": rng.normal(size=n), "fmm": rng.normal(),
        "fm": rng.normal(), "R": sym(d), "fu": rng.normal(size=d), "f0": rng.normal(),
        "Hxx": sym(n), "hx": rng.normal(size=n), "hxm": rng.normal(size=n), "hmm": rng.normal(),
        "hm": rng.normal(), "h0": rng.normal(),
    }
