"""Coefficient families with closed-form derivatives in x, u and the law.

Every family is a function of the state ``x``, the interaction statistic
``m = (1/N) sum <psi, x_i>`` and the control ``u``. With ``g`` the state
feature map and ``r`` the outer function of ``m`` (each either ``tanh`` or
the identity)::

    a = A0 + Ax g + Au u + sum_c u_c Axu[c] g + (am + amu.u) r psi
    b = B0 + sum_l g_l (Bx[l] + sum_c u_c Bxu[c, l]) + r (Bm + sum_c u_c Bmu[c]) + sum_c u_c Bu[c]
    f = 1/2 g'Fxx g + fx.g + r fxm.g + 1/2 fmm r^2 + fm r + 1/2 u'R u + fu.u + f0
    h = 1/2 g'Hxx g + hx.g + r hxm.g + 1/2 hmm r^2 + hm r + h0

``scalar_interaction`` uses tanh for both maps, ``linear_quadratic`` uses
the identity for both, and ``custom_table`` is a scalar linear-quadratic
model whose running coefficients are read per time from a CSV schedule.

Because the law enters only through ``m``, the Lions derivative of any
coefficient phi is ``d_mu phi(y) = phi_m psi`` (constant in y), the mixed
derivative in (y, mu) vanishes, ``d_mu d_x phi = phi_mx (x) psi`` and
``d_mu^2 phi = phi_mm psi (x) psi``.

Batched array conventions (N particles, n state, w noise, d control)::

    a, a_m: (N, n)      a_x: (N, n, n)      a_xx: (N, n, n, n)   a_u: (N, n, d)
    b, b_m: (N, n, w)   b_x: (N, n, w, n)   b_xx: (N, n, w, n, n) b_u: (N, n, w, d)
    f, f_m: (N,)        f_x, f_mx: (N, n)   f_xx: (N, n, n)      f_u: (N, d)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .galerkin import StructuralError, philox, TEST
from .meanfield import ParticleEnsemble, interaction_statistic

FAMILIES = ("scalar_interaction", "linear_quadratic", "custom_table")
WHICH = ("a", "b", "f", "h")


class ModelError(ValueError):
    pass


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class ControlSet:
    kind: str
    points: np.ndarray | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "finite_grid":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if pts.size == 0:
                raise ControlError("finite_grid control set is empty")
            object.__setattr__(self, "points", pts)
        elif self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.low, dtype=float))
            hi = np.atleast_1d(np.asarray(self.high, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ControlError("box bounds must have equal shapes and low <= high")
            object.__setattr__(self, "low", lo)
            object.__setattr__(self, "high", hi)
        else:
            raise ControlError(f"unknown control set kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.kind == "finite_grid" else self.low.size

    def contains(self, u, atol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.all((u >= self.low - atol) & (u <= self.high + atol), axis=-1)
        d = np.abs(u[..., None, :] - self.points).max(axis=-1)
        return d.min(axis=-1) <= atol

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.low, self.high)
        d = ((u[..., None, :] - self.points) ** 2).sum(axis=-1)
        return self.points[d.argmin(axis=-1)]

    def grid(self, per_dim: int = 9) -> np.ndarray:
        """Candidate controls: the points themselves, or a tensor grid of the box."""
        if self.kind == "finite_grid":
            return self.points.copy()
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(self.low, self.high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "finite_grid":
            return self.points[rng.integers(0, len(self.points), size)]
        return rng.uniform(self.low, self.high, size=(size, self.dim))


def _param_shapes(n, w, d):
    return {
        "A0": (n,), "Ax": (n, n), "Au": (n, d), "Axu": (d, n, n), "am": (), "amu": (d,),
        "B0": (n, w), "Bx": (n, n, w), "Bu": (d, n, w), "Bxu": (d, n, n, w),
        "Bm": (n, w), "Bmu": (d, n, w),
        "Fxx": (n, n), "fx": (n,), "fxm": (n,), "fmm": (), "fm": (), "R": (d, d), "fu": (d,), "f0": (),
        "Hxx": (n, n), "hx": (n,), "hxm": (n,), "hmm": (), "hm": (), "h0": (),
    }


def _outer(kind):
    if kind == "tanh":
        def fn(v):
            t = np.tanh(v)
            s = 1.0 - t * t
            return t, s, -2.0 * t * s
    elif kind == "identity":
        def fn(v):
            v = np.asarray(v, dtype=float)
            return v, np.ones_like(v), np.zeros_like(v)
    else:
        raise ModelError(f"unknown outer function {kind!r}")
    return fn


@dataclass(frozen=True)
class CoefficientModel:
    family: str
    n_state: int
    n_noise: int
    control_dim: int
    control_set: ControlSet
    psi: np.ndarray
    params: dict = field(default_factory=dict)
    state_map: str = "tanh"
    law_map: str = "tanh"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        n, w, d = self.n_state, self.n_noise, self.control_dim
        psi = np.asarray(self.psi, dtype=float).reshape(-1)
        if psi.shape != (n,):
            raise StructuralError(f"psi must have length {n}")
        if self.control_set.dim != d:
            raise StructuralError("control set dimension differs from control_dim")
        shapes = _param_shapes(n, w, d)
        unknown = set(self.params) - set(shapes)
        if unknown:
            raise ModelError(f"unknown parameters {sorted(unknown)}")
        full = {}
        for name, shape in shapes.items():
            v = np.asarray(self.params.get(name, np.zeros(shape)), dtype=float)
            try:
                v = np.broadcast_to(v, shape).copy()
            except ValueError:
                raise ModelError(f"parameter {name} has shape {v.shape}, expected {shape}") from None
            if not np.all(np.isfinite(v)):
                raise ModelError(f"parameter {name} is not finite")
            v.setflags(write=False)
            full[name] = v
        for sym in ("Fxx", "Hxx", "R"):
            if not np.allclose(full[sym], full[sym].T):
                raise ModelError(f"{sym} must be symmetric")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "params", full)
        object.__setattr__(self, "_g", _outer(self.state_map))
        object.__setattr__(self, "_r", _outer(self.law_map))

    # parameters may depend on time in subclasses
    def coefficients_at(self, t: float) -> dict:
        return self.params

    @property
    def is_linear(self) -> bool:
        return self.state_map == "identity" and self.law_map == "identity"

    @property
    def b_depends_on_law(self) -> bool:
        p = self.params
        return bool(np.any(p["Bm"]) or np.any(p["Bmu"]))

    def control_enters_diffusion(self) -> bool:
        p = self.params
        return bool(np.any(p["Bu"]) or np.any(p["Bxu"]) or np.any(p["Bmu"]))

    # -- drift ---------------------------------------------------------------

    def _ax_eff(self, p, u):
        return p["Ax"][None] + np.einsum("nc,cij->nij", u, p["Axu"])

    def _am_eff(self, p, u):
        return p["am"] + u @ p["amu"]

    def a(self, t, x, m, u):
        p = self.coefficients_at(t)
        g, _, _ = self._g(x)
        r, _, _ = self._r(m)
        lin = np.einsum("nij,nj->ni", self._ax_eff(p, u), g)
        return p["A0"] + lin + u @ p["Au"].T + (self._am_eff(p, u) * r)[:, None] * self.psi

    def a_x(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, g1, _ = self._g(x)
        return self._ax_eff(p, u) * g1[:, None, :]

    def a_xx(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, _, g2 = self._g(x)
        N, n = x.shape
        out = np.zeros((N, n, n, n))
        idx = np.arange(n)
        out[:, :, idx, idx] = self._ax_eff(p, u) * g2[:, None, :]
        return out

    def a_m(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, r1, _ = self._r(m)
        return (self._am_eff(p, u) * r1)[:, None] * self.psi

    def a_mx(self, t, x, m, u):
        return np.zeros((x.shape[0], self.n_state, self.n_state))

    def a_mm(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, _, r2 = self._r(m)
        return (self._am_eff(p, u) * r2)[:, None] * self.psi

    def a_u(self, t, x, m, u):
        p = self.coefficients_at(t)
        g, _, _ = self._g(x)
        r, _, _ = self._r(m)
        out = p["Au"][None] + np.einsum("cij,nj->nic", p["Axu"], g)
        return out + r * self.psi[None, :, None] * p["amu"][None, None, :]

    # -- diffusion -----------------------------------------------------------

    def _bx_eff(self, p, u):
        return p["Bx"][None] + np.einsum("nc,clij->nlij", u, p["Bxu"])

    def _bm_eff(self, p, u):
        return p["Bm"][None] + np.einsum("nc,cij->nij", u, p["Bmu"])

    def b(self, t, x, m, u):
        p = self.coefficients_at(t)
        g, _, _ = self._g(x)
        r, _, _ = self._r(m)
        out = p["B0"] + np.einsum("nl,nlij->nij", g, self._bx_eff(p, u))
        return out + r * self._bm_eff(p, u) + np.einsum("nc,cij->nij", u, p["Bu"])

    def b_x(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, g1, _ = self._g(x)
        return np.einsum("nl,nlij->nijl", g1, self._bx_eff(p, u))

    def b_xx(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, _, g2 = self._g(x)
        N, n = x.shape
        out = np.zeros((N, n, self.n_noise, n, n))
        idx = np.arange(n)
        out[..., idx, idx] = np.einsum("nl,nlij->nijl", g2, self._bx_eff(p, u))
        return out

    def b_m(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, r1, _ = self._r(m)
        return r1 * self._bm_eff(p, u)

    def b_mx(self, t, x, m, u):
        return np.zeros((x.shape[0], self.n_state, self.n_noise, self.n_state))

    def b_mm(self, t, x, m, u):
        p = self.coefficients_at(t)
        _, _, r2 = self._r(m)
        return r2 * self._bm_eff(p, u)

    def b_u(self, t, x, m, u):
        p = self.coefficients_at(t)
        g, _, _ = self._g(x)
        r, _, _ = self._r(m)
        out = np.moveaxis(p["Bu"], 0, -1)[None] + np.einsum("nl,clij->nijc", g, p["Bxu"])
        return out + r * np.moveaxis(p["Bmu"], 0, -1)[None]

    # -- running and terminal cost ------------------------------------------

    def _quad(self, x, m, Q, lin, cross, mm, m1):
        g, g1, g2 = self._g(x)
        r, r1, r2 = self._r(m)
        s = g @ Q + lin + r * cross
        val = 0.5 * np.einsum("ni,ij,nj->n", g, Q, g) + g @ lin + r * (g @ cross) + 0.5 * mm * r**2 + m1 * r
        dx = g1 * s
        dxx = np.einsum("ni,ij,nj->nij", g1, Q, g1)
        idx = np.arange(x.shape[1])
        dxx[:, idx, idx] += g2 * s
        inner = mm * r + m1 + g @ cross
        dm = r1 * inner
        dmx = r1 * g1 * cross
        dmm = r2 * inner + r1**2 * mm
        return val, dx, dxx, dm, dmx, dmm

    def _f_all(self, t, x, m, u):
        p = self.coefficients_at(t)
        return self._quad(x, m, p["Fxx"], p["fx"], p["fxm"], p["fmm"], p["fm"])

    def _h_all(self, x, m):
        p = self.params
        return self._quad(x, m, p["Hxx"], p["hx"], p["hxm"], p["hmm"], p["hm"])

    def f(self, t, x, m, u):
        p = self.coefficients_at(t)
        ctrl = 0.5 * np.einsum("nc,cd,nd->n", u, p["R"], u) + u @ p["fu"]
        return self._f_all(t, x, m, u)[0] + ctrl + p["f0"]

    def f_x(self, t, x, m, u):
        return self._f_all(t, x, m, u)[1]

    def f_xx(self, t, x, m, u):
        return self._f_all(t, x, m, u)[2]

    def f_m(self, t, x, m, u):
        return self._f_all(t, x, m, u)[3]

    def f_mx(self, t, x, m, u):
        return self._f_all(t, x, m, u)[4]

    def f_mm(self, t, x, m, u):
        return self._f_all(t, x, m, u)[5]

    def f_u(self, t, x, m, u):
        p = self.coefficients_at(t)
        return u @ p["R"] + p["fu"]

    def h(self, x, m):
        return self._h_all(x, m)[0] + self.params["h0"]

    def h_x(self, x, m):
        return self._h_all(x, m)[1]

    def h_xx(self, x, m):
        return self._h_all(x, m)[2]

    def h_m(self, x, m):
        return self._h_all(x, m)[3]

    def h_mx(self, x, m):
        return self._h_all(x, m)[4]

    def h_mm(self, x, m):
        return self._h_all(x, m)[5]

    # generic dispatch used by the public functions
    def value(self, which, t, x, m, u):
        if which == "h":
            return self.h(x, m)
        return getattr(self, which)(t, x, m, u)

    def partial(self, which, suffix, t, x, m, u):
        name = f"{which}_{suffix}"
        if which == "h":
            return getattr(self, name)(x, m)
        return getattr(self, name)(t, x, m, u)

    def y_mu_source(self, which, t, x, m, u, y):
        """Average over the copy of phi_{y mu}(x_i)(x_j)[y_j, y_j].

        The mixed (y, mu) derivative vanishes when the law enters through a
        linear statistic, so the source is identically zero.
        """
        shape = (x.shape[0], self.n_state) if which == "a" else (x.shape[0], self.n_state, self.n_noise)
        return np.zeros(shape)


class TableModel(CoefficientModel):
    """Scalar linear-quadratic model with running coefficients tabulated in time."""

    def __init__(self, schedule_times, schedule, **kwargs):
        super().__init__(**kwargs)
        times = np.asarray(schedule_times, dtype=float)
        if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0):
            raise ModelError("schedule times must be strictly increasing")
        rows = []
        for row in schedule:
            merged = dict(self.params)
            for name, v in row.items():
                merged[name] = np.broadcast_to(np.asarray(v, dtype=float), self.params[name].shape).copy()
            rows.append(merged)
        object.__setattr__(self, "_times", times)
        object.__setattr__(self, "_rows", rows)

    def coefficients_at(self, t):
        k = int(np.searchsorted(self._times, t + 1e-12, side="right")) - 1
        return self._rows[max(k, 0)]


TABLE_COLUMNS = ("A0", "Ax", "Au", "am", "B0", "Bx", "Bu", "Bm", "Fxx", "fx", "fxm", "fmm", "fm", "R", "fu", "f0")


def read_schedule(path) -> tuple[np.ndarray, list[dict]]:
    """Read a CSV with a ``t`` column and any of ``TABLE_COLUMNS``."""
    times, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            times.append(float(rec.pop("t")))
            bad = set(rec) - set(TABLE_COLUMNS)
            if bad:
                raise ModelError(f"unsupported schedule columns {sorted(bad)}")
            rows.append({k: float(v) for k, v in rec.items() if v != ""})
    return np.asarray(times), rows


def make_model(family: str, n_state: int, n_noise: int, control_set: ControlSet, psi=None,
               params: dict | None = None, schedule=None, lipschitz_bound: float | None = None,
               probe_pairs: int = 1000, probe_seed: int = 0) -> CoefficientModel:
    """Build a model of the given family; bounded families are Lipschitz-probed."""
    d = control_set.dim
    if psi is None:
        psi = np.eye(n_state)[0]
    params = dict(params or {})
    if family == "scalar_interaction":
        model = CoefficientModel(family, n_state, n_noise, d, control_set, psi, params, "tanh", "tanh")
    elif family == "linear_quadratic":
        model = CoefficientModel(family, n_state, n_noise, d, control_set, psi, params, "identity", "identity")
    elif family == "custom_table":
        if (n_state, n_noise, d) != (1, 1, 1):
            raise ModelError("custom_table supports n_state = n_noise = control_dim = 1")
        if schedule is None:
            raise ModelError("custom_table needs a schedule")
        times, rows = read_schedule(schedule) if not isinstance(schedule, tuple) else schedule
        model = TableModel(times, rows, family=family, n_state=1, n_noise=1, control_dim=1,
                           control_set=control_set, psi=psi, params=params,
                           state_map="identity", law_map="identity")
    else:
        raise ModelError(f"unknown family {family!r}")
    if lipschitz_bound is not None and family == "scalar_interaction":
        ratios = lipschitz_probe(model, probe_pairs, probe_seed)
        worst = max(ratios, key=ratios.get)
        if ratios[worst] > lipschitz_bound:
            raise ModelError(f"Lipschitz probe: {worst} ratio {ratios[worst]:.3g} exceeds {lipschitz_bound}")
    return model


# -- public single-point API ---------------------------------------------------

def _single(model, x, mu, u):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != model.n_state:
        raise StructuralError("state dimension mismatch")
    if not np.all(np.isfinite(x)):
        raise ValueError("NaN in state")
    if isinstance(mu, ParticleEnsemble):
        if mu.n_state != model.n_state:
            raise StructuralError("ensemble dimension mismatch")
        m = interaction_statistic(mu.particles, model.psi)
    else:
        m = float(mu)
    if u is None:
        u = np.zeros(model.control_dim)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    if u.shape[1] != model.control_dim:
        raise StructuralError("control dimension mismatch")
    if not np.all(np.isfinite(u)):
        raise ValueError("NaN in control")
    if not model.control_set.contains(u)[0]:
        raise ControlError(f"control {u[0]} is not in U")
    return x, m, u


def eval_coefficient(model: CoefficientModel, which: str, t: float, x, mu, u=None):
    if which not in WHICH:
        raise ValueError(f"which must be one of {WHICH}")
    x, m, u = _single(model, x, mu, u)
    return model.value(which, t, x, m, u)[0]


def deriv_x(model: CoefficientModel, which: str, order: int, t: float, x, mu, u=None):
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    x, m, u = _single(model, x, mu, u)
    return model.partial(which, "x" if order == 1 else "xx", t, x, m, u)[0]


def deriv_mu(model: CoefficientModel, which: str, kind: str, t: float, x, mu, u=None, y=None, y2=None):
    """Lions derivatives at the point y (and y2); constant in y for these families.

    Shapes: for ``a`` the map y-direction -> state is an (n, n) matrix, for
    ``b`` an (n, w, n) tensor and for ``f``/``h`` an n-vector; ``mu_x`` and
    ``mu_mu`` add one more trailing state axis.
    """
    x, m, u = _single(model, x, mu, u)
    n = model.n_state
    psi = model.psi
    for v in (y, y2):
        if v is not None and np.asarray(v).shape != (n,):
            raise StructuralError("y must be a state vector")
    if kind == "mu":
        return np.multiply.outer(model.partial(which, "m", t, x, m, u)[0], psi)
    if kind == "y_mu":
        base = model.partial(which, "m", t, x, m, u)[0]
        return np.zeros(np.shape(base) + (n, n))
    if kind == "mu_x":
        return np.multiply.outer(model.partial(which, "mx", t, x, m, u)[0], psi)
    if kind == "mu_mu":
        return np.multiply.outer(model.partial(which, "mm", t, x, m, u)[0], np.outer(psi, psi))
    raise ValueError(f"unknown kind {kind!r}")


@dataclass
class LiftReport:
    eps: list
    rel_errors: list
    best_error: float
    order: float
    exact_truncation: bool

    def passed(self, tol: float = 1e-4, order_range=(1.8, 2.2)) -> bool:
        if self.best_error >= tol:
            return False
        return self.exact_truncation or order_range[0] <= self.order <= order_range[1]


def check_lions_lift(model: CoefficientModel, which: str, t: float, x, mu: ParticleEnsemble, u,
                     direction: ParticleEnsemble, eps_list=(1e-2, 1e-3, 1e-4, 1e-5)) -> LiftReport:
    """Compare the lifted directional derivative with the Lions-derivative pairing.

    The lift moves every particle along its own direction, X -> X + eps Y,
    and holds the state argument x fixed.
    """
    if direction.N != mu.N:
        raise ValueError("direction ensemble must have the same N as mu")
    xs, _, us = _single(model, x, mu, u)
    X, Y = mu.particles, direction.particles

    def lifted(Z):
        return model.value(which, t, xs, interaction_statistic(Z, model.psi), us)[0]

    exact = 0.0
    for xi, yi in zip(X, Y):
        D = deriv_mu(model, which, "mu", t, xs[0], mu, us[0], y=xi)
        exact = exact + D @ yi
    exact = np.asarray(exact) / mu.N
    scale = max(float(np.linalg.norm(exact)), 1e-300)
    size = max(float(np.linalg.norm(lifted(X))), 1.0)
    errs, floors = [], []
    for eps in eps_list:
        fd = (lifted(X + eps * Y) - lifted(X - eps * Y)) / (2 * eps)
        diff = float(np.linalg.norm(fd - exact))
        errs.append(0.0 if diff == 0.0 else diff / scale)
        floors.append(100 * np.finfo(float).eps * size / (eps * scale))
    errs = np.asarray(errs)
    above = [i for i in range(len(eps_list)) if errs[i] > floors[i]]
    slopes = [np.log(errs[i] / errs[i + 1]) / np.log(eps_list[i] / eps_list[i + 1])
              for i in range(len(eps_list) - 1) if i in above and i + 1 in above]
    order = float(np.median(slopes)) if slopes else float("nan")
    return LiftReport(list(eps_list), errs.tolist(), float(errs.min()), order, not above)


def lipschitz_probe(model: CoefficientModel, n_pairs: int = 1000, seed: int = 0, radius: float = 3.0) -> dict:
    """Largest difference quotients of each coefficient and its first derivatives.

    Pairs are drawn uniformly in a box of the given radius in x and m, and
    from U in u.
    """
    rng = philox(seed, TEST, 17)
    n = model.n_state
    x1 = rng.uniform(-radius, radius, (n_pairs, n))
    x2 = rng.uniform(-radius, radius, (n_pairs, n))
    m1 = rng.uniform(-radius, radius, n_pairs)
    m2 = rng.uniform(-radius, radius, n_pairs)
    u1 = model.control_set.sample(rng, n_pairs)
    u2 = model.control_set.sample(rng, n_pairs)
    dist = np.sqrt(((x1 - x2) ** 2).sum(1) + (m1 - m2) ** 2 + ((u1 - u2) ** 2).sum(1))
    out = {}
    for which in WHICH:
        for suffix in ("", "x", "m"):
            vals = []
            for i in range(n_pairs):
                pair = []
                for x, m, u in ((x1[i:i + 1], m1[i], u1[i:i + 1]), (x2[i:i + 1], m2[i], u2[i:i + 1])):
                    v = model.value(which, 0.0, x, m, u) if not suffix else model.partial(which, suffix, 0.0, x, m, u)
                    pair.append(np.asarray(v).reshape(-1))
                vals.append(np.linalg.norm(pair[0] - pair[1]))
            key = which if not suffix else f"{which}_{suffix}"
            out[key] = float(np.max(np.asarray(vals) / dist))
    return out
