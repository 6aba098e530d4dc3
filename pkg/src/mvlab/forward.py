"""Exponential-Euler particle simulation of the controlled state equation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .coefficients import CoefficientModel, ControlError, ControlSet
from .galerkin import INITIAL, GalerkinSpace, blocked_normals, brownian_increments
from .meanfield import ParticleEnsemble


class SimulationFault(RuntimeError):
    def __init__(self, step: int, particle: int, what: str = "non-finite state"):
        super().__init__(f"{what} at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.M * factor)


@dataclass(frozen=True)
class Spike:
    steps: np.ndarray
    eps: float
    requested_eps: float


@dataclass(frozen=True)
class ControlPath:
    values: np.ndarray  # (M, N, d)
    spike: Spike | None = None

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, N: int, u) -> "ControlPath":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(np.broadcast_to(u, (grid.M, N, u.size)).copy())

    @classmethod
    def open_loop(cls, schedule, N: int) -> "ControlPath":
        """Common control from an (M, d) or (M,) schedule."""
        s = np.asarray(schedule, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        return cls(np.broadcast_to(s[:, None, :], (s.shape[0], N, s.shape[1])).copy())

    def check(self, control_set: ControlSet) -> None:
        ok = control_set.contains(self.values)
        if not np.all(ok):
            k, i = np.argwhere(~ok)[0]
            raise ControlError(f"control at step {k}, particle {i} is not in U")

    def refined(self, factor: int = 2) -> "ControlPath":
        return ControlPath(np.repeat(self.values, factor, axis=0))

    def chi(self) -> np.ndarray:
        """Indicator of the spike window per step."""
        out = np.zeros(self.M)
        if self.spike is not None:
            out[self.spike.steps] = 1.0
        return out


def make_spike_control(base: ControlPath, pert, eps: float, offset: float, grid: TimeGrid,
                       control_set: ControlSet | None = None) -> ControlPath:
    """Replace the base control by ``pert`` on a contiguous window of measure eps.

    eps is rounded up to a whole number of steps; the rounded value is kept
    on the returned path.
    """
    dt = grid.dt
    if not (0 < eps <= grid.T + 1e-12):
        raise ValueError("eps must lie in (0, T]")
    count = max(1, math.ceil(eps / dt - 1e-9))
    start = int(math.floor(offset / dt + 1e-9))
    if start < 0 or start + count > grid.M:
        raise ValueError(f"spike window [{start}, {start + count}) outside 0..{grid.M}")
    pert = np.asarray(pert, dtype=float)
    if control_set is not None and not np.all(control_set.contains(np.atleast_1d(pert))):
        raise ControlError(f"perturbation {pert} is not in U")
    values = base.values.copy()
    values[start:start + count] = pert if pert.ndim != 1 else pert[None, None, :]
    steps = np.arange(start, start + count)
    return ControlPath(values, Spike(steps, count * dt, eps))


@dataclass(frozen=True)
class GaussianInitial:
    mean: np.ndarray
    std: np.ndarray | float = 0.0

    def sample(self, N: int, seed: int) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        std = np.broadcast_to(np.asarray(self.std, dtype=float), mean.shape)
        if not np.any(std):
            return np.broadcast_to(mean, (N, mean.size)).copy()
        return mean + std * blocked_normals(seed, INITIAL, 0, N, mean.size)


@dataclass
class StatePath:
    x: np.ndarray          # (M+1, N, n)
    noise: np.ndarray      # (M, N, w)
    m: np.ndarray          # (M+1,)
    controls: np.ndarray   # (M, N, d) realized controls
    grid: TimeGrid
    meta: dict = field(default_factory=dict)

    def ensemble(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.x[k])

    @property
    def N(self) -> int:
        return self.x.shape[1]

    def to_csv(self, path) -> None:
        M1, N, n = self.x.shape
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "particle"] + [f"x{j}" for j in range(n)])
            for k in range(M1):
                for i in range(N):
                    w.writerow([k, i] + [repr(float(v)) for v in self.x[k, i]])

    def summary(self) -> dict:
        mean = self.x.mean(axis=1)
        second = (self.x**2).sum(axis=2).mean(axis=1)
        return {
            "T": self.grid.T, "M": self.grid.M, "N": self.N,
            "mean": mean.tolist(), "second_moment": second.tolist(), "m": self.m.tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


FeedbackRule = Callable[[int, float, np.ndarray, float], np.ndarray]


def simulate(model: CoefficientModel, space: GalerkinSpace, grid: TimeGrid, control: ControlPath | None,
             N: int, xi_sampler: GaussianInitial, seed: int, noise: np.ndarray | None = None,
             feedback: FeedbackRule | None = None, refine: int = 1, workers: int = 1) -> StatePath:
    """Particle exponential-Euler scheme.

    x_{k+1} = S(dt) [x_k + a dt + b dW_k], with the law frozen at step k.
    Pass ``noise`` to reuse increments from another run.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if model.n_state != space.n_state or model.n_noise != space.n_noise:
        raise ValueError("model and space dimensions differ")
    M, dt = grid.M, grid.dt
    if control is None and feedback is None:
        raise ValueError("need a control path or a feedback rule")
    if control is not None:
        if control.values.shape[:2] != (M, N):
            raise ValueError(f"control shape {control.values.shape[:2]} != ({M}, {N})")
        control.check(model.control_set)
    if noise is None:
        noise = brownian_increments(space, dt, M, N, seed, refine=refine, workers=workers)
    elif noise.shape != (M, N, space.n_noise):
        raise ValueError("recorded noise does not match grid and N")
    S = space.decay(dt)
    x = np.empty((M + 1, N, space.n_state))
    x[0] = xi_sampler.sample(N, seed)
    m = np.empty(M + 1)
    used = np.empty((M, N, model.control_dim))
    for k in range(M):
        t = k * dt
        m[k] = float(np.mean(x[k] @ model.psi))
        if feedback is not None:
            u = np.asarray(feedback(k, t, x[k], m[k]), dtype=float).reshape(N, -1)
            u = model.control_set.project(u)
        else:
            u = control.values[k]
        used[k] = u
        drift = model.a(t, x[k], m[k], u)
        diff = model.b(t, x[k], m[k], u)
        with np.errstate(over="ignore", invalid="ignore"):
            x[k + 1] = S * (x[k] + drift * dt + np.einsum("nij,nj->ni", diff, noise[k]))
        bad = ~np.all(np.isfinite(x[k + 1]), axis=1)
        if np.any(bad):
            raise SimulationFault(k, int(np.argmax(bad)))
    m[M] = float(np.mean(x[M] @ model.psi))
    return StatePath(x, noise, m, used, grid, {"seed": seed})


def cost_per_particle(model: CoefficientModel, path: StatePath, control: ControlPath | None = None) -> np.ndarray:
    u = path.controls if control is None else control.values
    dt = path.grid.dt
    total = np.zeros(path.N)
    for k in range(path.grid.M):
        total += model.f(k * dt, path.x[k], path.m[k], u[k]) * dt
    return total + model.h(path.x[-1], path.m[-1])


def cost(model: CoefficientModel, path: StatePath, control: ControlPath | None = None) -> float:
    """Left-endpoint quadrature of the running cost plus the terminal cost, averaged over particles."""
    if control is not None and control.values.shape[0] != path.grid.M:
        raise ValueError("control and path are on different grids")
    return float(np.mean(cost_per_particle(model, path, control)))


def with_controls(path: StatePath, controls: np.ndarray) -> StatePath:
    return replace(path, controls=controls)
