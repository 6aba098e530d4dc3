"""Particle representation of laws, independent copies and W2 diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .galerkin import PERMUTE, SLICE, StructuralError, philox

COPY_TAGS = ("base", "tilde", "hat")
EXACT_ASSIGNMENT_MAX = 256


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: np.ndarray
    copy_tag: str = "base"

    def __post_init__(self):
        x = np.asarray(self.particles, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise StructuralError("particles must be an (N, n_state) array with N >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("particles must be finite")
        if self.copy_tag not in COPY_TAGS:
            raise ValueError(f"copy_tag must be one of {COPY_TAGS}")
        x.setflags(write=False)
        object.__setattr__(self, "particles", x)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def n_state(self) -> int:
        return self.particles.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["particle"] + [f"x{j}" for j in range(self.n_state)])
            for i, row in enumerate(self.particles):
                w.writerow([i] + [repr(float(v)) for v in row])


def interaction_statistic(x: np.ndarray, psi: np.ndarray) -> float:
    """(1/N) sum_i <psi, x_i> on a raw (N, n) array."""
    return float(np.mean(x @ psi))


def empirical_mean_statistic(mu: ParticleEnsemble, psi) -> float:
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (mu.n_state,):
        raise StructuralError(f"psi has shape {psi.shape}, expected ({mu.n_state},)")
    return interaction_statistic(mu.particles, psi)


def wasserstein2(mu: ParticleEnsemble, nu: ParticleEnsemble, seed: int = 0,
                 n_projections: int = 200) -> tuple[float, str]:
    """W2 between two equal-size empirical measures.

    Returns ``(value, method)`` with method one of ``sorted``, ``assignment``
    or ``sliced``.
    """
    if mu.N != nu.N:
        raise ValueError("wasserstein2 needs equal particle counts; resample first")
    if mu.n_state != nu.n_state:
        raise StructuralError("ensembles live in different spaces")
    x, y = mu.particles, nu.particles
    if mu.n_state == 1:
        d = np.sort(x[:, 0]) - np.sort(y[:, 0])
        return float(np.sqrt(np.mean(d**2))), "sorted"
    if mu.N <= EXACT_ASSIGNMENT_MAX:
        cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean())), "assignment"
    rng = philox(seed, SLICE, mu.N)
    theta = rng.standard_normal((n_projections, mu.n_state))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    px = np.sort(x @ theta.T, axis=0)
    py = np.sort(y @ theta.T, axis=0)
    # sliced W2 averages 1-d costs; scale by n to match W2 on isotropic clouds
    return float(np.sqrt(mu.n_state * np.mean((px - py) ** 2))), "sliced"


def spawn_independent_copy(mu: ParticleEnsemble, tag: str, stream: np.random.Generator | int) -> ParticleEnsemble:
    """Copy on an independent probability space, realized as a random permutation."""
    if tag == mu.copy_tag:
        raise ValueError(f"copy tag {tag!r} collides with the source ensemble")
    if tag not in COPY_TAGS:
        raise ValueError(f"unknown copy tag {tag!r}")
    if not isinstance(stream, np.random.Generator):
        stream = philox(int(stream), PERMUTE, mu.N)
    perm = stream.permutation(mu.N)
    return ParticleEnsemble(mu.particles[perm], tag)
