"""Truncated spectral model of the state and noise spaces.

The generator is diagonal in the retained eigenbasis, so the semigroup is an
elementwise exponential. Noise is a finite family of independent scalar
Brownian motions with per-mode variance weights.

Random numbers come from counter-based Philox streams. A stream is addressed
by ``(seed, purpose, step, block)`` where a block is a fixed run of
``BLOCK`` consecutive particles, so any split of the work across threads
draws exactly the same numbers.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

BLOCK = 256

# stream purposes; each gets its own Philox key
NOISE = 1
INITIAL = 2
PERMUTE = 3
SLICE = 4
TEST = 5
BOOTSTRAP = 6
REPLICATE = 7

_MASK64 = (1 << 64) - 1


class DomainError(ValueError):
    pass


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class GalerkinSpace:
    n_state: int
    n_noise: int
    eigenvalues: np.ndarray
    hs_weights: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        w = np.asarray(self.hs_weights, dtype=float).reshape(-1)
        if self.n_state < 1 or self.n_noise < 1:
            raise StructuralError("n_state and n_noise must be >= 1")
        if lam.shape != (self.n_state,):
            raise StructuralError(f"expected {self.n_state} eigenvalues, got {lam.size}")
        if w.shape != (self.n_noise,):
            raise StructuralError(f"expected {self.n_noise} hs_weights, got {w.size}")
        if not np.all(np.isfinite(lam)) or np.any(lam > 0):
            raise DomainError("eigenvalues must be finite and <= 0")
        if np.any(np.diff(lam) > 0):
            raise DomainError("eigenvalues must be sorted non-increasing")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DomainError("hs_weights must be finite and > 0")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "hs_weights", w)

    def decay(self, t: float) -> np.ndarray:
        """Diagonal of S(t)."""
        if t < 0:
            raise DomainError(f"semigroup time must be >= 0, got {t}")
        return np.exp(self.eigenvalues * t)


def dirichlet_space(n_state: int, n_noise: int, diffusivity: float = 1.0,
                    length: float = 1.0, hs_weights=None) -> GalerkinSpace:
    """Sine basis of the Dirichlet Laplacian on (0, length)."""
    k = np.arange(1, n_state + 1)
    lam = -diffusivity * (k * np.pi / length) ** 2
    if hs_weights is None:
        hs_weights = np.ones(n_noise)
    return GalerkinSpace(n_state, n_noise, lam, np.asarray(hs_weights, dtype=float))


def semigroup_apply(space: GalerkinSpace, t: float, v) -> np.ndarray:
    """Apply S(t) to a state vector or to a batch with the state on the last axis."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[-1] != space.n_state:
        raise StructuralError(f"state dimension {v.shape} does not match n_state={space.n_state}")
    return v * space.decay(t)


def hs_inner(space: GalerkinSpace, b1, b2) -> np.ndarray:
    """L2^0 pairing of n_state x n_noise matrices (batched over leading axes).

    With unit weights this is the Frobenius product.
    """
    return np.einsum("...ij,...ij,j->...", b1, b2, space.hs_weights)


def hs_norm2(space: GalerkinSpace, b) -> np.ndarray:
    return hs_inner(space, b, b)


def philox(seed: int, purpose: int, *counter: int) -> np.random.Generator:
    """Generator keyed by (seed, purpose) with the high counter words set from ``counter``.

    The low counter word is left at zero; it is the one Philox advances while
    drawing, so streams with different addresses never overlap.
    """
    if len(counter) > 3:
        raise ValueError("at most three counter words")
    words = [0, 0, 0, 0]
    for i, c in enumerate(counter):
        words[i + 1] = int(c) & _MASK64
    key = (int(seed) & _MASK64) | ((int(purpose) & _MASK64) << 64)
    bits = np.random.Philox(key=key, counter=np.array(words, dtype=np.uint64))
    return np.random.Generator(bits)


def derive_seed(master: int, index: int) -> int:
    """64-bit seed of replicate ``index``, read from the replicate stream of ``master``."""
    return int(philox(master, REPLICATE, index).integers(0, 2**63, dtype=np.int64))


def sample_noise_increment(space: GalerkinSpace, dt: float, stream: np.random.Generator) -> np.ndarray:
    if dt <= 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    return stream.standard_normal(space.n_noise) * np.sqrt(space.hs_weights * dt)


def blocked_normals(seed: int, purpose: int, step: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Standard normals for rows 0..n_rows-1, drawn block by block."""
    out = np.empty((n_rows, n_cols))
    for b, start in enumerate(range(0, n_rows, BLOCK)):
        stop = min(start + BLOCK, n_rows)
        out[start:stop] = philox(seed, purpose, step, b).standard_normal((stop - start, n_cols))
    return out


def brownian_increments(space: GalerkinSpace, dt: float, M: int, N: int, seed: int,
                        refine: int = 1, workers: int = 1, purpose: int = NOISE) -> np.ndarray:
    """Noise increments of shape (M, N, n_noise) for steps of size dt.

    The path is drawn at resolution dt/refine and summed over each coarse
    step, so runs at different refinements share one Brownian path.
    """
    if dt <= 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    fine = M * refine
    scale = np.sqrt(space.hs_weights * dt / refine)

    def draw(k):
        return blocked_normals(seed, purpose, k, N, space.n_noise)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            z = np.stack(list(pool.map(draw, range(fine))))
    else:
        z = np.stack([draw(k) for k in range(fine)])
    z = z * scale
    if refine > 1:
        z = z.reshape(M, refine, N, space.n_noise).sum(axis=1)
    return z
