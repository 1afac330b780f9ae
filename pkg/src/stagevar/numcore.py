"""Numerical core: SVD contract, energy-ratio rank selection, truncation,
Gaussian random projection, linear least squares, and squared-norm row sampling.

Every operation is a pure function; randomness enters only through explicit
integer seeds, never a global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError

__all__ = [
    "SvdFactors",
    "ProjectionMatrix",
    "SampledIndices",
    "svd",
    "energy_ratio",
    "select_rank",
    "truncate",
    "random_project",
    "solve_lls",
    "sample_rows",
]


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``A = U @ diag(sigma) @ Vt`` with a fixed sign convention.

    U is M x n column-orthonormal, sigma is nonincreasing and nonnegative,
    Vt is n x d row-orthonormal, n = min(M, d).  The sign convention makes
    the largest-magnitude entry of each left singular vector nonnegative
    (ties resolved toward the lower row index), so the factors themselves,
    not just the product, are deterministic for a fixed input.
    """

    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    @property
    def n(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class ProjectionMatrix:
    """Seeded M x r Gaussian projection with entry variance 1/r."""

    Q: np.ndarray
    seed: int
    r: int


@dataclass(frozen=True)
class SampledIndices:
    """Distinct row indices (ascending) with the squared-norm row distribution."""

    indices: np.ndarray
    probabilities: np.ndarray


def _as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be 2-D and nonempty, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def svd(a: np.ndarray) -> SvdFactors:
    """Thin SVD with deterministic factor signs (see :class:`SvdFactors`)."""
    a = _as_matrix(a)
    u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    # argmax over |column| returns the lowest row index on ties.
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdFactors(U=u * signs, sigma=sigma, Vt=vt * signs[:, None])


def _checked_spectrum(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] < 1:
        raise ValueError(f"sigma must be a nonempty 1-D vector, got shape {sigma.shape}")
    if not (sigma > 0).any():
        raise DegenerateInputError("all-zero singular value vector")
    return sigma


def energy_ratio(sigma: np.ndarray, r: int) -> float:
    """Fraction of squared-singular-value mass held by the top ``r`` values."""
    sigma = _checked_spectrum(sigma)
    n = sigma.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"r must lie in [1, {n}], got {r}")
    cumulative = np.cumsum(sigma**2)
    return float(cumulative[r - 1] / cumulative[-1])


def select_rank(sigma: np.ndarray, alpha: float) -> int:
    """Smallest rank whose energy ratio reaches ``alpha`` (0 < alpha <= 1)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    sigma = _checked_spectrum(sigma)
    ratios = np.cumsum(sigma**2)
    ratios /= ratios[-1]
    return int(np.searchsorted(ratios, alpha, side="left")) + 1


def truncate(f: SvdFactors, r: int) -> np.ndarray:
    """Best rank-``r`` approximation assembled from the top factors."""
    if not 1 <= r <= f.n:
        raise ValueError(f"r must lie in [1, {f.n}], got {r}")
    return (f.U[:, :r] * f.sigma[:r]) @ f.Vt[:r]


def projection_matrix(m: int, r: int, seed: int) -> ProjectionMatrix:
    """Seeded Gaussian sketch matrix, entries iid N(0, 1/r)."""
    if not 1 <= r <= m:
        raise ValueError(f"r must lie in [1, {m}], got {r}")
    q = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(r), size=(m, r))
    return ProjectionMatrix(Q=q, seed=int(seed), r=int(r))


def random_project(a: np.ndarray, r: int, seed: int) -> tuple[np.ndarray, ProjectionMatrix]:
    """Project the M rows of ``a`` down to ``r`` Gaussian mixtures."""
    a = _as_matrix(a)
    proj = projection_matrix(a.shape[0], r, seed)
    return proj.Q.T @ a, proj


def solve_lls(b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Minimum-norm W (M x r) minimizing ||b.T @ W.T - t.T||_F.

    Equivalently the least-squares reconstruction weights with W @ b ~= t.
    Solved through the pseudo-inverse of the design matrix, so rank-deficient
    ``b`` still yields the minimum-norm solution, and the SVD cost depends
    only on the small design matrix rather than the number of targets.
    """
    b = _as_matrix(b, "b")
    t = _as_matrix(t, "t")
    if b.shape[1] != t.shape[1]:
        raise ValueError(f"column mismatch: b has {b.shape[1]}, t has {t.shape[1]}")
    if not (b != 0).any():
        raise DegenerateInputError("all-zero design matrix")
    return t @ np.linalg.pinv(b)


def row_probabilities(a: np.ndarray) -> np.ndarray:
    """Per-row squared-norm distribution; zero rows get probability exactly 0."""
    a = _as_matrix(a)
    norms = (a * a).sum(axis=1)
    total = norms.sum()
    if total == 0.0:
        raise DegenerateInputError("all-zero matrix has no row distribution")
    return norms / total


def sample_rows(a: np.ndarray, r: int, seed: int) -> SampledIndices:
    """Draw ``r`` distinct rows weighted by squared norm, without replacement.

    Sequential renormalized draws: each step inverts the CDF of the remaining
    probability mass, so zero-norm rows are never selected.  Indices are
    returned sorted ascending.
    """
    probs = row_probabilities(a)
    nonzero = int((probs > 0).sum())
    if not 1 <= r <= nonzero:
        raise ValueError(f"r must lie in [1, {nonzero}] (nonzero rows), got {r}")

    rng = np.random.default_rng(seed)
    remaining = probs.copy()
    chosen = np.empty(r, dtype=np.intp)
    for k in range(r):
        cdf = np.cumsum(remaining)
        u = rng.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        # u*cdf[-1] can round up onto the CDF top; never land on a zero-mass row.
        if idx >= remaining.shape[0] or remaining[idx] == 0.0:
            idx = int(np.flatnonzero(remaining > 0)[-1])
        chosen[k] = idx
        remaining[idx] = 0.0
    chosen.sort()
    return SampledIndices(indices=chosen, probabilities=probs)
