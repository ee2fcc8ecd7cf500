"""Subspace and alignment metrics: weighted PCA, principal angles,
Grassmann geodesic distance, and vectorized-matrix cosine similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BoundsError,
    DegenerateInputError,
    DegenerateWeightsError,
    InsufficientDataError,
    NumericError,
    ShapeError,
)
from .svd import as_matrix, thin_svd

ORTHONORMALITY_TOL = 1e-8
# Singular values of an overlap of orthonormal bases may exceed 1 only by
# rounding; anything larger means the inputs were not orthonormal.
COSINE_CLAMP_LIMIT = 1e-6

ROW_SCALED = "row-scaled"
SAMPLE_WEIGHTED = "sample-weighted"
PCA_MODES = (ROW_SCALED, SAMPLE_WEIGHTED)


@dataclass(frozen=True)
class Subspace:
    """Orthonormal basis of an n-dimensional subspace of R^d.

    ``basis`` has shape (d, n) with orthonormal columns.
    """

    basis: np.ndarray

    def __post_init__(self):
        b = as_matrix(self.basis, "basis")
        d, n = b.shape
        if n > d:
            raise ShapeError(f"n_components {n} exceeds ambient dimension {d}")
        gram = b.T @ b
        dev = float(np.max(np.abs(gram - np.eye(n))))
        if dev > ORTHONORMALITY_TOL:
            raise ShapeError(
                f"basis columns are not orthonormal (max deviation {dev:.3e})"
            )
        object.__setattr__(self, "basis", b)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class PcaResult:
    """Spectrum and leading subspace of a (weighted) PCA decomposition."""

    subspace: Subspace
    eigenvalues: np.ndarray
    explained_variance: np.ndarray
    cumulative_variance: np.ndarray
    weighted_mean: np.ndarray


def weighted_pca(
    samples,
    weights,
    n_components: int,
    mode: str = ROW_SCALED,
    method: str = "covariance",
) -> PcaResult:
    """PCA of routed samples under one of two weighting semantics.

    ``row-scaled`` multiplies each sample row by its weight and runs plain
    PCA on the scaled rows about their mean. ``sample-weighted`` keeps rows
    unscaled and uses the weights in the mean and covariance estimates.
    Rows with zero weight carry no information for either reading and are
    dropped up front.

    ``method`` selects the decomposition route: ``covariance``
    (eigendecomposition of the d x d covariance) or ``svd`` (SVD of the
    centered, weight-scaled data matrix). The two agree to rounding and the
    second serves as an independent cross-check of the first.
    """
    x = as_matrix(samples, "samples")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(
            f"weights must be a vector of length {x.shape[0]}, got shape {w.shape}"
        )
    if not np.isfinite(w).all():
        raise ValueError("weights contain non-finite entries")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    if mode not in PCA_MODES:
        raise ValueError(f"unknown PCA mode {mode!r}; expected one of {PCA_MODES}")
    if method not in ("covariance", "svd"):
        raise ValueError(f"unknown PCA method {method!r}")
    if n_components < 1:
        raise ValueError("n_components must be at least 1")
    n_total, d = x.shape
    if n_components > d:
        raise ShapeError(f"n_components {n_components} exceeds dimension {d}")
    if not w.any():
        raise DegenerateWeightsError("all sample weights are zero")

    keep = w > 0
    x = x[keep]
    w = w[keep]
    n_kept = x.shape[0]
    if n_kept < n_components:
        raise InsufficientDataError(
            f"only {n_kept} positively weighted rows for {n_components} components"
        )

    if mode == ROW_SCALED:
        x = x * w[:, None]
        w_eff = np.ones(n_kept)
    else:
        w_eff = w
    total_weight = float(w_eff.sum())
    mean = (w_eff @ x) / total_weight
    z = x - mean

    r = min(d, n_kept)
    if method == "covariance":
        cov = (z * w_eff[:, None]).T @ z / total_weight
        cov = (cov + cov.T) / 2.0
        basis_full, eigenvalues, _ = thin_svd(cov)
        eigenvalues = eigenvalues[:r]
        basis_full = basis_full[:, :n_components]
    else:
        scaled = z * np.sqrt(w_eff / total_weight)[:, None]
        _, sv, v = thin_svd(scaled)
        eigenvalues = sv[:r] ** 2
        basis_full = v[:, :n_components]

    total = float(eigenvalues.sum())
    if total > 0.0:
        explained = eigenvalues / total
        cumulative = np.cumsum(explained)
    else:
        explained = np.zeros_like(eigenvalues)
        cumulative = np.zeros_like(eigenvalues)

    return PcaResult(
        subspace=Subspace(basis_full),
        eigenvalues=eigenvalues,
        explained_variance=explained,
        cumulative_variance=cumulative,
        weighted_mean=mean,
    )


def variance_profile(pca: PcaResult, ks: Sequence[int]) -> list[float]:
    """Cumulative variance fractions at each requested component count."""
    n = pca.eigenvalues.shape[0]
    out = []
    for k in ks:
        if not 1 <= k <= n:
            raise BoundsError(f"component count {k} out of range [1, {n}]")
        out.append(float(pca.cumulative_variance[k - 1]))
    return out


# arccos loses all precision for angles near zero (cos(theta) rounds to 1),
# so angles whose cosine exceeds this threshold are evaluated through the
# sine of the residual Q2 - Q1 (Q1^T Q2) instead.
_SMALL_ANGLE_COS = math.cos(math.pi / 8.0)


def principal_angles(q1: Subspace, q2: Subspace) -> np.ndarray:
    """Principal angles between two subspaces, ascending, in [0, pi/2].

    The angles are arccos of the singular values of the basis overlap
    ``q1.T @ q2``; values are clamped into [0, 1] to absorb rounding.
    Small angles, where arccos is numerically useless, are recovered from
    the singular values of the orthogonal residual (whose values are the
    sines of the same angles), so identical subspaces come out at 0 to
    machine precision.
    """
    if q1.ambient_dim != q2.ambient_dim:
        raise ShapeError(
            f"ambient dimensions differ: {q1.ambient_dim} vs {q2.ambient_dim}"
        )
    if q1.n_components != q2.n_components:
        raise ShapeError(
            f"component counts differ: {q1.n_components} vs {q2.n_components}"
        )
    overlap = q1.basis.T @ q2.basis
    _, sigma, _ = thin_svd(overlap)
    excess = float(sigma.max(initial=0.0)) - 1.0
    if excess > COSINE_CLAMP_LIMIT:
        raise NumericError(
            f"overlap singular value exceeds 1 by {excess:.3e}; bases are not orthonormal"
        )
    sigma = np.clip(sigma, 0.0, 1.0)
    theta = np.arccos(sigma)
    if sigma[0] > _SMALL_ANGLE_COS:
        residual = q2.basis - q1.basis @ overlap
        _, sines, _ = thin_svd(residual)
        sines = np.clip(sines[::-1], 0.0, 1.0)  # ascending, paired with sigma
        small = sigma > _SMALL_ANGLE_COS
        theta[small] = np.arcsin(sines[small])
    return np.sort(theta)


def grassmann_distance(q1: Subspace, q2: Subspace) -> float:
    """Geodesic distance on the Grassmann manifold: l2 norm of the
    principal angles. Ranges from 0 (identical span) to (pi/2)*sqrt(n)
    (fully orthogonal subspaces)."""
    theta = principal_angles(q1, q2)
    return float(math.sqrt(float(theta @ theta)))


def grassmann_max(n_components: int) -> float:
    """Largest attainable Grassmann distance for n-dimensional subspaces."""
    return (math.pi / 2.0) * math.sqrt(n_components)


def vectorized_cosine(a, b) -> float:
    """Cosine similarity between two matrices flattened to vectors."""
    am = as_matrix(a, "a")
    bm = as_matrix(b, "b")
    if am.shape != bm.shape:
        raise ShapeError(f"shape mismatch: {am.shape} vs {bm.shape}")
    na = float(np.linalg.norm(am))
    nb = float(np.linalg.norm(bm))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("zero-norm operand in vectorized cosine")
    c = float(np.tensordot(am, bm) / (na * nb))
    return min(1.0, max(-1.0, c))


def pairwise_metric_matrix(items: Sequence, metric: Callable) -> np.ndarray:
    """Symmetric matrix of ``metric(items[i], items[j])`` over all pairs.

    Only the upper triangle is evaluated; the lower is mirrored. Metric
    failures are re-raised with the offending pair attached.
    """
    n = len(items)
    if n < 2:
        raise ShapeError(f"need at least 2 items, got {n}")
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            try:
                val = metric(items[i], items[j])
            except Exception as err:
                err.args = err.args + (f"at pair ({i}, {j})",)
                raise
            out[i, j] = val
            out[j, i] = val
    return out


@dataclass(frozen=True)
class Stats:
    """Mean and population standard deviation of a collection of values."""

    mean: float
    std: float


def offdiag_stats(m) -> Stats:
    """Mean and population standard deviation of the off-diagonal entries."""
    a = as_matrix(m, "matrix")
    e = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    if e < 2:
        raise ShapeError("matrix must be at least 2x2")
    mask = ~np.eye(e, dtype=bool)
    vals = a[mask]
    return Stats(mean=float(vals.mean()), std=float(vals.std()))
