"""Thin singular value decomposition via one-sided Jacobi rotations.

The sizes this toolkit decomposes are small (overlap matrices of a few
columns, covariance matrices up to the model width), so a plain cyclic
one-sided Jacobi sweep is accurate and fast enough, and keeps the whole
metric path free of opaque library internals.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

MAX_SWEEPS = 100
CONVERGENCE_TOL = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def thin_svd(m, max_sweeps: int = MAX_SWEEPS, tol: float = CONVERGENCE_TOL):
    """Thin SVD ``m = u @ diag(s) @ v.T`` with ``r = min(p, q)`` columns.

    Columns of the working copy are orthogonalized by cyclic Jacobi
    rotations until every pairwise column cosine falls below ``tol``.
    Singular values are returned in descending order; ``u`` and ``v``
    have orthonormal columns. Raises :class:`NumericError` if the sweep
    cap is exhausted before convergence.
    """
    a = as_matrix(m)
    p, q = a.shape
    if p == 0 or q == 0:
        raise ValueError("matrix must be non-empty")
    if p < q:
        v, s, u = thin_svd(a.T, max_sweeps=max_sweeps, tol=tol)
        return u, s, v

    # Fresh Fortran-order copy: the input (or a view of it) must never be
    # mutated by the in-place rotations below.
    work = np.array(a, order="F", copy=True)
    v = np.asfortranarray(np.eye(q))
    norms2 = np.einsum("ij,ij->j", work, work)

    converged = False
    for _ in range(max_sweeps):
        # Refresh cached column norms once per sweep to stop drift from
        # the incremental updates below.
        norms2 = np.einsum("ij,ij->j", work, work)
        max_off = 0.0
        for i in range(q - 1):
            for j in range(i + 1, q):
                alpha = norms2[i]
                beta = norms2[j]
                # A collapsed column is orthogonal to everything; incremental
                # updates may also leave tiny negative norms from cancellation.
                if alpha <= 0.0 or beta <= 0.0:
                    continue
                gamma = float(work[:, i] @ work[:, j])
                denom = math.sqrt(alpha) * math.sqrt(beta)
                if denom == 0.0:
                    continue
                off = abs(gamma) / denom
                if off > max_off:
                    max_off = off
                if off <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta == 0.0:
                    t = 1.0
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                xi = work[:, i].copy()
                xj = work[:, j]
                work[:, i] = c * xi - s * xj
                work[:, j] = s * xi + c * xj
                yi = v[:, i].copy()
                yj = v[:, j]
                v[:, i] = c * yi - s * yj
                v[:, j] = s * yi + c * yj
                norms2[i] = c * c * alpha - 2.0 * c * s * gamma + s * s * beta
                norms2[j] = s * s * alpha + 2.0 * c * s * gamma + c * c * beta
        if max_off <= tol:
            converged = True
            break
    if not converged:
        raise NumericError(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps"
        )

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros((p, q), order="F")
    cutoff = max(sigma[0], 1.0) * 1e-300 if sigma.size else 0.0
    # Columns with effectively zero norm get an orthonormal completion so
    # u keeps orthonormal columns even for rank-deficient input.
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    for k in range(q):
        if sigma[k] > scale * 1e-13 and sigma[k] > cutoff:
            u[:, k] = work[:, k] / sigma[k]
        else:
            u[:, k] = _complete_column(u, k, p)
    return np.ascontiguousarray(u), sigma, np.ascontiguousarray(v)


def _complete_column(u: np.ndarray, k: int, p: int) -> np.ndarray:
    """Unit vector orthogonal to the first ``k`` columns of ``u``."""
    basis = u[:, :k]
    best = None
    best_norm = 0.0
    for m in range(p):
        cand = np.zeros(p)
        cand[m] = 1.0
        if k:
            cand -= basis @ (basis.T @ cand)
        n = float(np.linalg.norm(cand))
        if n > best_norm:
            best_norm = n
            best = cand / n
        if n > 0.9:
            break
    # Re-orthogonalize once; a single Gram-Schmidt pass can leave
    # residue when the candidate started nearly inside the span.
    if k:
        best = best - basis @ (basis.T @ best)
        best /= np.linalg.norm(best)
    return best

