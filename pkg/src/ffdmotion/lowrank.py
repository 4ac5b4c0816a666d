"""Truncated-SVD denoising of image sequences through the Casorati matrix."""

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import svds

from .sequence import CasoratiMatrix, from_casorati, to_casorati

# above this many rows the "auto" backend switches to a truncated solver
TRUNCATED_ROWS = 100_000


@dataclass(frozen=True, eq=False)
class SVDFactors:
    """Thin SVD ``A = U @ diag(singular_values) @ V.T`` with descending values."""

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    @property
    def rank_capacity(self):
        return self.singular_values.shape[0]

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    def reconstruct(self):
        return (self.U * self.singular_values) @ self.V.T


def _as_matrix(mat):
    if isinstance(mat, CasoratiMatrix):
        mat = mat.data
    a = np.asarray(mat, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def svd(mat, backend="exact", k=None):
    """Thin SVD of ``mat``.

    ``backend="exact"`` keeps all ``min(rows, cols)`` triplets. The
    ``"truncated"`` backend computes only the leading ``k`` (ARPACK, seeded
    start vector so repeated calls agree). ``"auto"`` picks truncated when
    ``k`` is given and the matrix has more than ``TRUNCATED_ROWS`` rows.
    """
    a = _as_matrix(mat)
    if backend == "auto":
        backend = "truncated" if k is not None and a.shape[0] > TRUNCATED_ROWS else "exact"
    if backend == "exact":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        return SVDFactors(u, s, vt.T)
    if backend != "truncated":
        raise ValueError(f"unknown SVD backend {backend!r}")
    r = min(a.shape)
    if k is None or not 1 <= k < r:
        raise ValueError(f"truncated backend needs 1 <= k < {r}")
    v0 = np.ones(min(a.shape)) / np.sqrt(min(a.shape))
    u, s, vt = svds(a, k=k, v0=v0, solver="arpack")
    order = np.argsort(s)[::-1]
    u, s, vt = u[:, order], s[order], vt[order]
    # ARPACK leaves the sign of each triplet arbitrary; fix it for determinism
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return SVDFactors(u * signs, s, (vt * signs[:, None]).T)


def rank_k_approx(factors, k):
    """Best rank-``k`` approximation ``sum_{y<=k} s_y u_y v_y^T``."""
    r = factors.rank_capacity
    if not 1 <= k <= r:
        raise ValueError(f"k must be in 1..{r}, got {k}")
    return (factors.U[:, :k] * factors.singular_values[:k]) @ factors.V[:, :k].T


def approx_error(factors, k):
    """Spectral-norm error of the rank-``k`` approximation, i.e. ``s_{k+1}``."""
    r = factors.rank_capacity
    if not 1 <= k < r:
        raise ValueError(f"k must be in 1..{r - 1}, got {k}")
    return float(factors.singular_values[k])


def denoise_sequence(seq, k, backend="auto"):
    """Project a sequence onto its ``k`` dominant Casorati components."""
    m, n, s = seq.dims
    if not 1 <= k <= min(m * n, s):
        raise ValueError(f"k must be in 1..{min(m * n, s)}, got {k}")
    cas = to_casorati(seq)
    if k == min(m * n, s):
        backend = "exact"
    factors = svd(cas, backend=backend, k=k)
    approx = rank_k_approx(factors, k)
    return from_casorati(CasoratiMatrix(approx, cas.source_dims))
