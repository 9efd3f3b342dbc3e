"""Birkhoff integration operators on CGL grids.

The integration operator maps nodal samples of a derivative to nodal values
of the antiderivative that vanishes at tau = -1 (variant "a") or at
tau = +1 (variant "b").  Three representations are provided:

* :func:`fast_bv` - O(N log N) matrix-free application of the variant-"a"
  operator through the modal antiderivative map;
* :func:`dense_birkhoff` - explicit dense assembly by an independent code
  path (Vandermonde-style solve, no FFTs), used as a test oracle and for
  small-N direct work;
* :class:`TriangularSurrogate` / :func:`fast_bcc_v` - the lower-triangular
  Clenshaw-Curtis surrogate, applied in a single O(N) sweep, which is the
  building block of the solver's preconditioner.
"""

from dataclasses import dataclass

import numpy as np

from .spectral import (
    ChebGrid,
    _antiderivative_unfolded,
    _fold_top_coeff,
    dct1,
    dct1_direct,
)

__all__ = [
    "BirkhoffOperator",
    "TriangularSurrogate",
    "fast_bv",
    "fast_bv_transpose",
    "fast_bcc_v",
    "dense_birkhoff",
    "surrogate_error_norm",
]

# Refuse dense assembly above this order: (4097)^2 doubles is ~134 MB and
# anything bigger defeats the purpose of the matrix-free code paths.
DENSE_GUARD = 4096

_DIRECT_CUTOFF = 32


@dataclass(frozen=True)
class BirkhoffOperator:
    """Integration operator bound to a grid.

    ``variant="a"`` integrates from the left endpoint (result vanishes at
    tau=-1); ``variant="b"`` from the right.  Only variant "a" has a fast
    apply; the solver needs nothing else.
    """

    grid: ChebGrid
    variant: str = "a"

    def __post_init__(self):
        if self.variant not in ("a", "b"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def apply(self, v: np.ndarray) -> np.ndarray:
        return fast_bv(self, v)


@dataclass(frozen=True)
class TriangularSurrogate:
    """Lower-triangular Clenshaw-Curtis approximation of the "a" operator.

    Column j holds w_j below the diagonal and w_j/2 on it, where w are the
    grid's Clenshaw-Curtis weights.  Never materialized: it is applied (and
    later inverted) in single O(N) sweeps.
    """

    grid: ChebGrid

    def apply(self, v: np.ndarray) -> np.ndarray:
        return fast_bcc_v(self, v)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        """Transpose sweep: row k is ``w_k (v_k/2 + sum_{j>k} v_j)``."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError("vector length does not match grid")
        return _bcc_t_b(self.grid.cc_weights, v)

    def dense(self) -> np.ndarray:
        """Materialized surrogate, for tests and small-N diagnostics."""
        w = self.grid.cc_weights
        M = np.tril(np.tile(w, (self.grid.n_nodes, 1)), -1)
        np.fill_diagonal(M, 0.5 * w)
        return M


# ---------------------------------------------------------------------------
# batched transform kernels (last axis = nodes); these mirror the public
# single-vector functions in spectral.py but amortize FFT calls over
# multiple channels.


def _dct1_b(X: np.ndarray) -> np.ndarray:
    N = X.shape[-1] - 1
    if X.shape[-1] < _DIRECT_CUTOFF:
        j = np.arange(N + 1)
        C = np.cos(np.outer(j, j) * (np.pi / N))
        C[:, 0] = 0.5
        C[:, N] = 0.5 * (-1.0) ** j
        return X @ C.T
    ext = np.concatenate([X, X[..., N - 1 : 0 : -1]], axis=-1)
    return 0.5 * np.fft.rfft(ext, axis=-1).real


def _n2m_b(V: np.ndarray) -> np.ndarray:
    N = V.shape[-1] - 1
    A = _dct1_b(V[..., ::-1]) * (2.0 / N)
    A[..., 0] *= 0.5
    A[..., -1] *= 0.5
    return A


def _m2n_b(A: np.ndarray) -> np.ndarray:
    W = A.copy()
    W[..., 0] *= 2.0
    W[..., -1] *= 2.0
    return _dct1_b(W)[..., ::-1].copy()


def _anti_b(A: np.ndarray) -> np.ndarray:
    """Batched antiderivative coefficient map with the degree fold."""
    N = A.shape[-1] - 1
    k = np.arange(2, N)
    ks = np.arange(2, N + 1)
    C = np.zeros(A.shape[:-1] + (N + 1,))
    C[..., 0] = (
        A[..., 0]
        - 0.25 * A[..., 1]
        - np.sum(A[..., 2:] * ((-1.0) ** ks) / (ks**2 - 1.0), axis=-1)
    )
    C[..., 1] = A[..., 0] - 0.5 * A[..., 2]
    C[..., k] = (A[..., k - 1] - A[..., k + 1]) / (2.0 * k)
    C[..., N] = A[..., N - 1] / (2.0 * N)
    # fold the implicit degree-(N+1) coefficient onto degree N-1
    C[..., N - 1] += A[..., N] / (2.0 * (N + 1))
    return C


def _fast_bv_b(V: np.ndarray) -> np.ndarray:
    """Variant-"a" integration applied along the last axis of a batch."""
    return _m2n_b(_anti_b(_n2m_b(V)))


def _anti_t_b(Y: np.ndarray) -> np.ndarray:
    """Transpose of the folded antiderivative coefficient map."""
    N = Y.shape[-1] - 1
    # undo the fold: the unfolded map has an extra output c_{N+1} whose
    # transpose duplicates the y_{N-1} entry
    Yx = np.concatenate([Y, Y[..., N - 1 : N]], axis=-1)
    out = np.zeros_like(Y)
    j = np.arange(1, N + 1)
    out[..., 0] = Yx[..., 0] + Yx[..., 1]
    out[..., 1:] = Yx[..., 2:] / (2.0 * (j + 1.0))
    out[..., 1] -= 0.25 * Yx[..., 0]
    j2 = np.arange(2, N + 1)
    out[..., 2:] -= Yx[..., 0:1] * ((-1.0) ** j2) / (j2**2 - 1.0)
    out[..., 2] -= 0.5 * Yx[..., 1]
    j3 = np.arange(3, N + 1)
    out[..., 3:] -= Yx[..., 2:N] / (2.0 * (j3 - 1.0))
    return out


def _fast_bv_t_b(U: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_fast_bv_b` along the last axis.

    Obtained by transposing each factor of the fast composition; the
    cosine-matrix transpose is again a dct1 with the endpoint scalings
    swapped to the other side.
    """
    N = U.shape[-1] - 1
    X = U[..., ::-1].copy()
    X[..., 0] *= 2.0
    X[..., -1] *= 2.0
    X = _dct1_b(X)
    X = _anti_t_b(X) * (2.0 / N)
    X = _dct1_b(X)
    X[..., 0] *= 0.5
    X[..., -1] *= 0.5
    return X[..., ::-1].copy()


def _bcc_b(w: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Batched surrogate apply along the last axis."""
    half = 0.5 * w * V
    prefix = np.zeros_like(V)
    prefix[..., 1:] = np.cumsum(2.0 * half[..., :-1], axis=-1)
    return half + prefix


def _bcc_t_b(w: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Batched transpose-surrogate apply along the last axis."""
    tail = np.zeros_like(V)
    tail[..., :-1] = np.cumsum(V[..., :0:-1], axis=-1)[..., ::-1]
    return w * (0.5 * V + tail)


# ---------------------------------------------------------------------------
# public operations


def fast_bv(op: BirkhoffOperator, v: np.ndarray) -> np.ndarray:
    """Apply the variant-"a" integration operator in O(N log N).

    Composition: nodal-to-modal transform, antiderivative coefficient map
    (with the aliasing fold), modal-to-nodal transform.  The result is the
    nodal antiderivative of the interpolant of ``v`` with value 0 at
    tau=-1; its last entry equals the Clenshaw-Curtis quadrature of ``v``.
    """
    if op.variant != "a":
        raise ValueError("fast apply exists only for variant 'a'; "
                         "use dense_birkhoff for variant 'b'")
    v = np.asarray(v, dtype=float)
    if v.shape != (op.grid.n_nodes,):
        raise ValueError(
            f"vector of shape {v.shape} does not match grid with "
            f"{op.grid.n_nodes} nodes"
        )
    if op.grid.order < 2:
        raise ValueError("integration operator requires order N >= 2")
    return _fast_bv_b(v)


def fast_bv_transpose(op: BirkhoffOperator, u: np.ndarray) -> np.ndarray:
    """Apply the transpose of the variant-"a" operator in O(N log N).

    Needed by adjoint-based consumers (constraint-Jacobian transposes in
    the SQP driver); equals ``dense_birkhoff(grid, "a").T @ u`` to roundoff.
    """
    if op.variant != "a":
        raise ValueError("fast transpose apply exists only for variant 'a'")
    u = np.asarray(u, dtype=float)
    if u.shape != (op.grid.n_nodes,):
        raise ValueError("vector length does not match grid")
    if op.grid.order < 2:
        raise ValueError("integration operator requires order N >= 2")
    return _fast_bv_t_b(u)


def fast_bcc_v(s: TriangularSurrogate, v: np.ndarray) -> np.ndarray:
    """Apply the triangular surrogate in one O(N) forward sweep.

    Row k of the result is ``w_k v_k / 2 + sum_{j<k} w_j v_j``; the running
    sum is carried by ``s <- 2 xi_k - s`` so the matrix is never formed.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (s.grid.n_nodes,):
        raise ValueError("vector length does not match grid")
    return _bcc_b(s.grid.cc_weights, v)


def dense_birkhoff(grid: ChebGrid, variant: str = "a") -> np.ndarray:
    """Densely assembled integration matrix (independent oracle path).

    Builds the Chebyshev Vandermonde matrix ``T`` and the matrix of exact
    antiderivative values ``T_int`` by direct cosine evaluation, then
    solves ``B T = T_int``.  Shares no code with the FFT route, which is
    what makes it useful as a cross-check.  Variant "b" follows from
    variant "a" by the index-reversal symmetry of the grid.

    Raises
    ------
    ValueError
        For orders above the dense memory guard (4096).
    """
    N = grid.order
    if N > DENSE_GUARD:
        raise ValueError(
            f"dense assembly refused for order {N} > {DENSE_GUARD}"
        )
    if variant == "b":
        Ba = dense_birkhoff(grid, "a")
        return -Ba[::-1, ::-1].copy()
    if variant != "a":
        raise ValueError(f"unknown variant {variant!r}")

    theta = np.arccos(np.clip(grid.nodes, -1.0, 1.0))
    k = np.arange(N + 1)
    T = np.cos(np.outer(theta, k))

    # exact antiderivatives of T_k from -1, evaluated via the closed forms
    Tint = np.zeros((N + 1, N + 1))
    Tint[:, 0] = grid.nodes + 1.0
    Tint[:, 1] = 0.25 * np.cos(2.0 * theta) - 0.25
    for kk in range(2, N + 1):
        Tint[:, kk] = (
            np.cos((kk + 1) * theta) / (2.0 * (kk + 1))
            - np.cos((kk - 1) * theta) / (2.0 * (kk - 1))
            - ((-1.0) ** kk) / (kk**2 - 1.0)
        )
    # B = Tint T^{-1}, via a dense solve on the transposed system
    return np.linalg.solve(T.T, Tint.T).T


def surrogate_error_norm(grid: ChebGrid) -> float:
    """Infinity-norm distance between the dense operator and its surrogate.

    Diagnostic only (dense construction); the value shrinks as the grid is
    refined, which is why the surrogate preconditions large problems so
    well.
    """
    if grid.order > 1024:
        raise ValueError("surrogate_error_norm limited to order <= 1024")
    B = dense_birkhoff(grid, "a")
    Bt = TriangularSurrogate(grid).dense()
    return float(np.abs(B - Bt).sum(axis=1).max())
