"""Chebyshev-Gauss-Lobatto grids and fast nodal/modal transforms.

Conventions used throughout the package:

* The grid of polynomial order ``N`` has ``N + 1`` nodes
  ``tau_j = -cos(j*pi/N)``, ascending from -1 to +1.
* A grid function is represented either by its nodal values
  ``v_j = v(tau_j)`` or by its Chebyshev-T modal coefficients ``a_k`` with
  ``v(tau) = sum_k a_k T_k(tau)``.  Both are plain 1-D float arrays of
  length ``N + 1``.
* ``dct1`` is the half-weighted type-I cosine transform
  ``y_j = x_0/2 + sum_{k=1}^{N-1} x_k cos(k j pi / N) + (-1)^j x_N/2``,
  realized through a real FFT of the even-symmetric length-2N extension.

All functions are pure; :class:`ChebGrid` is immutable and may be shared
freely across threads.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChebGrid",
    "make_grid",
    "dct1",
    "dct1_direct",
    "modal_to_nodal",
    "nodal_to_modal",
    "antiderivative_coeffs",
    "clenshaw_eval",
]

# Below this size a direct cosine-matrix product beats the FFT setup cost.
_DIRECT_CUTOFF = 32


@dataclass(frozen=True)
class ChebGrid:
    """Chebyshev-Gauss-Lobatto grid of polynomial order ``order``.

    Attributes
    ----------
    order : int
        Polynomial order N; the grid has N + 1 nodes.
    nodes : ndarray, shape (N+1,)
        Ascending CGL nodes, ``nodes[0] = -1``, ``nodes[N] = +1``.
    cgl_weights : ndarray, shape (N+1,)
        Chebyshev-Gauss-Lobatto quadrature weights: ``pi/(2N)`` at the
        endpoints, ``pi/N`` inside (weights for the 1/sqrt(1-tau^2)
        measure).
    cc_weights : ndarray, shape (N+1,)
        Clenshaw-Curtis quadrature weights for the plain Lebesgue measure;
        exact for polynomials through degree N and summing to 2.
    """

    order: int
    nodes: np.ndarray
    cgl_weights: np.ndarray
    cc_weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.order + 1


def make_grid(N: int) -> ChebGrid:
    """Build the CGL grid of order ``N`` with both weight families.

    The Clenshaw-Curtis weights are obtained in O(N log N) by applying the
    adjoint of the nodal-to-modal transform to the exact Chebyshev moments
    ``int_{-1}^{1} T_k = 2/(1-k^2)`` (even k), which is the transform-based
    construction usually attributed to Waldvogel.

    Raises
    ------
    ValueError
        If ``N < 1``.
    """
    if N < 1:
        raise ValueError(f"grid order must be >= 1, got {N}")
    j = np.arange(N + 1)
    nodes = -np.cos(j * np.pi / N)
    nodes[0] = -1.0
    nodes[N] = 1.0
    if N % 2 == 0:
        nodes[N // 2] = 0.0

    cgl = np.full(N + 1, np.pi / N)
    cgl[0] = cgl[N] = np.pi / (2 * N)

    cc = _clenshaw_curtis_weights(N)
    return ChebGrid(order=N, nodes=nodes, cgl_weights=cgl, cc_weights=cc)


def _chebyshev_moments(N: int) -> np.ndarray:
    """Exact integrals of T_0..T_N over [-1, 1]."""
    k = np.arange(N + 1)
    m = np.zeros(N + 1)
    even = k % 2 == 0
    m[even] = 2.0 / (1.0 - k[even].astype(float) ** 2)
    m[0] = 2.0
    return m


def _clenshaw_curtis_weights(N: int) -> np.ndarray:
    # Quadrature of the interpolant: int v = moments . (nodal_to_modal v),
    # so the weight vector is the transpose of nodal_to_modal applied to
    # the moment vector.  That transpose is again a dct1 with end-point
    # scalings folded in (dct1^T = halve_ends . dct1 . double_ends).
    if N == 1:
        return np.array([1.0, 1.0])
    w = dct1(_chebyshev_moments(N)) * (2.0 / N)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w[::-1].copy()


def dct1(x: np.ndarray) -> np.ndarray:
    """Half-weighted type-I DCT of a real vector of length N+1.

    Returns ``y`` with
    ``y_j = x_0/2 + sum_{k=1}^{N-1} x_k cos(k j pi/N) + (-1)^j x_N/2``.
    Cost is O(N log N) via a real FFT of the even extension; short inputs
    take the direct O(N^2) summation, which is faster there.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("dct1 expects a 1-D array of length >= 2")
    if x.size < _DIRECT_CUTOFF:
        return dct1_direct(x)
    N = x.size - 1
    ext = np.empty(2 * N)
    ext[: N + 1] = x
    ext[N + 1 :] = x[N - 1 : 0 : -1]
    return 0.5 * np.fft.rfft(ext).real


def dct1_direct(x: np.ndarray) -> np.ndarray:
    """O(N^2) summation form of :func:`dct1`, kept as a cross-check path."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("dct1 expects a 1-D array of length >= 2")
    N = x.size - 1
    j = np.arange(N + 1)
    C = np.cos(np.outer(j, j) * (np.pi / N))
    C[:, 0] = 0.5
    C[:, N] = 0.5 * (-1.0) ** j
    return C @ x


def modal_to_nodal(a: np.ndarray, grid: ChebGrid) -> np.ndarray:
    """Evaluate a Chebyshev series at the CGL nodes (coefficients to values).

    Three steps: double the first and last coefficient, apply :func:`dct1`,
    reverse the output (the transform naturally produces values at the
    descending-node ordering).
    """
    a = np.asarray(a, dtype=float)
    if a.size != grid.n_nodes:
        raise ValueError(
            f"coefficient vector of length {a.size} does not match grid with "
            f"{grid.n_nodes} nodes"
        )
    work = a.copy()
    work[0] *= 2.0
    work[-1] *= 2.0
    return dct1(work)[::-1].copy()


def nodal_to_modal(v: np.ndarray, grid: ChebGrid) -> np.ndarray:
    """Chebyshev coefficients of the interpolant through nodal values.

    Inverse of :func:`modal_to_nodal`: reverse the samples, apply
    :func:`dct1`, scale by 2/N and halve the first and last coefficient.
    """
    v = np.asarray(v, dtype=float)
    if v.size != grid.n_nodes:
        raise ValueError(
            f"value vector of length {v.size} does not match grid with "
            f"{grid.n_nodes} nodes"
        )
    N = grid.order
    a = dct1(v[::-1]) * (2.0 / N)
    a[0] *= 0.5
    a[-1] *= 0.5
    return a


def _antiderivative_unfolded(a: np.ndarray) -> np.ndarray:
    """Coefficients c_0..c_{N+1} of the antiderivative vanishing at -1.

    Uses the Chebyshev integral identities; the result has one extra
    coefficient (degree N+1) which callers fold back onto degree N-1.
    """
    N = a.size - 1
    c = np.zeros(N + 2)
    k = np.arange(2, N)
    # alternating-series constant term fixes F(-1) = 0
    ks = np.arange(2, N + 1)
    c[0] = a[0] - 0.25 * a[1] - np.sum(a[2:] * ((-1.0) ** ks) / (ks**2 - 1.0))
    c[1] = a[0] - 0.5 * a[2]
    c[k] = (a[k - 1] - a[k + 1]) / (2.0 * k)
    c[N] = a[N - 1] / (2.0 * N)
    c[N + 1] = a[N] / (2.0 * (N + 1))
    return c


def _fold_top_coeff(c: np.ndarray) -> np.ndarray:
    # On N+1 CGL nodes T_{N+1} takes the same values as T_{N-1}, so the
    # degree-(N+1) coefficient folds onto degree N-1 without loss.
    folded = c[:-1].copy()
    folded[-2] += c[-1]
    return folded


def antiderivative_coeffs(a: np.ndarray) -> np.ndarray:
    """Map series coefficients to those of the antiderivative from -1.

    Given ``a`` for ``v = sum a_k T_k``, returns coefficients of the
    degree-N representation of ``int_{-1}^{tau} v`` on the CGL grid, i.e.
    the exact degree-(N+1) antiderivative with its top coefficient aliased
    back onto degree N-1.  Cost is O(N).

    Raises
    ------
    ValueError
        If the order is below 2 (the recurrence needs N >= 2).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size < 3:
        raise ValueError("antiderivative_coeffs requires order N >= 2")
    return _fold_top_coeff(_antiderivative_unfolded(a))


def clenshaw_eval(a: np.ndarray, tau) -> float:
    """Evaluate ``sum_k a_k T_k(tau)`` by the backward recurrence.

    ``tau`` may be a scalar or an array; all entries must lie in [-1, 1].
    """
    a = np.asarray(a, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(np.abs(tau) > 1.0 + 1e-14):
        raise ValueError("evaluation point outside [-1, 1]")
    b1 = np.zeros_like(tau)
    b2 = np.zeros_like(tau)
    two_tau = 2.0 * tau
    for k in range(a.size - 1, 0, -1):
        b1, b2 = a[k] + two_tau * b1 - b2, b1
    out = a[0] + tau * b1 - b2
    return float(out) if out.ndim == 0 else out
