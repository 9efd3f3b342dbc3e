"""Matrix-free linear algebra: operator contracts, GMRES, and the
preconditioned solver for Birkhoff-discretized Newton systems.

The central linear system has the form ``[I - B J] x = rhs`` where ``B``
is the (never materialized) integration operator applied channel-wise and
``J`` is a block-diagonal node Jacobian.  ``fast_ax`` applies the system
operator in O(N log N); ``fast_pinv`` inverts the triangular-surrogate
approximation ``[I - B~ J]`` exactly in one O(N) sweep, and
``fast_lin_sol`` wires both into a right-preconditioned GMRES so that the
reported residual is always the true unpreconditioned one.

Vectors over multiple state channels are stored channel-major: a field
with ``nx`` channels on an order-N grid flattens to shape
``(nx * (N+1),)`` with channel ``c`` occupying ``[c*(N+1), (c+1)*(N+1))``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .birkhoff import BirkhoffOperator, TriangularSurrogate, _fast_bv_b
from .errors import NumericalBreakdownError, SingularPreconditionerError

__all__ = [
    "LinearMap",
    "NodeJacobian",
    "KrylovConfig",
    "KrylovStats",
    "TriangularPreconditioner",
    "fast_ax",
    "fast_pinv",
    "gmres",
    "fast_lin_sol",
]


@dataclass(frozen=True)
class LinearMap:
    """A square linear operator given only through its action."""

    dim: int
    matvec: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.matvec(x)


@dataclass(frozen=True)
class NodeJacobian:
    """Block-diagonal node Jacobian: one nx-by-nx block per grid node.

    ``blocks`` has shape (N+1, nx, nx); block ``k`` is the dynamics
    Jacobian at node ``k``.  The full (N+1)nx square matrix it represents
    is never assembled.
    """

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=float)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ValueError("blocks must have shape (n_nodes, nx, nx)")
        object.__setattr__(self, "blocks", b)

    @property
    def n_nodes(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_channels(self) -> int:
        return self.blocks.shape[1]

    @classmethod
    def from_diagonal(cls, d: np.ndarray) -> "NodeJacobian":
        """Scalar-channel Jacobian from per-node values."""
        d = np.asarray(d, dtype=float)
        return cls(d.reshape(-1, 1, 1))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Blockwise product; ``X`` is channel-major (nx, N+1)."""
        return np.einsum("kij,jk->ik", self.blocks, X)

    def apply_transpose(self, X: np.ndarray) -> np.ndarray:
        return np.einsum("kji,jk->ik", self.blocks, X)


@dataclass(frozen=True)
class KrylovConfig:
    """Tolerances and limits for one Krylov solve.

    ``tol`` is relative to the right-hand-side norm; ``restart=None``
    means full (unrestarted) GMRES; ``max_iter`` caps the total number of
    inner iterations across restart cycles.
    """

    tol: float = 1e-10
    max_iter: int = 1000
    restart: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class KrylovStats:
    """Outcome of a single Krylov solve (true-residual based)."""

    iterations: int = 0
    final_residual: float = np.nan
    converged: bool = False
    matvec_count: int = 0


def fast_ax(op: BirkhoffOperator, jac: NodeJacobian, chi: np.ndarray) -> np.ndarray:
    """Apply ``[I - B J]`` to a flat channel-major vector, matrix-free.

    The block-diagonal product costs O(N nx^2); the integration operator
    is applied per channel at O(N log N).
    """
    if op.variant != "a":
        raise ValueError("fast_ax requires the variant-'a' operator")
    n_nodes = op.grid.n_nodes
    nx = jac.n_channels
    if jac.n_nodes != n_nodes:
        raise ValueError("node Jacobian does not match grid size")
    chi = np.asarray(chi, dtype=float)
    if chi.shape != (n_nodes * nx,):
        raise ValueError(
            f"vector of shape {chi.shape} does not match {nx} channels on "
            f"{n_nodes} nodes"
        )
    X = chi.reshape(nx, n_nodes)
    return (X - _fast_bv_b(jac.apply(X))).reshape(-1)


class TriangularPreconditioner:
    """Exact inverse of ``[I - B~ J]`` with per-node pivots prefactored.

    Building the object factors the nx-by-nx diagonal pivot blocks once;
    each :meth:`solve` is then a single O(N) forward substitution sweep.
    Raises :class:`SingularPreconditionerError` (naming the node) if any
    pivot block is not invertible.
    """

    def __init__(self, surrogate: TriangularSurrogate, jac: NodeJacobian):
        grid = surrogate.grid
        if jac.n_nodes != grid.n_nodes:
            raise ValueError("node Jacobian does not match grid size")
        self.grid = grid
        self.nx = jac.n_channels
        self._blocks = jac.blocks
        w = grid.cc_weights
        # G_k = w_k * D_k; pivot_k = I - G_k / 2
        self._G = w[:, None, None] * jac.blocks
        eye = np.eye(self.nx)
        piv = eye[None, :, :] - 0.5 * self._G
        dets = np.linalg.det(piv)
        bad = np.where(np.abs(dets) < 1e-300)[0]
        if bad.size:
            raise SingularPreconditionerError(int(bad[0]))
        try:
            self._piv_inv = np.linalg.inv(piv)
        except np.linalg.LinAlgError:
            worst = int(np.argmin(np.abs(dets)))
            raise SingularPreconditionerError(worst) from None
        if not np.all(np.isfinite(self._piv_inv)):
            worst = int(np.argmin(np.abs(dets)))
            raise SingularPreconditionerError(worst)
        # prefix-state propagation s_{k+1} = A_k s_k + G_k xi_k
        self._A = eye[None, :, :] + np.einsum(
            "kij,kjl->kil", self._G, self._piv_inv
        )

    @property
    def dim(self) -> int:
        return self.grid.n_nodes * self.nx

    def solve(self, upsilon: np.ndarray) -> np.ndarray:
        """Forward sweep computing ``[I - B~ J]^{-1} upsilon``."""
        n_nodes = self.grid.n_nodes
        nx = self.nx
        U = np.asarray(upsilon, dtype=float).reshape(nx, n_nodes).T  # node-major
        if nx == 1:
            a = self._A[:, 0, 0].tolist()
            q = (self._G[:, 0, 0] * self._piv_inv[:, 0, 0] * U[:, 0]).tolist()
            s = 0.0
            S = np.empty(n_nodes)
            for k in range(n_nodes):
                S[k] = s
                s = a[k] * s + q[k]
            xi = self._piv_inv[:, 0, 0] * (U[:, 0] + S)
            return xi.reshape(1, n_nodes).reshape(-1)
        # q_k = G_k pivinv_k upsilon_k, batched; the sweep then needs one
        # small matvec per node
        q = np.einsum("kij,kj->ki", self._A, U) - U
        S = np.empty((n_nodes, nx))
        s = np.zeros(nx)
        A = self._A
        for k in range(n_nodes):
            S[k] = s
            s = A[k] @ s + q[k]
        xi = np.einsum("kij,kj->ki", self._piv_inv, U + S)
        return xi.T.reshape(-1)

    def solve_transpose(self, upsilon: np.ndarray) -> np.ndarray:
        """Backward sweep computing ``[I - B~ J]^{-T} upsilon``.

        The transpose system is upper triangular: with the tail sum
        ``t_k = sum_{j>k} x_j`` it reads
        ``x_k = pivinv_k^T (u_k + G_k^T t_k)``, so the tail obeys
        ``t_{k-1} = A_k^T t_k + pivinv_k^T u_k`` and the solution drops out
        of tail differences.
        """
        n_nodes = self.grid.n_nodes
        nx = self.nx
        U = np.asarray(upsilon, dtype=float).reshape(nx, n_nodes).T
        if nx == 1:
            a = self._A[:, 0, 0].tolist()
            q = (self._piv_inv[:, 0, 0] * U[:, 0]).tolist()
            T = np.empty(n_nodes + 1)
            T[n_nodes] = 0.0
            t = 0.0
            for k in range(n_nodes - 1, -1, -1):
                t = a[k] * t + q[k]
                T[k] = t
            return (T[:-1] - T[1:]).reshape(-1)
        AT = np.swapaxes(self._A, 1, 2)
        q = np.einsum("kji,kj->ki", self._piv_inv, U)
        T = np.empty((n_nodes + 1, nx))
        T[n_nodes] = 0.0
        t = np.zeros(nx)
        for k in range(n_nodes - 1, -1, -1):
            t = AT[k] @ t + q[k]
            T[k] = t
        return (T[:-1] - T[1:]).T.reshape(-1)

    def solve_right_transpose(self, upsilon: np.ndarray) -> np.ndarray:
        """Backward sweep computing ``[I - B~^T J^T]^{-1} upsilon``.

        This is the transpose of the companion system ``[I - J B~]``
        (Jacobian applied after the surrogate); it shares pivots with the
        main sweep because each node's block commutes with its own pivot
        inverse.  With the tail ``t_k = sum_{j>k} D_j^T x_j`` it reads
        ``x_k = pivinv_k^T (u_k + w_k t_k)`` and
        ``t_{k-1} = A_k^T t_k + D_k^T pivinv_k^T u_k``.
        """
        n_nodes = self.grid.n_nodes
        nx = self.nx
        w = self.grid.cc_weights
        U = np.asarray(upsilon, dtype=float).reshape(nx, n_nodes).T
        if nx == 1:
            a = self._A[:, 0, 0].tolist()
            q = (
                self._blocks[:, 0, 0] * self._piv_inv[:, 0, 0] * U[:, 0]
            ).tolist()
            T = np.empty(n_nodes)
            t = 0.0
            for k in range(n_nodes - 1, -1, -1):
                T[k] = t
                t = a[k] * t + q[k]
            xi = self._piv_inv[:, 0, 0] * (U[:, 0] + w * T)
            return xi.reshape(-1)
        AT = np.swapaxes(self._A, 1, 2)
        e1 = np.einsum("kji,kj->ki", self._piv_inv, U)
        q = np.einsum("kji,kj->ki", self._blocks, e1)
        T = np.empty((n_nodes, nx))
        t = np.zeros(nx)
        for k in range(n_nodes - 1, -1, -1):
            T[k] = t
            t = AT[k] @ t + q[k]
        xi = np.einsum("kji,kj->ki", self._piv_inv, U + w[:, None] * T)
        return xi.T.reshape(-1)


def fast_pinv(
    s: TriangularSurrogate, jac: NodeJacobian, upsilon: np.ndarray
) -> np.ndarray:
    """One-shot solve of ``[I - B~ J] x = upsilon`` by the O(N) sweep.

    Convenience wrapper; repeated applications with a fixed Jacobian
    should build a :class:`TriangularPreconditioner` once and reuse it.
    The sweep accumulates the running sum with the computed solution
    components, which is the update that makes the inverse exact (the
    round trip ``[I - B~ J] fast_pinv(u) == u`` holds to roundoff).
    """
    upsilon = np.asarray(upsilon, dtype=float)
    expected = s.grid.n_nodes * jac.n_channels
    if upsilon.shape != (expected,):
        raise ValueError("vector length does not match grid/channel count")
    return TriangularPreconditioner(s, jac).solve(upsilon)


def _as_matvec(op) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(op, LinearMap):
        return op.matvec
    if callable(op):
        return op
    raise TypeError("operator must be a LinearMap or a callable")


def gmres(
    op: LinearMap,
    rhs: np.ndarray,
    precond: Optional[LinearMap] = None,
    cfg: KrylovConfig = KrylovConfig(),
    x0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, KrylovStats]:
    """Right-preconditioned GMRES with true-residual stopping.

    Solves ``A M^{-1} y = rhs`` and returns ``x = M^{-1} y``, so the
    residual monitored by the Arnoldi recurrence is the genuine
    ``||A x - rhs||``; convergence is additionally confirmed by an
    explicit recomputation before reporting success.

    Returns the best iterate found with ``converged=False`` when the
    iteration budget runs out; raises :class:`NumericalBreakdownError` if
    any matrix-vector product goes non-finite.
    """
    matvec = _as_matvec(op)
    psolve = _as_matvec(precond) if precond is not None else None
    b = np.asarray(rhs, dtype=float)
    n = b.size
    stats = KrylovStats()

    def apply_A(v):
        stats.matvec_count += 1
        out = np.asarray(matvec(v), dtype=float)
        if out is v or np.may_share_memory(out, v):
            out = out.copy()  # protect the Krylov basis from aliasing
        if not np.all(np.isfinite(out)):
            raise NumericalBreakdownError(
                "non-finite values in operator application"
            )
        return out

    def from_y(v):
        return psolve(v) if psolve is not None else v

    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        stats.converged = True
        stats.final_residual = 0.0
        return np.zeros(n), stats
    tol_abs = cfg.tol * bnorm

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - apply_A(x) if x0 is not None else b.copy()
    best_x = x.copy()
    best_res = float(np.linalg.norm(r))
    if best_res <= tol_abs:
        stats.converged = True
        stats.final_residual = best_res
        return best_x, stats

    m = cfg.restart if cfg.restart is not None else cfg.max_iter
    m = max(1, min(m, cfg.max_iter))

    while stats.iterations < cfg.max_iter:
        rnorm = float(np.linalg.norm(r))
        V = np.empty((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        V[0] = r / rnorm
        g[0] = rnorm
        j = 0
        breakdown = False
        while j < m and stats.iterations < cfg.max_iter:
            w = apply_A(from_y(V[j]))
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w -= H[i, j] * V[i]
            hnext = float(np.linalg.norm(w))
            H[j + 1, j] = hnext
            if hnext > 1e-300:
                V[j + 1] = w / hnext
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                denom = 1.0
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            stats.iterations += 1
            j += 1
            if hnext <= 1e-300:
                breakdown = True  # happy breakdown: subspace is invariant
                break
            if abs(g[j]) <= tol_abs:
                break
        # assemble current iterate and its true residual
        y = np.linalg.solve(np.triu(H[:j, :j]), g[:j]) if j else np.zeros(0)
        x_try = x + from_y(V[:j].T @ y) if j else x
        r_try = b - apply_A(x_try)
        res = float(np.linalg.norm(r_try))
        if res < best_res:
            best_res = res
            best_x = x_try
        if best_res <= tol_abs:
            stats.converged = True
            break
        if breakdown:
            # invariant subspace reached but residual still above target
            break
        x, r = x_try, r_try

    stats.final_residual = best_res
    return best_x, stats


def fast_lin_sol(
    op: BirkhoffOperator,
    jac: NodeJacobian,
    rhs: np.ndarray,
    cfg: Optional[KrylovConfig] = None,
    x0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, KrylovStats]:
    """Solve ``[I - B J] x = rhs`` by preconditioned matrix-free GMRES.

    ``fast_ax`` supplies the operator action and the triangular-surrogate
    sweep supplies the right preconditioner.  If the initial guess already
    meets the tolerance the solve returns immediately.  Unrestarted below
    order 4096; restart length 60 above.
    """
    if cfg is None:
        cfg = KrylovConfig()
    n = op.grid.n_nodes * jac.n_channels
    restart = cfg.restart
    if restart is None and op.grid.order >= 4096:
        restart = 60
    run_cfg = KrylovConfig(tol=cfg.tol, max_iter=cfg.max_iter, restart=restart)
    pre = TriangularPreconditioner(TriangularSurrogate(op.grid), jac)
    amap = LinearMap(n, lambda v: fast_ax(op, jac, v))
    mmap = LinearMap(n, pre.solve)
    return gmres(amap, rhs, precond=mmap, cfg=run_cfg, x0=x0)
