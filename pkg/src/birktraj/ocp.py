"""Optimal-control problem definition, Birkhoff discretization, and the
Newton/SQP solvers.

A problem couples dynamics ``dx/dt = f(x, u, t, p)`` on a horizon
``[t_a, t_b]`` (``t_b`` may be free, in which case it is the first entry
of the parameter vector) with an endpoint cost ``E`` and endpoint equality
constraints ``e``.  Discretization maps the horizon to the reference
interval through ``t = t_a + (t_b - t_a)(tau + 1)/2`` and folds the chain
factor ``(t_b - t_a)/2`` into the dynamics so all spectral machinery stays
on [-1, 1].

Discrete unknowns (channel-major layout throughout): state samples ``X``,
control samples ``U``, derivative samples ``V``, endpoint values ``x_a``
and ``x_b``, and parameters ``p``.  The constraint set is

* integration:   X = x_a + B V        (per state channel)
* dynamics:      V = f_scaled(X, U, p)
* quadrature:    x_b = x_a + w_cc . V (per state channel)
* endpoints:     e(x_a, x_b, t_a, t_b, p) = 0

All oracles are vectorized over a trailing node axis.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .birkhoff import (
    BirkhoffOperator,
    TriangularSurrogate,
    _bcc_b,
    _bcc_t_b,
    _fast_bv_b,
    _fast_bv_t_b,
)
from .errors import (
    LineSearchStallError,
    NewtonDivergenceError,
    OracleValidationError,
)
from .krylov import (
    KrylovConfig,
    KrylovStats,
    LinearMap,
    NodeJacobian,
    TriangularPreconditioner,
    fast_lin_sol,
    gmres,
)
from .spectral import ChebGrid, clenshaw_eval, make_grid, nodal_to_modal

__all__ = [
    "OcpDefinition",
    "DiscreteNlp",
    "InitialGuess",
    "SolutionBundle",
    "SolveReport",
    "ValidationReport",
    "NewtonConfig",
    "SqpConfig",
    "discretize",
    "newton_feasibility",
    "sqp_solve",
    "validate_solution",
]


@dataclass(frozen=True)
class OcpDefinition:
    """Continuous-time problem data given through value/Jacobian oracles.

    Oracles are vectorized: ``dynamics(x, u, t, p)`` takes ``x`` of shape
    (n_states, M), ``u`` of shape (n_controls, M), ``t`` of shape (M,) and
    returns (n_states, M).  ``dynamics_jacobians`` returns the triple
    ``(fx, fu, fp)`` with shapes (n_states, n_states, M),
    (n_states, n_controls, M), (n_states, n_params, M).

    ``t_final=None`` marks a free final time; the first parameter entry is
    then the final time itself, and the dynamics must not depend on the
    clock time explicitly (the time-scaling chain rule assumes autonomy;
    the finite-difference validation pass rejects definitions that
    violate this).

    Endpoint oracles take ``(x_a, x_b, t_a, t_b, p)``;
    ``endpoint_cost_gradients`` returns ``(dE/dx_a, dE/dx_b, dE/dp)`` and
    ``endpoint_jacobians`` returns ``(de/dx_a, de/dx_b, de/dp)`` as dense
    arrays.  Any dependence on a free final time must be routed through
    the parameter vector.
    """

    n_states: int
    n_controls: int
    n_params: int
    dynamics: Callable
    dynamics_jacobians: Callable
    endpoint_cost: Callable
    endpoint_cost_gradients: Callable
    endpoint_constraints: Callable
    endpoint_jacobians: Callable
    t_start: float = -1.0
    t_final: Optional[float] = 1.0
    n_endpoint: Optional[int] = None

    @property
    def free_final_time(self) -> bool:
        return self.t_final is None

    def n_constraints(self, p: np.ndarray) -> int:
        if self.n_endpoint is not None:
            return self.n_endpoint
        xa = np.zeros(self.n_states)
        tb = p[0] if self.free_final_time else self.t_final
        return np.atleast_1d(
            self.endpoint_constraints(xa, xa, self.t_start, tb, p)
        ).size


@dataclass
class InitialGuess:
    """Starting point for the solvers: state/control samples + parameters."""

    X: np.ndarray
    U: np.ndarray
    p: np.ndarray


@dataclass
class SolutionBundle:
    """Discrete trajectory returned by the solvers (channel-major arrays)."""

    grid: ChebGrid
    t_nodes: np.ndarray
    X: np.ndarray
    U: np.ndarray
    V: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    p: np.ndarray


@dataclass
class SolveReport:
    """Iteration counts, residuals and timing for a Newton or SQP run."""

    converged: bool = False
    sqp_iterations: int = 0
    kkt_solves: int = 0
    total_krylov_iterations: int = 0
    feasibility_residual: float = np.inf
    optimality_residual: float = np.inf
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": bool(self.converged),
            "sqp_iterations": int(self.sqp_iterations),
            "kkt_solves": int(self.kkt_solves),
            "total_krylov_iterations": int(self.total_krylov_iterations),
            "feasibility_residual": float(self.feasibility_residual),
            "optimality_residual": float(self.optimality_residual),
            "wall_time": float(self.wall_time),
            "history": self.history,
        }


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-11
    max_iter: int = 50
    krylov_tol: float = 1e-8
    krylov_max_iter: int = 2000


@dataclass(frozen=True)
class SqpConfig:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-6
    max_iter: int = 50
    gamma: float = 1.0
    gamma_bounds: tuple = (1e-3, 1e3)
    max_backtracks: int = 30
    krylov_tol: float = 1e-11
    krylov_max_iter: int = 1500
    krylov_restart: Optional[int] = 100
    presolve: bool = True
    presolve_tol: float = 1e-10


# ---------------------------------------------------------------------------
# discretization


class DiscreteNlp:
    """Birkhoff discretization of an :class:`OcpDefinition` on one grid.

    Provides residual evaluation, matrix-free constraint-Jacobian products
    (forward and transpose) and the pack/unpack layout used by the
    solvers.  Built through :func:`discretize`, which also runs the
    finite-difference oracle validation.
    """

    def __init__(self, ocp: OcpDefinition, grid: ChebGrid):
        self.ocp = ocp
        self.grid = grid
        self.operator = BirkhoffOperator(grid, "a")
        self.surrogate = TriangularSurrogate(grid)
        self.nx = ocp.n_states
        self.nu = ocp.n_controls
        self.np_ = ocp.n_params
        self.nn = grid.n_nodes
        p_probe = np.full(max(self.np_, 1), 1.0)[: self.np_]
        if ocp.free_final_time:
            p_probe = p_probe.copy()
            p_probe[0] = ocp.t_start + 1.0
        self.ne = ocp.n_constraints(p_probe)
        nn = self.nn
        self.n_primal = (2 * self.nx + self.nu) * nn + 2 * self.nx + self.np_
        self.n_dual = 2 * self.nx * nn + self.nx + self.ne

    # -- layout -------------------------------------------------------

    def pack(self, X, U, V, xa, xb, p) -> np.ndarray:
        return np.concatenate(
            [
                np.reshape(X, -1),
                np.reshape(U, -1),
                np.reshape(V, -1),
                np.reshape(xa, -1),
                np.reshape(xb, -1),
                np.reshape(p, -1),
            ]
        )

    def unpack(self, z: np.ndarray):
        nn, nx, nu, np_ = self.nn, self.nx, self.nu, self.np_
        o1 = nx * nn
        o2 = o1 + nu * nn
        o3 = o2 + nx * nn
        X = z[:o1].reshape(nx, nn)
        U = z[o1:o2].reshape(nu, nn)
        V = z[o2:o3].reshape(nx, nn)
        xa = z[o3 : o3 + nx]
        xb = z[o3 + nx : o3 + 2 * nx]
        p = z[o3 + 2 * nx :]
        return X, U, V, xa, xb, p

    def pack_dual(self, l1, l2, l3, l4) -> np.ndarray:
        return np.concatenate(
            [np.reshape(l1, -1), np.reshape(l2, -1), np.reshape(l3, -1),
             np.reshape(l4, -1)]
        )

    def unpack_dual(self, lam: np.ndarray):
        nn, nx = self.nn, self.nx
        o1 = nx * nn
        o2 = 2 * o1
        l1 = lam[:o1].reshape(nx, nn)
        l2 = lam[o1:o2].reshape(nx, nn)
        l3 = lam[o2 : o2 + nx]
        l4 = lam[o2 + nx :]
        return l1, l2, l3, l4

    # -- time scaling ---------------------------------------------------

    def horizon(self, p: np.ndarray) -> tuple[float, float]:
        ta = self.ocp.t_start
        tb = float(p[0]) if self.ocp.free_final_time else self.ocp.t_final
        return ta, tb

    def time_nodes(self, p: np.ndarray) -> np.ndarray:
        ta, tb = self.horizon(p)
        return ta + (tb - ta) * 0.5 * (self.grid.nodes + 1.0)

    def scaled_dynamics(self, X, U, p) -> np.ndarray:
        """Dynamics samples at the nodes, chain factor included."""
        ta, tb = self.horizon(p)
        sigma = 0.5 * (tb - ta)
        t = self.time_nodes(p)
        return sigma * np.asarray(self.ocp.dynamics(X, U, t, p), dtype=float)

    def scaled_jacobians(self, X, U, p):
        """Node-wise Jacobian blocks of the scaled dynamics.

        Returns (Fx, Fu, Fp) with shapes (N+1, nx, nx), (N+1, nx, nu),
        (N+1, nx, np); for a free final time the first parameter column
        carries the chain-rule term f/2.
        """
        ta, tb = self.horizon(p)
        sigma = 0.5 * (tb - ta)
        t = self.time_nodes(p)
        fx, fu, fp = self.ocp.dynamics_jacobians(X, U, t, p)
        Fx = sigma * np.moveaxis(np.asarray(fx, dtype=float), -1, 0)
        Fu = sigma * np.moveaxis(np.asarray(fu, dtype=float), -1, 0)
        if self.np_:
            Fp = sigma * np.moveaxis(np.asarray(fp, dtype=float), -1, 0)
        else:
            Fp = np.zeros((self.nn, self.nx, 0))
        if self.ocp.free_final_time:
            f = np.asarray(self.ocp.dynamics(X, U, t, p), dtype=float)
            Fp = Fp.copy()
            Fp[:, :, 0] += 0.5 * f.T
        return Fx, Fu, Fp

    # -- residuals ------------------------------------------------------

    def constraints(self, z: np.ndarray) -> np.ndarray:
        X, U, V, xa, xb, p = self.unpack(z)
        ta, tb = self.horizon(p)
        c1 = X - xa[:, None] - _fast_bv_b(V)
        c2 = V - self.scaled_dynamics(X, U, p)
        c3 = xb - xa - V @ self.grid.cc_weights
        c4 = np.atleast_1d(
            self.ocp.endpoint_constraints(xa, xb, ta, tb, p)
        ).astype(float)
        return self.pack_dual(c1, c2, c3, c4)

    def objective(self, z: np.ndarray) -> float:
        X, U, V, xa, xb, p = self.unpack(z)
        ta, tb = self.horizon(p)
        return float(self.ocp.endpoint_cost(xa, xb, ta, tb, p))

    def objective_gradient(self, z: np.ndarray) -> np.ndarray:
        X, U, V, xa, xb, p = self.unpack(z)
        ta, tb = self.horizon(p)
        dxa, dxb, dp = self.ocp.endpoint_cost_gradients(xa, xb, ta, tb, p)
        g = np.zeros(self.n_primal)
        nx, nu, nn = self.nx, self.nu, self.nn
        o3 = (2 * nx + nu) * nn
        g[o3 : o3 + nx] = np.reshape(dxa, -1)
        g[o3 + nx : o3 + 2 * nx] = np.reshape(dxb, -1)
        if self.np_:
            g[o3 + 2 * nx :] = np.reshape(dp, -1)
        return g

    def linearize(self, z: np.ndarray) -> "Linearization":
        return Linearization(self, z)


class Linearization:
    """Constraint Jacobian of a :class:`DiscreteNlp` frozen at one point."""

    def __init__(self, nlp: DiscreteNlp, z: np.ndarray):
        self.nlp = nlp
        X, U, V, xa, xb, p = nlp.unpack(z)
        self.Fx, self.Fu, self.Fp = nlp.scaled_jacobians(X, U, p)
        ta, tb = nlp.horizon(p)
        Exa, Exb, Ep = nlp.ocp.endpoint_jacobians(xa, xb, ta, tb, p)
        self.Exa = np.atleast_2d(np.asarray(Exa, dtype=float))
        self.Exb = np.atleast_2d(np.asarray(Exb, dtype=float))
        self.Ep = np.atleast_2d(np.asarray(Ep, dtype=float)).reshape(
            nlp.ne, nlp.np_
        )

    def jdot(self, dz: np.ndarray) -> np.ndarray:
        """Directional derivative of the constraints, J @ dz."""
        nlp = self.nlp
        dX, dU, dV, dxa, dxb, dp = nlp.unpack(dz)
        c1 = dX - dxa[:, None] - _fast_bv_b(dV)
        c2 = (
            dV
            - np.einsum("kij,jk->ik", self.Fx, dX)
            - np.einsum("kij,jk->ik", self.Fu, dU)
            - np.einsum("kij,j->ik", self.Fp, dp)
        )
        c3 = dxb - dxa - dV @ nlp.grid.cc_weights
        c4 = self.Exa @ dxa + self.Exb @ dxb + self.Ep @ dp
        return nlp.pack_dual(c1, c2, c3, c4)

    def jtdot(self, lam: np.ndarray) -> np.ndarray:
        """Transpose product J^T @ lam."""
        nlp = self.nlp
        l1, l2, l3, l4 = nlp.unpack_dual(lam)
        zX = l1 - np.einsum("kji,jk->ik", self.Fx, l2)
        zU = -np.einsum("kij,ik->jk", self.Fu, l2)
        zV = (
            -_fast_bv_t_b(l1)
            + l2
            - np.outer(l3, nlp.grid.cc_weights)
        )
        zxa = -l1.sum(axis=1) - l3 + self.Exa.T @ l4
        zxb = l3 + self.Exb.T @ l4
        zp = np.einsum("kij,ik->j", self.Fp, -l2) + self.Ep.T @ l4
        return nlp.pack(zX, zU, zV, zxa, zxb, zp)


def _validate_oracles(nlp: DiscreteNlp, seed: int = 0, probes: int = 3):
    """Finite-difference check of all Jacobian oracles; raises on mismatch."""
    rng = np.random.default_rng(seed)
    nn, nx, nu, np_ = nlp.nn, nlp.nx, nlp.nu, nlp.np_
    for trial in range(probes):
        X = rng.uniform(0.8, 1.6, (nx, nn))
        U = rng.uniform(-0.4, 0.4, (nu, nn))
        p = rng.uniform(0.8, 1.6, np_)
        if nlp.ocp.free_final_time:
            p[0] = nlp.ocp.t_start + rng.uniform(1.0, 2.0)
        xa = X[:, 0].copy()
        xb = X[:, -1].copy()
        V = nlp.scaled_dynamics(X, U, p)
        z = nlp.pack(X, U, V, xa, xb, p)
        lin = nlp.linearize(z)
        dz = rng.standard_normal(z.size)
        dz /= np.abs(dz).max()
        h = 1e-6
        c_plus = nlp.constraints(z + h * dz)
        c_minus = nlp.constraints(z - h * dz)
        fd = (c_plus - c_minus) / (2 * h)
        an = lin.jdot(dz)
        scale = max(np.abs(fd).max(), np.abs(an).max(), 1.0)
        err = np.abs(fd - an).max() / scale
        if err > 1e-5:
            raise OracleValidationError(
                f"Jacobian oracle disagrees with finite differences "
                f"(probe {trial}, relative error {err:.2e}); check the "
                f"dynamics/endpoint Jacobians (and for free-final-time "
                f"problems, that the dynamics have no explicit time "
                f"dependence)"
            )
        # cost gradient check
        g = nlp.objective_gradient(z)
        fd_e = (nlp.objective(z + h * dz) - nlp.objective(z - h * dz)) / (2 * h)
        scale_e = max(abs(fd_e), float(np.abs(g @ dz)), 1.0)
        if abs(fd_e - g @ dz) / scale_e > 1e-5:
            raise OracleValidationError(
                f"endpoint-cost gradient oracle disagrees with finite "
                f"differences (probe {trial})"
            )


def discretize(ocp: OcpDefinition, N: int, validate: bool = True,
               seed: int = 0) -> DiscreteNlp:
    """Build the discrete NLP on the order-N CGL grid.

    Runs a randomized finite-difference validation of all Jacobian
    oracles unless ``validate=False``; a failing probe raises
    :class:`OracleValidationError` naming the failing quantity.
    """
    if N < 2:
        raise ValueError("discretization requires grid order N >= 2")
    nlp = DiscreteNlp(ocp, make_grid(N))
    if validate:
        _validate_oracles(nlp, seed=seed)
    return nlp


# ---------------------------------------------------------------------------
# Newton feasibility solver (controls and endpoints frozen)


def newton_feasibility(
    nlp: DiscreteNlp,
    U_fixed: np.ndarray,
    x_a: np.ndarray,
    cfg: NewtonConfig = NewtonConfig(),
    p: Optional[np.ndarray] = None,
    X0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SolveReport]:
    """Solve the discretized dynamics for fixed controls and initial state.

    Eliminates the derivative samples and runs Newton on
    ``X - x_a - B f_scaled(X, U) = 0``; each step is a preconditioned
    matrix-free linear solve.  Raises :class:`NewtonDivergenceError` when
    the residual grows five times in a row.
    """
    t0 = time.perf_counter()
    nn, nx = nlp.nn, nlp.nx
    U = np.asarray(U_fixed, dtype=float).reshape(nlp.nu, nn)
    x_a = np.asarray(x_a, dtype=float).reshape(nx)
    if p is None:
        p = np.zeros(nlp.np_)
    p = np.asarray(p, dtype=float)

    X = (
        np.tile(x_a[:, None], (1, nn))
        if X0 is None
        else np.asarray(X0, dtype=float).reshape(nx, nn).copy()
    )
    report = SolveReport()
    kcfg = KrylovConfig(tol=cfg.krylov_tol, max_iter=cfg.krylov_max_iter)

    grow_streak = 0
    prev_norm = np.inf
    for it in range(cfg.max_iter):
        resid = X - x_a[:, None] - _fast_bv_b(nlp.scaled_dynamics(X, U, p))
        rnorm = float(np.abs(resid).max())
        report.history.append({"iter": it, "feasibility": rnorm})
        report.feasibility_residual = rnorm
        if rnorm <= cfg.tol:
            report.converged = True
            break
        if it == 0:
            first_norm = rnorm
        if rnorm > prev_norm:
            grow_streak += 1
            if grow_streak >= 5 or rnorm > 1e8 * (1.0 + first_norm):
                report.wall_time = time.perf_counter() - t0
                raise NewtonDivergenceError(
                    f"Newton residual diverged (grew {grow_streak} "
                    f"consecutive steps, now {rnorm:.3e})",
                    report.history,
                )
        else:
            grow_streak = 0
        prev_norm = rnorm
        Fx, _, _ = nlp.scaled_jacobians(X, U, p)
        jac = NodeJacobian(Fx)
        step, stats = fast_lin_sol(
            nlp.operator, jac, -resid.reshape(-1), kcfg
        )
        report.kkt_solves += 1
        report.total_krylov_iterations += stats.iterations
        if not stats.converged:
            report.history[-1]["linear_solve_stalled"] = True
        X = X + step.reshape(nx, nn)
        report.sqp_iterations = it + 1

    report.wall_time = time.perf_counter() - t0
    report.optimality_residual = 0.0
    return X, report


# ---------------------------------------------------------------------------
# SQP driver


def _metric_weights(nlp: DiscreteNlp) -> np.ndarray:
    """Diagonal quadrature metric on the primal space.

    Nodal fields carry the Clenshaw-Curtis weights, so norms discretize
    plain L2 integrals and the SQP scaling is mesh-independent; this also
    matches the node-wise shape of the Lagrangian curvature (multipliers
    of the pointwise dynamics rows scale with the same weights), which is
    what lets a few per-block scalars model the Hessian.  Endpoint values
    and parameters carry unit weight.
    """
    w = nlp.grid.cc_weights
    return np.concatenate(
        [
            np.tile(w, nlp.nx),
            np.tile(w, nlp.nu),
            np.tile(w, nlp.nx),
            np.ones(2 * nlp.nx + nlp.np_),
        ]
    )


def _block_slices(nlp: DiscreteNlp) -> dict:
    """Primal-vector slices for the curvature blocks."""
    nn, nx, nu = nlp.nn, nlp.nx, nlp.nu
    o1 = nx * nn
    o2 = o1 + nu * nn
    o3 = o2 + nx * nn
    o4 = o3 + 2 * nx
    return {
        "controls": slice(o1, o2),
        "params": slice(o4, nlp.n_primal),
        "other": [slice(0, o1), slice(o2, o4)],
    }


class _KktSystem:
    """One SQP iteration's KKT solve in dual (multiplier) form.

    With a diagonal model Hessian ``H`` (quadrature-weighted, per-block
    curvature scalars) the primal-dual step solves exactly:

        (J H^-1 J^T) lam = c - J H^-1 g
        d = -H^-1 (g + J^T lam)

    which is the full KKT system of the linearized problem eliminated in
    closed form.  The dual operator is applied matrix-free; its
    preconditioner inverts the triangular-surrogate version of the
    integration/dynamics row block exactly (two O(N) sweeps) and is the
    identity on the small quadrature/endpoint rows.
    """

    def __init__(self, nlp: DiscreteNlp, lin: Linearization, h: np.ndarray):
        self.nlp = nlp
        self.lin = lin
        self.hinv = 1.0 / h
        nn, nx, nu = nlp.nn, nlp.nx, nlp.nu
        o2 = (nx + nu) * nn
        self._hX = h[: nx * nn].reshape(nx, nn)
        hV = h[o2 : o2 + nx * nn].reshape(nx, nn)
        self.pre = TriangularPreconditioner(
            nlp.surrogate, NodeJacobian(lin.Fx)
        )
        # dynamics-row block weights for the preconditioner: absorb the
        # node-diagonal control column contribution Fu Hu^-1 Fu^T, so the
        # approximation stays sharp when the per-block curvatures differ
        K = np.zeros((nn, nx, nx))
        if nu:
            hU = h[nx * nn : o2].reshape(nu, nn)
            K += np.einsum("kau,uk,kbu->kab", lin.Fu, 1.0 / hU, lin.Fu)
        idx = np.arange(nx)
        K[:, idx, idx] += (1.0 / hV).T
        self._HtV = np.linalg.inv(K)
        # row equilibration of the dual system: the integration/dynamics
        # multiplier rows blow up like 1/w near the boundary under the
        # quadrature metric; symmetric sqrt(w) scaling keeps the spectrum
        # flat so the Krylov counts stay mesh-independent
        sq = np.sqrt(nlp.grid.cc_weights)
        self.row_scale = np.concatenate(
            [np.tile(sq, nx), np.tile(sq, nx), np.ones(nx + nlp.ne)]
        )
        self._build_lowrank_correction(h)

    def _build_lowrank_correction(self, h: np.ndarray):
        """Woodbury factors for the endpoint/parameter dual columns.

        The initial-value, terminal-value and parameter columns of the
        constraint Jacobian produce a rank-(2nx+np) term
        ``C Hc^-1 C^T`` in the dual operator whose magnitude scales with
        the inverse curvature weights; handling it exactly keeps the
        Krylov counts insensitive to the adaptive curvature scalars.
        """
        nlp, lin = self.nlp, self.lin
        nn, nx, np_ = nlp.nn, nlp.nx, nlp.np_
        mc = 2 * nx + np_
        C = np.zeros((nlp.n_dual, mc))
        for cch in range(nx):
            l1 = np.zeros((nx, nn))
            l1[cch] = -1.0
            C[:, cch] = nlp.pack_dual(
                l1, np.zeros((nx, nn)), -np.eye(nx)[cch], lin.Exa[:, cch]
            )
            C[:, nx + cch] = nlp.pack_dual(
                np.zeros((nx, nn)), np.zeros((nx, nn)),
                np.eye(nx)[cch], lin.Exb[:, cch],
            )
        for j in range(np_):
            C[:, 2 * nx + j] = nlp.pack_dual(
                np.zeros((nx, nn)), -lin.Fp[:, :, j].T,
                np.zeros(nx), lin.Ep[:, j],
            )
        hc = h[-mc:]
        Z = np.column_stack([self._precond_base(C[:, j]) for j in range(mc)])
        self._wb_C = C
        self._wb_Z = Z
        self._wb_S = np.diag(hc) + C.T @ Z

    def dual_matvec(self, mu: np.ndarray) -> np.ndarray:
        return self.lin.jdot(self.hinv * self.lin.jtdot(mu))

    def _scaled_matvec(self, eta: np.ndarray) -> np.ndarray:
        return self.row_scale * self.dual_matvec(self.row_scale * eta)

    def _precond_base(self, r: np.ndarray) -> np.ndarray:
        """Approximate inverse of the dual operator's dominant block.

        On the (integration, dynamics) multiplier pair this applies
        ``Jb^-T H_xv Jb^-1`` with ``Jb = [[I, -Bs], [-Fx, I]]`` built from
        the triangular surrogate ``Bs``; quadrature/endpoint multipliers
        pass through unchanged.
        """
        nlp = self.nlp
        w_cc = nlp.grid.cc_weights
        r1, r2, r3, r4 = nlp.unpack_dual(r)
        # a = (I - Bs Fx)^-1 (r1 + Bs r2); b = r2 + Fx a
        a = self.pre.solve(
            (r1 + _bcc_b(w_cc, r2)).reshape(-1)
        ).reshape(nlp.nx, nlp.nn)
        b = r2 + np.einsum("kij,jk->ik", self.lin.Fx, a)
        # weight by the model-Hessian metric (blockwise on dynamics rows)
        a = a * self._hX
        b = np.einsum("kij,jk->ik", self._HtV, b)
        # transpose solve: bb = (I - Bs^T Fx^T)^-1 (b + Bs^T a);
        # aa = a + Fx^T bb
        bb = self.pre.solve_right_transpose(
            (b + _bcc_t_b(w_cc, a)).reshape(-1)
        ).reshape(nlp.nx, nlp.nn)
        aa = a + np.einsum("kji,jk->ik", self.lin.Fx, bb)
        return nlp.pack_dual(aa, bb, r3, r4)

    def _precond(self, r: np.ndarray) -> np.ndarray:
        """Base sweep preconditioner plus the low-rank Woodbury update."""
        y = self._precond_base(r)
        rhs = self._wb_C.T @ y
        return y - self._wb_Z @ np.linalg.solve(self._wb_S, rhs)

    def _scaled_precond(self, r: np.ndarray) -> np.ndarray:
        return self._precond(r / self.row_scale) / self.row_scale

    def solve(self, c, g, lam0, cfg: SqpConfig):
        rhs = self.row_scale * (c - self.lin.jdot(self.hinv * g))
        kcfg = KrylovConfig(
            tol=cfg.krylov_tol,
            max_iter=cfg.krylov_max_iter,
            restart=cfg.krylov_restart,
        )
        op = LinearMap(self.nlp.n_dual, self._scaled_matvec)
        pre = LinearMap(self.nlp.n_dual, self._scaled_precond)
        eta0 = None if lam0 is None else lam0 / self.row_scale
        eta, stats = gmres(op, rhs, precond=pre, cfg=kcfg, x0=eta0)
        lam = self.row_scale * eta
        d = -(self.hinv * (g + self.lin.jtdot(lam)))
        return d, lam, stats


def sqp_solve(
    nlp: DiscreteNlp,
    init: InitialGuess,
    cfg: SqpConfig = SqpConfig(),
) -> tuple[SolutionBundle, SolveReport]:
    """Equality-constrained SQP on the full discretized problem.

    Lagrange-Newton iteration with a Gauss-Newton (diagonal, quadrature
    weighted) model Hessian, matrix-free KKT solves, and an l1-penalty
    backtracking line search.  Convergence requires both the feasibility
    and the stationarity residual to pass their tolerances.

    Returns a non-converged report (not an exception) when the iteration
    cap is reached; raises :class:`LineSearchStallError` if the merit
    function cannot be reduced.
    """
    t0 = time.perf_counter()
    nn, nx = nlp.nn, nlp.nx
    X = np.asarray(init.X, dtype=float).reshape(nx, nn).copy()
    U = np.asarray(init.U, dtype=float).reshape(nlp.nu, nn).copy()
    p = np.asarray(init.p, dtype=float).reshape(nlp.np_).copy()
    report = SolveReport()

    if cfg.presolve:
        # restore dynamics feasibility at the guess controls first; the
        # SQP then travels near the feasible manifold, where multiplier
        # estimates and the merit function behave far better
        try:
            # start from the constant-initial-state profile: for
            # integration-type feasibility its Newton basin is far larger
            # than that of an arbitrary interpolated guess
            X, pres_rep = newton_feasibility(
                nlp, U, X[:, 0],
                NewtonConfig(tol=cfg.presolve_tol), p=p,
            )
            report.kkt_solves += pres_rep.kkt_solves
            report.total_krylov_iterations += (
                pres_rep.total_krylov_iterations
            )
            report.history.append(
                {
                    "presolve_newton_iterations": pres_rep.sqp_iterations,
                    "presolve_feasibility": pres_rep.feasibility_residual,
                }
            )
        except NewtonDivergenceError:
            X = np.asarray(init.X, dtype=float).reshape(nx, nn).copy()
            report.history.append({"presolve_diverged": True})

    V = nlp.scaled_dynamics(X, U, p)
    xa = X[:, 0].copy()
    xb = X[:, -1].copy()
    z = nlp.pack(X, U, V, xa, xb, p)
    lam = np.zeros(nlp.n_dual)
    mu = 1.0
    W = _metric_weights(nlp)
    blocks = _block_slices(nlp)
    gammas = {"controls": cfg.gamma, "params": cfg.gamma, "other": cfg.gamma}
    prev_step = None
    prev_lgrad = None

    def model_hessian() -> np.ndarray:
        h = W.copy()
        h[blocks["controls"]] *= gammas["controls"]
        h[blocks["params"]] *= gammas["params"]
        for sl in blocks["other"]:
            h[sl] *= gammas["other"]
        return h

    def bb_update(step, ygrad):
        # per-block spectral (Barzilai-Borwein) curvature estimates for
        # the diagonal Lagrangian-Hessian model; damped to one decade per
        # iteration so a single bad secant cannot destabilize the model
        lo, hi = cfg.gamma_bounds
        for name in ("controls", "params", "other"):
            sls = blocks[name] if name == "other" else [blocks[name]]
            if not isinstance(sls, list):
                sls = [sls]
            sy = sum(float(ygrad[sl] @ step[sl]) for sl in sls)
            ss = sum(float(step[sl] @ (W[sl] * step[sl])) for sl in sls)
            if ss > 0.0 and sy > 1e-14 * ss:
                g_old = gammas[name]
                g_new = min(max(sy / ss, 0.1 * g_old), 10.0 * g_old)
                gammas[name] = min(max(g_new, lo), hi)

    prev_alpha = 1.0

    for it in range(cfg.max_iter):
        c = nlp.constraints(z)
        g = nlp.objective_gradient(z)
        lin = nlp.linearize(z)
        lgrad = g + lin.jtdot(lam)
        feas = float(np.abs(c).max())
        opt = float(np.abs(lgrad).max())
        report.feasibility_residual = feas
        report.optimality_residual = opt
        if feas <= cfg.feas_tol and opt <= cfg.opt_tol:
            report.converged = True
            break

        # secants from heavily cut steps reflect line-search truncation,
        # not curvature; skip those
        if prev_step is not None and prev_alpha >= 0.25:
            bb_update(prev_step, lgrad - prev_lgrad)

        kkt = _KktSystem(nlp, lin, model_hessian())
        d, lam, stats = kkt.solve(c, g, lam, cfg)
        report.kkt_solves += 1
        report.total_krylov_iterations += stats.iterations

        # l1 merit line search; the penalty tracks the current multiplier
        # scale rather than ratcheting, so one badly solved KKT system
        # cannot poison all later step acceptance
        mu = max(1.5 * float(np.abs(lam).max()), 1.0)
        c_l1 = float(np.abs(c).sum())
        phi0 = nlp.objective(z) + mu * c_l1
        dderiv = float(g @ d) - mu * c_l1
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            z_try = z + alpha * d
            c_try = nlp.constraints(z_try)
            phi_try = nlp.objective(z_try) + mu * float(np.abs(c_try).sum())
            if phi_try <= phi0 + 1e-4 * alpha * min(dderiv, 0.0):
                accepted = True
                break
            alpha *= 0.5
        report.history.append(
            {
                "iter": it,
                "feasibility": feas,
                "optimality": opt,
                "step_norm": float(np.abs(d).max()),
                "alpha": alpha,
                "gamma": dict(gammas),
                "krylov_iterations": stats.iterations,
                "merit": phi0,
            }
        )
        if not accepted:
            report.sqp_iterations = it + 1
            report.wall_time = time.perf_counter() - t0
            raise LineSearchStallError(
                f"merit line search failed after {cfg.max_backtracks} "
                f"backtracks at iteration {it}",
                report,
            )
        # secant pair for the next curvature estimate: gradient of the
        # Lagrangian at fixed (new) multipliers, before and after the step
        prev_step = z_try - z
        prev_lgrad = g + lin.jtdot(lam)
        prev_alpha = alpha
        z = z_try
        report.sqp_iterations = it + 1

    report.wall_time = time.perf_counter() - t0
    X, U, V, xa, xb, p = nlp.unpack(z)
    bundle = SolutionBundle(
        grid=nlp.grid,
        t_nodes=nlp.time_nodes(p),
        X=X.copy(),
        U=U.copy(),
        V=V.copy(),
        x_a=xa.copy(),
        x_b=xb.copy(),
        p=p.copy(),
    )
    return bundle, report


# ---------------------------------------------------------------------------
# independent validation


@dataclass
class ValidationReport:
    """Independent re-propagation diagnostics for a solution bundle."""

    terminal_mismatch: np.ndarray
    max_terminal_mismatch: float
    dynamics_residual: float
    endpoint_violation: float
    trajectory_deviation: float
    ok: bool

    def to_dict(self) -> dict:
        return {
            "terminal_mismatch": [float(v) for v in self.terminal_mismatch],
            "max_terminal_mismatch": float(self.max_terminal_mismatch),
            "dynamics_residual": float(self.dynamics_residual),
            "endpoint_violation": float(self.endpoint_violation),
            "trajectory_deviation": float(self.trajectory_deviation),
            "ok": bool(self.ok),
        }


def validate_solution(
    ocp: OcpDefinition,
    solution: SolutionBundle,
    n_check: int = 200,
    terminal_tol: float = 1e-4,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> ValidationReport:
    """Re-propagate the dynamics with an adaptive RK integrator and compare.

    The control is evaluated from its Chebyshev interpolant; the reported
    numbers are the per-component terminal-state mismatch, the max
    dynamics defect ``|V - f_scaled|`` at the nodes, the endpoint
    constraint violation, and the max deviation from the spectral state
    interpolant at ``n_check`` interior times.  NaNs anywhere mark the
    validation as failed.
    """
    grid = solution.grid
    nlp = DiscreteNlp(ocp, grid)
    p = solution.p
    ta, tb = nlp.horizon(p)

    arrays = [solution.X, solution.U, solution.V, solution.x_a,
              solution.x_b, p]
    finite = all(np.all(np.isfinite(a)) for a in arrays)

    u_modal = [nodal_to_modal(solution.U[c], grid) for c in range(nlp.nu)]
    x_modal = [nodal_to_modal(solution.X[c], grid) for c in range(nlp.nx)]

    def u_of_t(t):
        tau = np.clip(2.0 * (t - ta) / (tb - ta) - 1.0, -1.0, 1.0)
        return np.array([clenshaw_eval(a, tau) for a in u_modal]).reshape(
            nlp.nu, -1
        )

    def rhs(t, y):
        u = u_of_t(t)
        return np.asarray(
            ocp.dynamics(y.reshape(-1, 1), u, np.atleast_1d(t), p)
        ).reshape(-1)

    if finite:
        sol = solve_ivp(
            rhs,
            (ta, tb),
            solution.x_a,
            method="DOP853",
            rtol=rtol,
            atol=atol,
            dense_output=True,
        )
        prop_ok = sol.success
    else:
        prop_ok = False

    if finite and prop_ok:
        terminal = sol.y[:, -1]
        mism = np.abs(terminal - solution.x_b)
        t_check = np.linspace(ta, tb, n_check + 2)[1:-1]
        tau_check = 2.0 * (t_check - ta) / (tb - ta) - 1.0
        x_interp = np.stack([clenshaw_eval(a, tau_check) for a in x_modal])
        dev = float(np.abs(sol.sol(t_check) - x_interp).max())
    else:
        mism = np.full(nlp.nx, np.nan)
        dev = np.nan

    dyn_res = float(
        np.abs(
            solution.V - nlp.scaled_dynamics(solution.X, solution.U, p)
        ).max()
    ) if finite else np.nan
    e_viol = float(
        np.abs(
            np.atleast_1d(
                ocp.endpoint_constraints(
                    solution.x_a, solution.x_b, ta, tb, p
                )
            )
        ).max()
    ) if finite else np.nan

    max_mism = float(np.max(mism)) if np.all(np.isfinite(mism)) else np.inf
    ok = (
        finite
        and prop_ok
        and np.all(np.isfinite(mism))
        and max_mism <= terminal_tol
    )
    return ValidationReport(
        terminal_mismatch=mism,
        max_terminal_mismatch=max_mism,
        dynamics_residual=dyn_res,
        endpoint_violation=e_viol,
        trajectory_deviation=dev,
        ok=bool(ok),
    )
