"""Built-in benchmark problems, registered by name.

Each factory returns a :class:`ProblemBundle`: the continuous problem
definition plus a deterministic initial-guess constructor, so solver runs
(and their iteration counts) are reproducible across grid sizes.  Custom
problems enter through the library API (:class:`~birktraj.ocp.OcpDefinition`
directly); there is no expression parsing.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ocp import InitialGuess, OcpDefinition
from .spectral import ChebGrid

__all__ = ["ProblemBundle", "get_problem", "available_problems"]


@dataclass(frozen=True)
class ProblemBundle:
    name: str
    ocp: OcpDefinition
    initial_guess: Callable[[ChebGrid], InitialGuess]
    description: str


# ---------------------------------------------------------------------------
# low-thrust orbit transfer (minimum time)


def make_orbit_transfer(thrust: float = 0.01) -> ProblemBundle:
    """Planar low-thrust transfer between circular orbits, minimum time.

    State (r, v_r, v_t, theta) in canonical units; control is the thrust
    steering angle; ``thrust`` is the (constant) nondimensional thrust
    acceleration.  Boundary conditions: depart the unit circular orbit,
    arrive at radius 6 with circular-orbit velocity; the final angle is
    free, as is the final time (first parameter).
    """
    a = float(thrust)
    y_target = np.array([6.0, 0.0, 1.0 / np.sqrt(6.0)])

    def dynamics(x, u, t, p):
        r, vr, vt = x[0], x[1], x[2]
        ang = u[0]
        return np.stack(
            [
                vr,
                vt**2 / r - 1.0 / r**2 + a * np.sin(ang),
                -vr * vt / r + a * np.cos(ang),
                vt / r,
            ]
        )

    def dynamics_jacobians(x, u, t, p):
        r, vr, vt = x[0], x[1], x[2]
        ang = u[0]
        m = r.shape[-1]
        z = np.zeros(m)
        fx = np.array(
            [
                [z, z + 1.0, z, z],
                [-(vt**2) / r**2 + 2.0 / r**3, z, 2.0 * vt / r, z],
                [vr * vt / r**2, -vt / r, -vr / r, z],
                [-vt / r**2, z, 1.0 / r, z],
            ]
        )
        fu = np.array([[z], [a * np.cos(ang)], [-a * np.sin(ang)], [z]])
        fp = np.zeros((4, 1, m))
        return fx, fu, fp

    def endpoint_cost(xa, xb, ta, tb, p):
        return p[0]

    def endpoint_cost_gradients(xa, xb, ta, tb, p):
        return np.zeros(4), np.zeros(4), np.array([1.0])

    y_start = np.array([1.0, 0.0, 1.0, 0.0])

    def endpoint_constraints(xa, xb, ta, tb, p):
        return np.concatenate([xa - y_start, xb[:3] - y_target])

    E_xa = np.vstack([np.eye(4), np.zeros((3, 4))])
    E_xb = np.vstack([np.zeros((4, 4)), np.eye(3, 4)])
    E_p = np.zeros((7, 1))

    def endpoint_jacobians(xa, xb, ta, tb, p):
        return E_xa, E_xb, E_p

    ocp = OcpDefinition(
        n_states=4,
        n_controls=1,
        n_params=1,
        dynamics=dynamics,
        dynamics_jacobians=dynamics_jacobians,
        endpoint_cost=endpoint_cost,
        endpoint_cost_gradients=endpoint_cost_gradients,
        endpoint_constraints=endpoint_constraints,
        endpoint_jacobians=endpoint_jacobians,
        t_start=0.0,
        t_final=None,
        n_endpoint=7,
    )

    def initial_guess(grid: ChebGrid) -> InitialGuess:
        # linear interpolation of the constrained state components between
        # their boundary values; zero steering; T = 50
        s = 0.5 * (grid.nodes + 1.0)
        X = np.zeros((4, grid.n_nodes))
        X[0] = 1.0 + (y_target[0] - 1.0) * s
        X[1] = 0.0
        X[2] = 1.0 + (y_target[2] - 1.0) * s
        X[3] = 0.0
        U = np.zeros((1, grid.n_nodes))
        return InitialGuess(X=X, U=U, p=np.array([50.0]))

    return ProblemBundle(
        name="orbit-transfer",
        ocp=ocp,
        initial_guess=initial_guess,
        description=(
            f"minimum-time low-thrust circular orbit raising, thrust "
            f"acceleration {a}"
        ),
    )


# ---------------------------------------------------------------------------
# scalar exponential ODE (pure feasibility)


def make_exp_ode(rate: float = 1.0, x0: float = 1.0) -> ProblemBundle:
    """dx/dt = rate * x on [-1, 1] with x(-1) fixed; no cost, no controls.

    The solve reduces to feasibility; the exact solution
    ``x0 * exp(rate (t+1))`` makes this the spectral-accuracy benchmark.
    """
    r = float(rate)

    def dynamics(x, u, t, p):
        return r * x

    def dynamics_jacobians(x, u, t, p):
        m = x.shape[-1]
        return (
            np.full((1, 1, m), r),
            np.zeros((1, 0, m)),
            np.zeros((1, 0, m)),
        )

    def endpoint_cost(xa, xb, ta, tb, p):
        return 0.0

    def endpoint_cost_gradients(xa, xb, ta, tb, p):
        return np.zeros(1), np.zeros(1), np.zeros(0)

    def endpoint_constraints(xa, xb, ta, tb, p):
        return np.array([xa[0] - x0])

    def endpoint_jacobians(xa, xb, ta, tb, p):
        return (
            np.array([[1.0]]),
            np.array([[0.0]]),
            np.zeros((1, 0)),
        )

    ocp = OcpDefinition(
        n_states=1,
        n_controls=0,
        n_params=0,
        dynamics=dynamics,
        dynamics_jacobians=dynamics_jacobians,
        endpoint_cost=endpoint_cost,
        endpoint_cost_gradients=endpoint_cost_gradients,
        endpoint_constraints=endpoint_constraints,
        endpoint_jacobians=endpoint_jacobians,
        t_start=-1.0,
        t_final=1.0,
        n_endpoint=1,
    )

    def initial_guess(grid: ChebGrid) -> InitialGuess:
        X = np.full((1, grid.n_nodes), x0)
        return InitialGuess(X=X, U=np.zeros((0, grid.n_nodes)), p=np.zeros(0))

    return ProblemBundle(
        name="exp-ode",
        ocp=ocp,
        initial_guess=initial_guess,
        description=f"scalar linear ODE dx/dt = {r} x, closed-form solution",
    )


# ---------------------------------------------------------------------------
# fixed-time linear-quadratic toy problem


def make_lq_toy(target: float = 1.0) -> ProblemBundle:
    """Drive dx/dt = u from 0 to ``target`` on [-1, 1] at least energy.

    The control energy is carried by an extra state (dJ/dt = u^2,
    minimized at the right endpoint), so the unique optimum is the
    straight line: constant u = target/2.
    """
    xt = float(target)

    def dynamics(x, u, t, p):
        return np.stack([u[0], u[0] ** 2])

    def dynamics_jacobians(x, u, t, p):
        m = x.shape[-1]
        z = np.zeros(m)
        fx = np.zeros((2, 2, m))
        fu = np.array([[z + 1.0], [2.0 * u[0]]])
        fp = np.zeros((2, 0, m))
        return fx, fu, fp

    def endpoint_cost(xa, xb, ta, tb, p):
        return xb[1]

    def endpoint_cost_gradients(xa, xb, ta, tb, p):
        return np.zeros(2), np.array([0.0, 1.0]), np.zeros(0)

    def endpoint_constraints(xa, xb, ta, tb, p):
        return np.array([xa[0], xa[1], xb[0] - xt])

    def endpoint_jacobians(xa, xb, ta, tb, p):
        E_xa = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        E_xb = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        return E_xa, E_xb, np.zeros((3, 0))

    ocp = OcpDefinition(
        n_states=2,
        n_controls=1,
        n_params=0,
        dynamics=dynamics,
        dynamics_jacobians=dynamics_jacobians,
        endpoint_cost=endpoint_cost,
        endpoint_cost_gradients=endpoint_cost_gradients,
        endpoint_constraints=endpoint_constraints,
        endpoint_jacobians=endpoint_jacobians,
        t_start=-1.0,
        t_final=1.0,
        n_endpoint=3,
    )

    def initial_guess(grid: ChebGrid) -> InitialGuess:
        X = np.zeros((2, grid.n_nodes))
        U = np.zeros((1, grid.n_nodes))
        return InitialGuess(X=X, U=U, p=np.zeros(0))

    return ProblemBundle(
        name="lq-toy",
        ocp=ocp,
        initial_guess=initial_guess,
        description="minimum-energy transfer for dx/dt = u (straight line)",
    )


_REGISTRY = {
    "orbit-transfer": make_orbit_transfer,
    "exp-ode": make_exp_ode,
    "lq-toy": make_lq_toy,
}


def available_problems() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(name: str, **kwargs) -> ProblemBundle:
    """Look up a built-in problem by name; kwargs go to its factory."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown problem {name!r}; available: "
            f"{', '.join(available_problems())}"
        ) from None
    return factory(**kwargs)
