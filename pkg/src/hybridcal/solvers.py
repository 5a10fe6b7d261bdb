"""Fixed-stride explicit solvers and their step Jacobians.

`step` is generic over ndarrays (single or batched states), forward-mode
Duals, and tape Vars, because it is written purely against operator
overloads. A SolverKind may take internal substeps: the reported stride
stays h while each step internally advances substeps times by h/substeps,
which is how high-accuracy reference trajectories are produced at a coarse
recording stride.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Dual
from .errors import BlowUpError

BLOWUP_LIMIT = 1e6

_SCHEMES = ("euler", "rk4")


@dataclass(frozen=True)
class SolverKind:
    scheme: str = "rk4"
    substeps: int = 1

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}' (expected one of {_SCHEMES})")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass
class Trajectory:
    """States recorded at the reported stride: states[j] = Psi^j(u0)."""

    states: np.ndarray  # (n+1, d) or (n+1, batch, d)
    h: float
    kind: SolverKind

    @property
    def n(self):
        return self.states.shape[0] - 1

    @property
    def dim(self):
        return self.states.shape[-1]


def _euler_substep(field, u, h):
    return u + h * field(u)


def _rk4_substep(field, u, h):
    k1 = field(u)
    k2 = field(u + (0.5 * h) * k1)
    k3 = field(u + (0.5 * h) * k2)
    k4 = field(u + h * k3)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(kind: SolverKind, field, u, h: float):
    """One reported step of size h (substeps internal refinements)."""
    sub = _euler_substep if kind.scheme == "euler" else _rk4_substep
    hs = h / kind.substeps
    for _ in range(kind.substeps):
        u = sub(field, u, hs)
    return u


def _check_state(u, index, states, h, kind):
    m = np.abs(u).max()
    if not np.isfinite(m) or m > BLOWUP_LIMIT:
        partial = Trajectory(states=states[: index + 1].copy(), h=h, kind=kind)
        raise BlowUpError(
            f"state norm {m:.3g} exceeded {BLOWUP_LIMIT:.0e} at step {index}",
            step_index=index,
            trajectory=partial,
        )


def rollout(kind: SolverKind, field, u0, n: int, h: float) -> Trajectory:
    """n reported steps from u0; raises BlowUpError on divergence.

    u0 may be a single state (d,) or a batch (..., d); the blow-up check
    fires if any batch member crosses the threshold.
    """
    u = np.asarray(u0, dtype=np.float64)
    states = np.empty((n + 1,) + u.shape)
    states[0] = u
    _check_state(u, 0, states, h, kind)
    with np.errstate(all="ignore"):
        for i in range(1, n + 1):
            u = step(kind, field, u, h)
            states[i] = u
            _check_state(u, i, states, h, kind)
    return Trajectory(states=states, h=h, kind=kind)


def advance(kind: SolverKind, field, u0, n: int, h: float):
    """Final state of an n-step rollout without recording intermediates."""
    u = np.asarray(u0, dtype=np.float64)
    with np.errstate(all="ignore"):
        for i in range(n):
            u = step(kind, field, u, h)
            m = np.abs(u).max()
            if not np.isfinite(m) or m > BLOWUP_LIMIT:
                raise BlowUpError(
                    f"state norm {m:.3g} exceeded {BLOWUP_LIMIT:.0e} at step {i + 1}",
                    step_index=i + 1,
                )
    return u


def step_jacobian(kind: SolverKind, field, u, h: float):
    """d Psi / d u of one reported step, shape (..., d, d), via duals."""
    out = step(kind, field, Dual.seed(u), h)
    return out.tan


def tlm_core(kind: SolverKind, core_field, u, h: float):
    """Tangent linear model of the core-only step (sub-model excluded)."""
    return step_jacobian(kind, core_field, u, h)


def extended_tlm(kind: SolverKind, system, u, h: float):
    """Core TLM plus the first-order sub-model response h * dM/du."""
    return tlm_core(kind, system.core, u, h) + h * system.submodel.jacobian_input(u)


def step_with_tangents(kind: SolverKind, field, u, v, h: float):
    """Advance state and tangent stack together using analytic Jacobians.

    `field` must expose jac(u). For rk4 the tangent stages use the Jacobian
    at the state stages, which reproduces the solver-step Jacobian exactly
    (stages enter the scheme linearly); for euler it is I + h J(u). Returns
    (u_next, v_next) with v of shape (..., d, m).
    """
    hs = h / kind.substeps
    for _ in range(kind.substeps):
        if kind.scheme == "euler":
            k1 = field(u)
            l1 = field.jac(u) @ v
            u = u + hs * k1
            v = v + hs * l1
        else:
            k1 = field(u)
            l1 = field.jac(u) @ v
            u2 = u + (0.5 * hs) * k1
            k2 = field(u2)
            l2 = field.jac(u2) @ (v + (0.5 * hs) * l1)
            u3 = u + (0.5 * hs) * k2
            k3 = field(u3)
            l3 = field.jac(u3) @ (v + (0.5 * hs) * l2)
            u4 = u + hs * k3
            k4 = field(u4)
            l4 = field.jac(u4) @ (v + hs * l3)
            u = u + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            v = v + (hs / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
    return u, v
