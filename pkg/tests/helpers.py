"""Shared test utilities: finite differences and attractor state samples."""

import numpy as np

from hybridcal import models, solvers
from hybridcal.solvers import SolverKind


def central_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def central_diff_jac(f, x, eps=1e-6):
    """Central-difference Jacobian of vector f at vector x, shape (m, d)."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def l63_attractor_states(count, h=0.01, burn=2000, u0=(1.0, 1.0, 1.0)):
    """Post-transient truth states sampled every stride."""
    truth = models.lorenz63_true()
    kind = SolverKind("rk4", 10)
    u = solvers.advance(kind, truth, np.asarray(u0, dtype=np.float64), burn, h)
    return solvers.rollout(kind, truth, u, count - 1, h).states


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm((a - b).ravel()) / max(np.linalg.norm(b.ravel()), 1e-300))
