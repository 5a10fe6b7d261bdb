"""Testbed dynamical systems, neural sub-models, and their hybrid composition.

State vectors are plain float64 ndarrays; every field accepts a single state
of shape (d,) or a batch of shape (..., d). The chaotic testbed fields are
all of the form  L u + (B1 u) * (B2 u) + c  (linear plus a Hadamard product
of two linear maps), which keeps them expressible in the autodiff primitive
set and makes their state Jacobians closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


@dataclass(frozen=True)
class L96Params:
    n_slow: int = 8
    n_fast: int = 5  # fast variables per slow sector
    forcing: float = 8.0
    c: float = 10.0
    d: float = 1.0
    gamma: float = 10.0

    @property
    def coupling_scale(self):
        return self.d * self.c / self.gamma


class QuadraticField:
    """du/dt = L u + (B1 u) * (B2 u) + c, with closed-form state Jacobian.

    Works on ndarrays, Duals, and tape Vars alike because it only uses
    matvec, mul, and add.
    """

    def __init__(self, lin, b1=None, b2=None, const=None):
        self.lin = np.asarray(lin, dtype=np.float64)
        self.b1 = None if b1 is None else np.asarray(b1, dtype=np.float64)
        self.b2 = None if b2 is None else np.asarray(b2, dtype=np.float64)
        self.const = None if const is None else np.asarray(const, dtype=np.float64)
        self.dim = self.lin.shape[0]

    def __call__(self, u):
        out = ad.matvec(self.lin, u)
        if self.b1 is not None:
            out = out + ad.matvec(self.b1, u) * ad.matvec(self.b2, u)
        if self.const is not None:
            out = out + self.const
        return out

    def jac(self, u):
        """State Jacobian, shape (..., d, d)."""
        u = np.asarray(u, dtype=np.float64)
        j = np.broadcast_to(self.lin, u.shape[:-1] + self.lin.shape).copy()
        if self.b1 is not None:
            p = u @ self.b1.T
            q = u @ self.b2.T
            j += q[..., :, None] * self.b1 + p[..., :, None] * self.b2
        return j


def lorenz63_true(p: Lorenz63Params = Lorenz63Params()) -> QuadraticField:
    lin = np.array([[-p.sigma, p.sigma, 0.0], [p.rho, -1.0, 0.0], [0.0, 0.0, -p.beta]])
    # nonlinear part (0, -u1*u3, u1*u2) = (0, u1, u1) * (0, -u3, u2)
    b1 = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    b2 = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return QuadraticField(lin, b1, b2)


def lorenz63_core(p: Lorenz63Params = Lorenz63Params()) -> QuadraticField:
    """Defective core: the linear -beta*u3 term of the third equation is missing."""
    lin = np.array([[-p.sigma, p.sigma, 0.0], [p.rho, -1.0, 0.0], [0.0, 0.0, 0.0]])
    b1 = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    b2 = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return QuadraticField(lin, b1, b2)


def lorenz63_defect(p: Lorenz63Params = Lorenz63Params()) -> QuadraticField:
    """true - core: the ideal correction a sub-model should learn."""
    lin = np.zeros((3, 3))
    lin[2, 2] = -p.beta
    return QuadraticField(lin)


def _roll_matrix(n, k):
    """(R u)_s = u_{s-k} (cyclic)."""
    return np.roll(np.eye(n), k, axis=0)


def l96_slow(p: L96Params = L96Params()) -> QuadraticField:
    """Uncoupled slow dynamics: the defective core of the two-scale system."""
    s = p.n_slow
    lin = -np.eye(s)
    b1 = -_roll_matrix(s, 1)
    b2 = _roll_matrix(s, 2) - _roll_matrix(s, -1)
    return QuadraticField(lin, b1, b2, const=p.forcing * np.ones(s))


class L96TwoScale:
    """Full two-scale system on the flat state (slow ++ fast rows).

    Layout: z[..., :S] are the slow variables, z[..., S:] is the fast block
    reshaped to (n_fast, S); fast row b, column s couples to slow variable s
    and the fast index wraps cyclically within its own column. Plain numpy
    only; the full system is integrated for data generation, never
    differentiated.
    """

    def __init__(self, p: L96Params = L96Params()):
        self.p = p
        self.dim = p.n_slow * (1 + p.n_fast)

    def split(self, z):
        z = np.asarray(z, dtype=np.float64)
        s = self.p.n_slow
        slow = z[..., :s]
        fast = z[..., s:].reshape(z.shape[:-1] + (self.p.n_fast, s))
        return slow, fast

    def coupling(self, z):
        """R_s = -(d c / gamma) * sum_b y_{b,s}, shape (..., S)."""
        _, fast = self.split(z)
        return -self.p.coupling_scale * fast.sum(axis=-2)

    def __call__(self, z):
        p = self.p
        slow, fast = self.split(z)
        du = (
            -np.roll(slow, 1, axis=-1) * (np.roll(slow, 2, axis=-1) - np.roll(slow, -1, axis=-1))
            - slow
            + p.forcing
            + self.coupling(z)
        )
        dy = (
            -p.c
            * p.gamma
            * np.roll(fast, -1, axis=-2)
            * (np.roll(fast, -2, axis=-2) - np.roll(fast, 1, axis=-2))
            - p.c * fast
            + p.coupling_scale * slow[..., None, :]
        )
        return np.concatenate([du, dy.reshape(z.shape[:-1] + (-1,))], axis=-1)


def mlp_init(layer_sizes, seed):
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    named = []
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        lim = np.sqrt(1.0 / n_in)
        named.append((f"w{i}", rng.uniform(-lim, lim, size=(n_out, n_in))))
        named.append((f"b{i}", rng.uniform(-lim, lim, size=n_out)))
    return ad.ParamVector.pack(named)


class MlpSubmodel:
    """Fully connected tanh network with a linear output layer.

    `apply` is written against the autodiff dispatch helpers, so the same
    code runs on plain arrays (possibly batched), Duals, and tape Vars. For
    the tape case pass the weight leaf Vars explicitly via `weights`.
    """

    def __init__(self, layer_sizes, params=None, seed=0):
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        self.params = mlp_init(self.layer_sizes, seed) if params is None else params
        expected = sum(
            (i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )
        if self.params.size != expected:
            raise ValueError(
                f"parameter vector has {self.params.size} entries, layout needs {expected}"
            )

    @property
    def dim_in(self):
        return self.layer_sizes[0]

    @property
    def dim_out(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def apply(self, x, weights=None):
        wb = self.params.views() if weights is None else weights
        n = self.n_layers
        for i in range(n):
            x = ad.matvec(wb[2 * i], x) + wb[2 * i + 1]
            if i < n - 1:
                x = ad.tanh(x)
        return x

    def __call__(self, x):
        return self.apply(x)

    def tape_program(self, u):
        """Program computing M_theta(u) with the weights as tape leaves."""

        def program(tape, leaves):
            return self.apply(tape.const(u), leaves)

        return program

    def _activations(self, u):
        """Post-activation values per layer, input included, output last."""
        wb = self.params.views()
        acts = [np.asarray(u, dtype=np.float64)]
        x = acts[0]
        n = self.n_layers
        for i in range(n):
            x = x @ wb[2 * i].T + wb[2 * i + 1]
            if i < n - 1:
                x = np.tanh(x)
            acts.append(x)
        return acts

    def jacobian_input(self, u):
        """Closed-form input Jacobian, shape (..., d_out, d_in)."""
        wb = self.params.views()
        acts = self._activations(u)
        n = self.n_layers
        # chain from the input up; hidden activations are tanh outputs
        jac = None
        for i in range(n):
            w = wb[2 * i]
            if i < n - 1:
                a = acts[i + 1]
                layer = (1.0 - a * a)[..., :, None] * w
            else:
                layer = np.broadcast_to(w, acts[0].shape[:-1] + w.shape)
            jac = layer if jac is None else layer @ jac
        return jac

    def vjp_params(self, u, cot):
        """Flat parameter gradient of sum(cot * M_theta(u)), batch summed."""
        acts = self._activations(u)
        n = self.n_layers
        delta = np.asarray(cot, dtype=np.float64)
        grads = [None] * (2 * n)
        for i in range(n - 1, -1, -1):
            a_prev = acts[i]
            df = delta.reshape(-1, delta.shape[-1])
            af = a_prev.reshape(-1, a_prev.shape[-1])
            grads[2 * i] = df.T @ af
            grads[2 * i + 1] = df.sum(axis=0)
            if i > 0:
                delta = delta @ self.params.views()[2 * i]
                a = acts[i]
                delta = delta * (1.0 - a * a)
        return self.params.flatten_like(grads)

    def param_jacobian(self, u):
        """Closed-form parameter Jacobian, shape (..., d_out, a).

        Batched equivalent of d_out reverse sweeps; tested against the tape
        path and finite differences.
        """
        u = np.asarray(u, dtype=np.float64)
        lead = u.shape[:-1]
        acts = self._activations(u)
        n = self.n_layers
        wb = self.params.views()
        out = np.zeros(lead + (self.dim_out, self.params.size))
        for k in range(self.dim_out):
            delta = np.zeros(lead + (self.dim_out,))
            delta[..., k] = 1.0
            for i in range(n - 1, -1, -1):
                a_prev = acts[i]
                _, wshape, woff = self.params.layout[2 * i]
                _, bshape, boff = self.params.layout[2 * i + 1]
                gw = delta[..., :, None] * a_prev[..., None, :]
                out[..., k, woff : woff + int(np.prod(wshape))] = gw.reshape(lead + (-1,))
                out[..., k, boff : boff + int(np.prod(bshape))] = delta
                if i > 0:
                    a = acts[i]
                    delta = (delta @ wb[2 * i]) * (1.0 - a * a)
        return out


@dataclass
class HybridSystem:
    """Defective core plus neural correction: du/dt = F_core(u) + M_theta(u)."""

    core: QuadraticField
    submodel: MlpSubmodel

    def __post_init__(self):
        if self.core.dim != self.submodel.dim_in or self.core.dim != self.submodel.dim_out:
            raise ValueError("core and sub-model dimensions do not match")

    @property
    def dim(self):
        return self.core.dim

    def apply(self, u, weights=None):
        return self.core(u) + self.submodel.apply(u, weights)

    def __call__(self, u):
        return self.apply(u)

    def jac(self, u):
        return self.core.jac(u) + self.submodel.jacobian_input(u)
