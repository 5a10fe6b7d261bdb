"""Reverse-mode tape and forward-mode duals over numpy arrays.

Hand-rolled on purpose: the calibration method needs exact reverse-mode
gradients through short unrolled solver loops as a reference, and cheap
forward-mode Jacobians of single solver steps. Both engines are small by
design: float64 only, a fixed primitive set (add, sub, mul, div, tanh, exp,
square, dot, matvec, sum, scale), and eager non-finite checks so a diverging
rollout fails at the offending primitive instead of at the loss.

Elementwise primitives follow numpy broadcasting (the reverse sweep sums
gradients back down to each operand's shape). ``matvec(W, x)`` accepts x as
one vector or as any batch of row vectors, so a single tape evaluation can
carry a whole minibatch.

The module-level ``tanh``/``exp``/``square``/``matvec``/``dot`` helpers
dispatch on operand type (ndarray, Dual, Var), which lets model and solver
code be written once and evaluated under any of the three regimes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, TapeMemoryError


def _value(x):
    return np.asarray(x, dtype=np.float64)


def _check_finite(op, v):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite result in primitive '{op}'")
    return v


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Handle to one tape node. Arithmetic records new nodes on the tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def _mul(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, other)
        return self.tape.mul(self, other)

    __mul__ = _mul
    __rmul__ = _mul

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only record of primitive applications.

    Build the program once; `backward` may then run any number of reverse
    sweeps (each sweep allocates its own adjoint buffers, so per-output
    Jacobian rows reuse the same forward pass). `node_limit` turns runaway
    programs into a clean error instead of memory exhaustion.
    """

    def __init__(self, node_limit=None):
        self.ops = []
        self.parents = []
        self.values = []
        self.aux = []
        self.node_limit = node_limit

    def __len__(self):
        return len(self.ops)

    def _push(self, op, parents, value, aux=None):
        if self.node_limit is not None and len(self.ops) >= self.node_limit:
            raise TapeMemoryError(
                f"tape exceeded its node budget ({self.node_limit}); "
                "shorten the rollout or raise the limit"
            )
        self.ops.append(op)
        self.parents.append(parents)
        self.values.append(_check_finite(op, _value(value)))
        self.aux.append(aux)
        return Var(self, len(self.ops) - 1)

    def _lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands recorded on different tapes")
            return x
        return self.const(x)

    # -- leaves ---------------------------------------------------------

    def input(self, value):
        """Differentiable leaf."""
        return self._push("input", (), value)

    def const(self, value):
        """Non-differentiable leaf."""
        return self._push("const", (), value)

    # -- primitives -----------------------------------------------------

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("add", (a.idx, b.idx), a.value + b.value)

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("sub", (a.idx, b.idx), a.value - b.value)

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("mul", (a.idx, b.idx), a.value * b.value)

    def div(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("div", (a.idx, b.idx), a.value / b.value)

    def scale(self, x, c):
        x = self._lift(x)
        return self._push("scale", (x.idx,), float(c) * x.value, aux=float(c))

    def tanh(self, x):
        x = self._lift(x)
        return self._push("tanh", (x.idx,), np.tanh(x.value))

    def exp(self, x):
        x = self._lift(x)
        return self._push("exp", (x.idx,), np.exp(x.value))

    def square(self, x):
        x = self._lift(x)
        return self._push("square", (x.idx,), np.square(x.value))

    def dot(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim != 1 or b.value.ndim != 1:
            raise ValueError("dot expects two vectors")
        return self._push("dot", (a.idx, b.idx), np.dot(a.value, b.value))

    def matvec(self, w, x):
        """x @ W.T for a 2-d weight W and x of shape (k,) or (..., k)."""
        w, x = self._lift(w), self._lift(x)
        if w.value.ndim != 2:
            raise ValueError("matvec expects a 2-d weight matrix")
        return self._push("matvec", (w.idx, x.idx), x.value @ w.value.T)

    def sum(self, x):
        x = self._lift(x)
        return self._push("sum", (x.idx,), np.sum(x.value))

    # -- reverse sweep ----------------------------------------------------

    def backward(self, out, wrt, cotangent=None):
        """Adjoints of `out` w.r.t. the Vars in `wrt`.

        `out` must be scalar unless an explicit cotangent of out's shape is
        given. Accumulation order is fixed by node index, so repeated sweeps
        are bitwise identical.
        """
        ov = self.values[out.idx]
        if cotangent is None:
            if ov.size != 1:
                raise ValueError("backward needs a scalar output or an explicit cotangent")
            cotangent = np.ones_like(ov)
        cot = _value(cotangent)
        if cot.shape != ov.shape:
            raise ValueError("cotangent shape does not match output shape")

        adj = [None] * len(self.ops)
        adj[out.idx] = cot

        def acc(i, g):
            adj[i] = g if adj[i] is None else adj[i] + g

        for i in range(out.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = self.ops[i]
            ps = self.parents[i]
            if op in ("input", "const"):
                continue
            if op == "add":
                a, b = ps
                acc(a, _unbroadcast(g, self.values[a].shape))
                acc(b, _unbroadcast(g, self.values[b].shape))
            elif op == "sub":
                a, b = ps
                acc(a, _unbroadcast(g, self.values[a].shape))
                acc(b, _unbroadcast(-g, self.values[b].shape))
            elif op == "mul":
                a, b = ps
                acc(a, _unbroadcast(g * self.values[b], self.values[a].shape))
                acc(b, _unbroadcast(g * self.values[a], self.values[b].shape))
            elif op == "div":
                a, b = ps
                bv = self.values[b]
                acc(a, _unbroadcast(g / bv, self.values[a].shape))
                acc(b, _unbroadcast(-g * self.values[a] / (bv * bv), self.values[b].shape))
            elif op == "scale":
                acc(ps[0], self.aux[i] * g)
            elif op == "tanh":
                y = self.values[i]
                acc(ps[0], g * (1.0 - y * y))
            elif op == "exp":
                acc(ps[0], g * self.values[i])
            elif op == "square":
                acc(ps[0], 2.0 * g * self.values[ps[0]])
            elif op == "dot":
                a, b = ps
                acc(a, g * self.values[b])
                acc(b, g * self.values[a])
            elif op == "matvec":
                wi, xi = ps
                wv, xv = self.values[wi], self.values[xi]
                gf = g.reshape(-1, wv.shape[0])
                xf = xv.reshape(-1, wv.shape[1])
                acc(wi, gf.T @ xf)
                acc(xi, g @ wv)
            elif op == "sum":
                acc(ps[0], np.broadcast_to(g, self.values[ps[0]].shape))
            else:
                raise AssertionError(f"no backward rule for '{op}'")

        return [
            adj[v.idx] if adj[v.idx] is not None else np.zeros_like(self.values[v.idx])
            for v in wrt
        ]


class Dual:
    """Forward-mode value carrying a stack of tangent columns.

    `val` has shape (..., d); `tan` has shape (..., d, k) for k simultaneous
    tangent seeds (default: k = d, seeded with the identity).
    """

    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        self.val = _check_finite("dual", _value(val))
        self.tan = _check_finite("dual", _value(tan))
        if self.tan.shape[:-1] != self.val.shape:
            raise ValueError("tangent shape must be val.shape + (k,)")

    @staticmethod
    def seed(u):
        """Seed every state component: tangents = identity per sample."""
        u = _value(u)
        d = u.shape[-1]
        tan = np.zeros(u.shape + (d,))
        idx = np.arange(d)
        tan[..., idx, idx] = 1.0
        return Dual(u, tan)

    def _lift_tan(self, other):
        return np.zeros(np.asarray(other).shape + (self.tan.shape[-1],))

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        return Dual(self.val + other, self.tan)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.tan - other.tan)
        return Dual(self.val - other, self.tan)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.tan * other.val[..., None] + self.val[..., None] * other.tan,
            )
        if isinstance(other, (int, float)):
            return Dual(other * self.val, other * self.tan)
        other = _value(other)
        return Dual(self.val * other, self.tan * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return Dual(val, (self.tan - val[..., None] * other.tan) * inv[..., None])
        if isinstance(other, (int, float)):
            return Dual(self.val / other, self.tan / other)
        other = _value(other)
        return Dual(self.val / other, self.tan / other[..., None])

    def __rtruediv__(self, other):
        val = other / self.val
        return Dual(val, -(val / self.val)[..., None] * self.tan)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __repr__(self):
        return f"Dual(shape={self.val.shape}, seeds={self.tan.shape[-1]})"


# -- type-dispatching helpers; model/solver code is written against these --


def tanh(x):
    if isinstance(x, Var):
        return x.tape.tanh(x)
    if isinstance(x, Dual):
        y = np.tanh(x.val)
        return Dual(y, (1.0 - y * y)[..., None] * x.tan)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Var):
        return x.tape.exp(x)
    if isinstance(x, Dual):
        y = np.exp(x.val)
        return Dual(y, y[..., None] * x.tan)
    return np.exp(x)


def square(x):
    if isinstance(x, Var):
        return x.tape.square(x)
    if isinstance(x, Dual):
        return Dual(np.square(x.val), 2.0 * x.val[..., None] * x.tan)
    return np.square(x)


def matvec(w, x):
    """x @ W.T with W a 2-d matrix (ndarray or Var); x ndarray, Dual, or Var."""
    if isinstance(w, Var):
        return w.tape.matvec(w, x)
    if isinstance(x, Var):
        return x.tape.matvec(w, x)
    if isinstance(x, Dual):
        if isinstance(w, Dual):
            raise TypeError("dual-valued weights are not supported; put weights on a tape")
        w = _value(w)
        return Dual(x.val @ w.T, np.matmul(w, x.tan))
    return _value(x) @ _value(w).T


def dot(a, b):
    if isinstance(a, Var):
        return a.tape.dot(a, b)
    if isinstance(b, Var):
        return b.tape.dot(a, b)
    return np.dot(a, b)


def vsum(x):
    """Sum of all elements."""
    if isinstance(x, Var):
        return x.tape.sum(x)
    return np.sum(x)


@dataclass
class ParamVector:
    """Flat float64 parameter buffer plus named array views.

    `views()` returns reshaped slices of the flat buffer, so in-place
    optimizer updates on `data` are immediately visible to any consumer
    holding the views.
    """

    data: np.ndarray
    layout: tuple  # of (name, shape, offset)

    @classmethod
    def pack(cls, named_arrays):
        layout = []
        chunks = []
        offset = 0
        for name, arr in named_arrays:
            arr = _value(arr)
            layout.append((name, arr.shape, offset))
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data=data, layout=tuple(layout))

    @property
    def size(self):
        return self.data.size

    def views(self):
        out = []
        for _, shape, offset in self.layout:
            n = int(np.prod(shape, dtype=int))
            out.append(self.data[offset : offset + n].reshape(shape))
        return out

    def view(self, name):
        for nm, shape, offset in self.layout:
            if nm == name:
                n = int(np.prod(shape, dtype=int))
                return self.data[offset : offset + n].reshape(shape)
        raise KeyError(name)

    def flatten_like(self, arrays):
        """Pack per-view arrays (e.g. gradients) into one flat vector."""
        if len(arrays) != len(self.layout):
            raise ValueError("array count does not match layout")
        flat = np.empty_like(self.data)
        for (name, shape, offset), arr in zip(self.layout, arrays):
            arr = _value(arr)
            if arr.shape != shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {shape}")
            n = arr.size
            flat[offset : offset + n] = arr.ravel()
        return flat

    def copy(self):
        return ParamVector(data=self.data.copy(), layout=self.layout)


def grad_scalar(program, params, node_limit=None):
    """Gradient of a scalar tape program w.r.t. a ParamVector.

    `program(tape, leaves)` must build and return a scalar Var using only
    tape primitives; `leaves` are input Vars matching `params.views()`.
    """
    tape = Tape(node_limit=node_limit)
    leaves = [tape.input(v) for v in params.views()]
    out = program(tape, leaves)
    grads = tape.backward(out, leaves)
    return params.flatten_like(grads)


def jacobian_params(program, params, node_limit=None):
    """(m, a) Jacobian of a vector-valued tape program w.r.t. a ParamVector.

    One forward build, m reverse sweeps with unit cotangents.
    """
    tape = Tape(node_limit=node_limit)
    leaves = [tape.input(v) for v in params.views()]
    out = program(tape, leaves)
    ov = out.value
    if ov.ndim != 1:
        raise ValueError("jacobian_params expects a vector-valued program")
    rows = []
    for k in range(ov.shape[0]):
        e = np.zeros_like(ov)
        e[k] = 1.0
        rows.append(params.flatten_like(tape.backward(out, leaves, cotangent=e)))
    return np.stack(rows)


def jacobian_input(f, u):
    """(..., m, d) Jacobian of f at u via one forward-mode pass with d seeds."""
    out = f(Dual.seed(u))
    return out.tan
