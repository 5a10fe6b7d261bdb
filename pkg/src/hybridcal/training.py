"""Dataset generation, objectives, optimizers, and the training loop.

Minibatch members advance together as one vectorized rollout, and every
accumulation over the batch axis has a fixed order, so a given seed gives
bitwise-identical runs. The online loss averages squared residuals over
horizon and batch; its gradient is assembled either by the backward
contraction of the per-horizon solver-gradient estimates (mode "online")
or by one reverse sweep through the unrolled rollout (mode "online_exact").
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ega
from . import solvers
from .errors import BlowUpError, NonFiniteError, TrainingAborted
from .solvers import SolverKind

MODES = ("offline", "online", "online_exact")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class Dataset:
    """Anchor states with their n following states at stride h.

    anchors: (N, d); targets: (N, n, d) with targets[k, j-1] the state
    j strides after anchors[k]. offline_targets, when present, holds the
    ideal sub-model response at each anchor (N, d_out).
    """

    anchors: np.ndarray
    targets: np.ndarray
    h: float
    offline_targets: np.ndarray | None = None

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.anchors.ndim != 2 or self.targets.ndim != 3:
            raise ValueError("anchors must be (N, d) and targets (N, n, d)")
        if self.targets.shape[0] != self.anchors.shape[0]:
            raise ValueError("anchor and target counts differ")
        if self.targets.shape[2] != self.anchors.shape[1]:
            raise ValueError("anchor and target dims differ")
        if not self.h > 0.0:
            raise ValueError("stride h must be positive")
        if self.offline_targets is not None:
            self.offline_targets = np.asarray(self.offline_targets, dtype=np.float64)
            if self.offline_targets.shape[0] != self.anchors.shape[0]:
                raise ValueError("offline target count differs from anchors")

    @property
    def size(self):
        return self.anchors.shape[0]

    @property
    def n(self):
        return self.targets.shape[1]

    @property
    def dim(self):
        return self.anchors.shape[1]


@dataclass
class TrainConfig:
    """Training protocol. jacobian is required for (and only for) mode
    "online"; solver is the rollout scheme used inside the online loss."""

    mode: str = "online"
    jacobian: ega.JacobianMode | None = None
    n: int = 10
    batch: int = 32
    epochs: int = 50
    optimizer: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reg_weight: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    solver: SolverKind = field(default_factory=lambda: SolverKind("rk4", 1))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mode == "online" and self.jacobian is None:
            raise ValueError("mode 'online' needs a JacobianMode")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0.0:
            raise ValueError("learning rate must be >= 0")
        if self.batch < 1 or self.n < 1 or self.epochs < 0:
            raise ValueError("batch and n must be >= 1, epochs >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.reg_weight < 0.0:
            raise ValueError("reg_weight must be >= 0")


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    initial_val_loss: float
    final_params: ad.ParamVector
    skipped_batches: int
    config: TrainConfig


def generate_dataset(system, u0, burn_in, size, n, h, substeps=10, defect=None,
                     anchor_stride=1):
    """Integrate the true system and slice the trajectory into samples.

    Runs RK4 with `substeps` internal steps per stride, discards `burn_in`
    strides, then records `size` anchors spaced `anchor_stride` strides
    apart, each with its n following states at stride h. Decoupling the
    anchor spacing from h keeps the attractor coverage (anchor span in
    time units) fixed when comparing training at different h. Two-scale
    systems (anything exposing coupling/split) are projected to their
    slow variables and the coupling vector at each anchor is recorded as
    the offline target. For single-scale systems an optional `defect`
    field evaluated at the anchors plays that role.
    """
    if anchor_stride < 1:
        raise ValueError("anchor_stride must be >= 1")
    kind = SolverKind("rk4", substeps)
    u0 = np.asarray(u0, dtype=np.float64)
    u = solvers.advance(kind, system, u0, burn_in, h) if burn_in else u0
    traj = solvers.rollout(kind, system, u, (size - 1) * anchor_stride + n, h)
    states = traj.states
    aidx = np.arange(size) * anchor_stride

    if hasattr(system, "coupling"):
        offline = system.coupling(states[aidx])
        states = system.split(states)[0]
    elif defect is not None:
        offline = np.asarray(defect(states[aidx]), dtype=np.float64)
    else:
        offline = None

    anchors = states[aidx]
    idx = aidx[:, None] + np.arange(1, n + 1)[None, :]
    return Dataset(anchors=anchors, targets=states[idx], h=h, offline_targets=offline)


def offline_loss(submodel, anchors, targets, reg_weight=0.0):
    """Mean over the batch of the squared response error, plus l2 term."""
    out = submodel(anchors)
    r = out - np.asarray(targets, dtype=np.float64)
    loss = float(np.sum(r * r) / np.shape(anchors)[0])
    if reg_weight:
        loss += reg_weight * float(np.dot(submodel.params.data, submodel.params.data))
    return loss


def _offline_grad(submodel, anchors, targets, reg_weight):
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    def program(tape, leaves):
        out = submodel.apply(tape.const(anchors), leaves)
        r = out - tape.const(targets)
        loss = ad.vsum(ad.square(r)) * (1.0 / anchors.shape[0])
        if reg_weight:
            for leaf in leaves:
                loss = loss + ad.vsum(ad.square(leaf)) * reg_weight
        return loss

    return ad.grad_scalar(program, submodel.params)


def online_loss(system, kind, anchors, targets, h):
    """Multi-horizon rollout loss and its per-step residuals.

    loss = mean over batch and horizon of the squared state error;
    residuals come back as (n, batch, d) aligned with rollout states
    1..n, ready to be scaled into the loss cotangents w_j.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[-2]
    traj = solvers.rollout(kind, system, anchors, n, h)
    resid = traj.states[1:] - np.moveaxis(targets, -2, 0)
    batch = anchors.shape[0] if anchors.ndim > 1 else 1
    loss = float(np.sum(resid * resid) / (batch * n))
    return loss, resid


def _online_grad_ega(system, kind, anchors, targets, h, mode, rng=None):
    """Loss gradient via backward contraction of the EGA terms.

    Equals sum_j w_j A_j with A_j from horizon_gradients (tested), but
    carries a cotangent row c_j = w_j + c_{j+1} M_j instead of the (d, a)
    matrices: c_n = w_n, grad = h * sum_j c_j G_{j-1}.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[-2]
    traj = solvers.rollout(kind, system, anchors, n, h)
    resid = traj.states[1:] - np.moveaxis(targets, -2, 0)
    batch = anchors.shape[0] if anchors.ndim > 1 else 1
    loss = float(np.sum(resid * resid) / (batch * n))
    w = (2.0 / (batch * n)) * resid

    static = mode.kind == "static"
    ms = None if static else ega.step_matrices(traj, system, mode, rng=rng)
    c = w[n - 1]
    grad = system.submodel.vjp_params(traj.states[n - 1], c)
    for j in range(n - 1, 0, -1):
        c = w[j - 1] + (c if static else (c[..., None, :] @ ms[j - 1])[..., 0, :])
        grad += system.submodel.vjp_params(traj.states[j - 1], c)
    return loss, h * grad


def _online_grad_exact(system, kind, anchors, targets, h, node_limit=None):
    """Loss gradient by one reverse sweep through the unrolled rollout."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[-2]
    tgt = np.moveaxis(targets, -2, 0)
    batch = anchors.shape[0] if anchors.ndim > 1 else 1

    def program(tape, leaves):
        u = tape.const(anchors)
        total = None
        for j in range(n):
            u = solvers.step(kind, lambda x: system.apply(x, leaves), u, h)
            s = ad.vsum(ad.square(u - tape.const(tgt[j])))
            total = s if total is None else total + s
        return total * (1.0 / (batch * n))

    return ad.grad_scalar(program, system.submodel.params, node_limit=node_limit)


class Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grad):
        self.params.data -= self.lr * grad


class Adam:
    """Standard bias-corrected Adam acting on the flat parameter buffer."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        self.params.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(config, params):
    if config.optimizer == "sgd":
        return Sgd(params, config.lr)
    return Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)


def _batch_grad(system, config, h, anchors, targets, offline_targets, rng_key):
    if config.mode == "offline":
        loss = offline_loss(system.submodel, anchors, offline_targets, config.reg_weight)
        grad = _offline_grad(system.submodel, anchors, offline_targets, config.reg_weight)
        return loss, grad
    if config.mode == "online":
        rng = None
        if config.jacobian.kind == "etlm":
            rng = np.random.default_rng((config.jacobian.seed,) + rng_key)
        loss, grad = _online_grad_ega(
            system, config.solver, anchors, targets, h, config.jacobian, rng=rng
        )
    else:
        loss, _ = online_loss(system, config.solver, anchors, targets, h)
        grad = _online_grad_exact(system, config.solver, anchors, targets, h)
    if config.reg_weight:
        theta = system.submodel.params.data
        loss += config.reg_weight * float(np.dot(theta, theta))
        grad = grad + 2.0 * config.reg_weight * theta
    return loss, grad


def _validation_loss(system, config, h, anchors, targets, offline_targets):
    if config.mode == "offline":
        return offline_loss(system.submodel, anchors, offline_targets, config.reg_weight)
    try:
        loss, _ = online_loss(system, config.solver, anchors, targets, h)
    except (BlowUpError, NonFiniteError):
        return float("inf")
    if config.reg_weight:
        theta = system.submodel.params.data
        loss += config.reg_weight * float(np.dot(theta, theta))
    return loss


def train(system, dataset, config):
    """Run the configured optimization and return its report.

    The samples are split train/validation before any shuffling (the
    validation slice is the dataset tail); each epoch visits a fresh
    seed-derived permutation of the training slice in minibatches. A
    batch whose rollout or gradient hits a blow-up is skipped and
    counted; more than half an epoch skipped aborts with diagnostics.
    The submodel parameters are updated in place.
    """
    if config.n > dataset.n:
        raise ValueError(f"config horizon {config.n} exceeds dataset horizon {dataset.n}")
    if config.mode == "offline" and dataset.offline_targets is None:
        raise ValueError("offline training needs a dataset with offline targets")
    if system.submodel.dim_in != dataset.dim:
        raise ValueError("sub-model input dim does not match dataset states")
    size = dataset.size
    n_val = max(1, int(round(config.val_fraction * size)))
    if n_val >= size:
        raise ValueError("dataset too small for the validation split")
    targets = dataset.targets[:, : config.n]
    va = slice(size - n_val, size)
    tr_idx = np.arange(size - n_val)

    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config, system.submodel.params)
    hist_train, hist_val = [], []
    skipped = 0
    # Pre-update value: resuming from saved params reproduces the prior
    # run's last validation loss here exactly.
    initial_val = _validation_loss(
        system,
        config,
        dataset.h,
        dataset.anchors[va],
        targets[va],
        None if dataset.offline_targets is None else dataset.offline_targets[va],
    )

    for epoch in range(config.epochs):
        perm = rng.permutation(tr_idx)
        losses = []
        n_batches = 0
        n_skipped = 0
        for b, start in enumerate(range(0, perm.size, config.batch)):
            sel = perm[start : start + config.batch]
            n_batches += 1
            try:
                loss, grad = _batch_grad(
                    system,
                    config,
                    dataset.h,
                    dataset.anchors[sel],
                    targets[sel],
                    None if dataset.offline_targets is None else dataset.offline_targets[sel],
                    (config.seed, epoch, b),
                )
            except (BlowUpError, NonFiniteError):
                n_skipped += 1
                continue
            opt.step(grad)
            losses.append(loss)
        skipped += n_skipped
        hist_train.append(float(np.mean(losses)) if losses else float("inf"))
        hist_val.append(
            _validation_loss(
                system,
                config,
                dataset.h,
                dataset.anchors[va],
                targets[va],
                None if dataset.offline_targets is None else dataset.offline_targets[va],
            )
        )
        if 2 * n_skipped > n_batches:
            report = TrainReport(
                train_loss=hist_train,
                val_loss=hist_val,
                initial_val_loss=initial_val,
                final_params=system.submodel.params.copy(),
                skipped_batches=skipped,
                config=config,
            )
            raise TrainingAborted(
                f"epoch {epoch}: {n_skipped}/{n_batches} minibatches blew up; "
                "lower the learning rate or shorten the horizon",
                report=report,
            )

    return TrainReport(
        train_loss=hist_train,
        val_loss=hist_val,
        initial_val_loss=initial_val,
        final_params=system.submodel.params.copy(),
        skipped_batches=skipped,
        config=config,
    )


def fine_tune(system, dataset, config):
    """Online training continued from already-fitted weights.

    Same loop as train (default protocol: two epochs); the caller loads
    the offline-trained parameters into the system first.
    """
    if config.mode == "offline":
        raise ValueError("fine_tune requires an online mode")
    return train(system, dataset, config)
