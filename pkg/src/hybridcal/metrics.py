"""Evaluation quantities for hybrid-model calibration.

Gradient-error convergence sweeps, mean error growth, Lyapunov spectra
with the Kaplan-Yorke dimension, and distribution comparisons. Every
routine here is deterministic for fixed inputs and seeds; functions
return plain dataclasses and arrays, serialization lives elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ega
from . import solvers
from .errors import BlowUpError, NonFiniteError
from .models import HybridSystem, MlpSubmodel
from .solvers import SolverKind


@dataclass
class ConvergenceSeries:
    """(h, epsilon) pairs with their log-log least-squares fit."""

    points: list
    fitted_slope: float
    fitted_intercept: float


@dataclass
class ErrorGrowthCurve:
    """Lead-time error growth normalized by the first-step error.

    meg[i-1] is the ensemble mean at lead i (so meg[0] == 1 by
    construction); std is the raw ensemble standard deviation and
    scaled_std the display convention (std divided by the ensemble
    size). Trajectories with zero first-step error are excluded and
    counted rather than averaged.
    """

    meg: np.ndarray
    std: np.ndarray
    scaled_std: np.ndarray
    kept: int
    excluded: int


@dataclass
class LyapunovResult:
    exponents: np.ndarray
    dimension: float
    transient_steps: int
    qr_interval: int
    total_steps: int


def gradient_error(exact, approx):
    """Mean absolute component difference, (1/a) * l1 norm."""
    exact = np.asarray(exact, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if exact.shape != approx.shape:
        raise ValueError("gradient shapes differ")
    return float(np.abs(exact - approx).mean())


def fit_convergence_order(points):
    """Least-squares slope of log(eps) against log(h)."""
    pts = [(float(h), float(e)) for h, e in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points for a slope fit")
    if any(h <= 0.0 or e <= 0.0 for h, e in pts):
        raise ValueError("log-log fit needs positive h and epsilon")
    lh = np.log([h for h, _ in pts])
    le = np.log([e for _, e in pts])
    slope, intercept = np.polyfit(lh, le, 1)
    return ConvergenceSeries(points=pts, fitted_slope=float(slope), fitted_intercept=float(intercept))


def _anchor_states(truth, u0, n_anchors, n, h, data_substeps, burn_time, burn_h):
    """Post-transient anchor states sampled at stride h from the truth.

    The transient runs at its own stride so small h does not inflate the
    burn-in cost; the anchor trajectory then runs at stride h.
    """
    kind_data = SolverKind("rk4", data_substeps)
    u = solvers.advance(kind_data, truth, np.asarray(u0, dtype=np.float64),
                        int(round(burn_time / burn_h)), burn_h)
    return solvers.rollout(kind_data, truth, u, n_anchors + n, h).states


def gradient_convergence(
    core,
    truth,
    layer_sizes,
    hs,
    *,
    n=None,
    window=None,
    modes=("exact", "static"),
    n_seeds=10,
    n_anchors=100,
    scheme="rk4",
    substeps=1,
    data_substeps=10,
    burn_time=30.0,
    burn_h=0.01,
    u0=(1.0, 1.0, 1.0),
    loss_level=False,
):
    """Gradient-approximation error against the exact solver gradient.

    For each h the truth supplies n_anchors anchor states; for each of
    n_seeds randomly initialized sub-models the error epsilon(h) compares
    the horizon-n estimate against exact d Psi^n / d theta of the same
    solver, averaged over anchors, matrix entries, and seeds. Exactly one
    of n (fixed-horizon regime) and window (fixed t_f - t_0, n rescaled
    per h) must be given. loss_level=True instead compares gradients of
    the multi-horizon rollout loss whose targets are the truth states.

    Returns {mode: ConvergenceSeries}.
    """
    if (n is None) == (window is None):
        raise ValueError("give exactly one of n= and window=")
    hs = [float(h) for h in hs]
    eps = {m: np.zeros(len(hs)) for m in modes}
    kind = SolverKind(scheme, substeps)

    for ih, h in enumerate(hs):
        nh = n if window is None else max(1, int(round(window / h)))
        states = _anchor_states(truth, u0, n_anchors, nh, h, data_substeps, burn_time, burn_h)
        anchors = states[:n_anchors]
        for seed in range(n_seeds):
            system = HybridSystem(core, MlpSubmodel(layer_sizes, seed=seed))
            ref = ega.exact_horizon_jacobians(kind, system, anchors, nh, h)
            traj = solvers.rollout(kind, system, anchors, nh, h)
            if loss_level:
                # residual-weighted contraction of both the exact and the
                # estimated per-horizon solver gradients
                idx = np.arange(n_anchors)[:, None] + np.arange(1, nh + 1)[None, :]
                tgt = np.moveaxis(states[idx], -2, 0)
                resid = traj.states[1:] - tgt
                w = (2.0 / (n_anchors * nh)) * resid
                gex = np.einsum("jbd,jbda->a", w, ref)
                for m in modes:
                    est = ega.horizon_gradients(traj, system, ega.JacobianMode(m))
                    eps[m][ih] += gradient_error(gex, np.einsum("jbd,jbda->a", w, est))
            else:
                for m in modes:
                    est = ega.horizon_gradients(traj, system, ega.JacobianMode(m))[-1]
                    eps[m][ih] += gradient_error(ref[-1], est)
    out = {}
    for m in modes:
        pts = list(zip(hs, eps[m] / n_seeds))
        out[m] = fit_convergence_order(pts)
    return out


def mean_error_growth(model, truth, initials, n, h, model_kind=None, truth_kind=None,
                      truth_initials=None, project=None):
    """Lead-time squared error of model rollouts, first-step normalized.

    Both systems start from the same initial states (the truth's own
    states, so the initial error is exactly zero and the first step's
    error comes from the model defect alone). Trajectories whose
    first-step error is zero would divide by zero; they are excluded
    from the mean and reported in `excluded`.

    When the truth lives in a larger state space (two-scale systems),
    pass its own `truth_initials` and a `project` callable mapping truth
    states onto the model's space.
    """
    model_kind = model_kind or SolverKind("rk4", 1)
    truth_kind = truth_kind or SolverKind("rk4", 10)
    initials = np.atleast_2d(np.asarray(initials, dtype=np.float64))
    t0 = initials if truth_initials is None else np.atleast_2d(
        np.asarray(truth_initials, dtype=np.float64))
    ref = solvers.rollout(truth_kind, truth, t0, n, h).states
    if project is not None:
        ref = project(ref)
    got = solvers.rollout(model_kind, model, initials, n, h).states
    err = np.sum((ref[1:] - got[1:]) ** 2, axis=-1)  # (n, m)
    first = err[0]
    keep = first > 0.0
    excluded = int(np.sum(~keep))
    if not np.any(keep):
        nan = np.full(n, np.nan)
        return ErrorGrowthCurve(meg=nan, std=nan.copy(), scaled_std=nan.copy(),
                                kept=0, excluded=excluded)
    curves = err[:, keep] / first[keep]
    meg = curves.mean(axis=1)
    std = curves.std(axis=1)
    return ErrorGrowthCurve(
        meg=meg,
        std=std,
        scaled_std=std / initials.shape[0],
        kept=int(np.sum(keep)),
        excluded=excluded,
    )


def normalized_error_growth(systems, truth, initials, n, h, *, reference,
                            model_kind=None, truth_kind=None,
                            truth_initials=None, project=None):
    """Ensemble-mean error curves of several models on one shared scale.

    Every model starts exactly at the truth's states; its ensemble-mean
    squared error per lead is divided by the reference model's
    ensemble-mean first-step error, so curves of different models are
    directly comparable (the reference starts at 1 by construction).
    Self-normalizing each trajectory instead (mean_error_growth) makes
    the scale model-dependent: an accurate model divides by a nearly
    vanishing first-step error, so ensemble means are dominated by the
    inverse of its own accuracy and cannot be compared across models.

    `systems` maps name -> system and must contain `reference`. Returns
    {name: ErrorGrowthCurve}; the std fields are per-lead ensemble
    deviations on the shared scale.
    """
    if reference not in systems:
        raise ValueError(f"reference {reference!r} missing from systems")
    model_kind = model_kind or SolverKind("rk4", 1)
    truth_kind = truth_kind or SolverKind("rk4", 10)
    initials = np.atleast_2d(np.asarray(initials, dtype=np.float64))
    m = initials.shape[0]
    t0 = initials if truth_initials is None else np.atleast_2d(
        np.asarray(truth_initials, dtype=np.float64))
    ref_states = solvers.rollout(truth_kind, truth, t0, n, h).states
    if project is not None:
        ref_states = project(ref_states)

    errs = {}
    for name, system in systems.items():
        got = solvers.rollout(model_kind, system, initials, n, h).states
        errs[name] = np.sum((ref_states[1:] - got[1:]) ** 2, axis=-1)  # (n, m)
    unit = errs[reference][0].mean()
    if unit <= 0.0:
        raise ValueError("reference model reproduces the truth at step 1")

    out = {}
    for name, err in errs.items():
        scaled = err / unit
        out[name] = ErrorGrowthCurve(
            meg=scaled.mean(axis=1),
            std=scaled.std(axis=1),
            scaled_std=scaled.std(axis=1) / m,
            kept=m,
            excluded=0,
        )
    return out


def kaplan_yorke(exponents):
    """Attractor dimension from the partial sums of the spectrum.

    Largest j with sum of the top-j exponents nonnegative, plus the
    fractional part from the next exponent; 0 when even the leading
    exponent is negative, d when the full sum stays nonnegative.
    """
    lam = np.sort(np.asarray(exponents, dtype=np.float64))[::-1]
    if lam[0] < 0.0:
        return 0.0
    csum = np.cumsum(lam)
    j = int(np.max(np.nonzero(csum >= 0.0)[0])) + 1
    if j == lam.size:
        return float(lam.size)
    return float(j + csum[j - 1] / abs(lam[j]))


def lyapunov_spectrum(system, u0, *, h=0.01, kind=None, transient=10_000,
                      steps=200_000, qr_interval=10):
    """Full spectrum by tangent propagation with periodic QR.

    State and an orthonormal tangent frame advance together (analytic
    Jacobians fused into the solver stages); every qr_interval steps the
    frame is re-orthonormalized and the log diagonal growth accumulated.
    A non-finite frame or state blow-up triggers one retry at half the
    QR interval before giving up.
    """
    kind = kind or SolverKind("rk4", 1)
    u0 = np.asarray(u0, dtype=np.float64)

    def run(interval):
        u = solvers.advance(kind, system, u0, transient, h)
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > solvers.BLOWUP_LIMIT:
            raise BlowUpError("state blew up during the Lyapunov transient")
        d = u.shape[-1]
        q = np.eye(d)
        logs = np.zeros(d)
        nblocks = max(1, steps // interval)
        with np.errstate(all="ignore"):
            for _ in range(nblocks):
                for _ in range(interval):
                    u, q = solvers.step_with_tangents(kind, system, u, q, h)
                if not (np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
                    raise NonFiniteError("tangent frame overflowed between QR steps")
                if np.max(np.abs(u)) > solvers.BLOWUP_LIMIT:
                    raise BlowUpError("state blew up during Lyapunov averaging")
                q, r = np.linalg.qr(q)
                diag = np.diag(r)
                q = q * np.sign(diag)
                logs += np.log(np.abs(diag))
        return logs / (nblocks * interval * h), nblocks * interval

    try:
        lam, total = run(qr_interval)
        used = qr_interval
    except (BlowUpError, NonFiniteError):
        used = max(1, qr_interval // 2)
        lam, total = run(used)

    lam = np.sort(lam)[::-1]
    return LyapunovResult(
        exponents=lam,
        dimension=kaplan_yorke(lam),
        transient_steps=transient,
        qr_interval=used,
        total_steps=total,
    )


def distribution_distance(series_a, series_b):
    """Two-sample Kolmogorov-Smirnov statistic (sup of the CDF gap)."""
    a = np.sort(np.asarray(series_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(series_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("distribution_distance needs nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def histogram_series(samples, bins=100, lo=None, hi=None):
    """Density histogram of a scalar series; returns (edges, density)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if lo is None:
        lo = float(x.min())
    if hi is None:
        hi = float(x.max())
    density, edges = np.histogram(x, bins=bins, range=(lo, hi), density=True)
    return edges, density
