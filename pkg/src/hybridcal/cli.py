"""Command line driver: configs in, reproducible files out.

Subcommands cover the full experiment cycle (data generation, offline
and online training, gradient convergence checks, and the evaluation
metrics). Every run is a pure function of its config file, input files,
and seeds, and echoes the fully resolved configuration it used into the
output directory. Exit codes: 0 success, 2 config error, 3 numerical
abort, 4 file schema mismatch.

Heavy imports happen inside the command bodies so that --threads can cap
the BLAS pools before numpy initializes them.
"""

import argparse
import os
import sys

from .config import Resolver, load_config
from .errors import ConfigError, NumericalAbort, SchemaError


def _system_bundle(r):
    """Configured testbed plus the per-system experiment defaults."""
    from . import models

    name = r.get("system", "name", required=True)
    if name == "l63":
        p = models.Lorenz63Params(
            sigma=r.get("system", "sigma", 10.0),
            rho=r.get("system", "rho", 28.0),
            beta=r.get("system", "beta", 8.0 / 3.0),
        )
        return {
            "name": name,
            "truth": models.lorenz63_true(p),
            "core": models.lorenz63_core(p),
            "defect": models.lorenz63_defect(p),
            "dim": 3,
            "layers": [3, 3, 3, 3],
            "h": 0.01,
            "size": 5000,
            "burn_in": 3000,
            "gen_substeps": 10,
            "project": None,
        }
    if name == "l96":
        p = models.L96Params(
            n_slow=r.get("system", "n_slow", 8),
            n_fast=r.get("system", "n_fast", 5),
            forcing=r.get("system", "forcing", 8.0),
            c=r.get("system", "c", 10.0),
            d=r.get("system", "coupling", 1.0),
            gamma=r.get("system", "gamma", 10.0),
        )
        truth = models.L96TwoScale(p)
        return {
            "name": name,
            "truth": truth,
            "core": models.l96_slow(p),
            "defect": None,
            "dim": p.n_slow,
            "layers": [p.n_slow] + [100] * 6 + [p.n_slow],
            "h": 0.1,
            "size": 20000,
            "burn_in": 500,
            "gen_substeps": 20,
            "project": lambda states: truth.split(states)[0],
        }
    raise ConfigError(f"unknown system {name!r} (expected l63 or l96)")


def _initial_state(bundle, seed):
    """Seeded start for the true system (full state for two-scale)."""
    import numpy as np

    rng = np.random.default_rng(seed)
    if bundle["name"] == "l63":
        return np.array([1.0, 1.0, 1.0]) + 0.01 * rng.standard_normal(3)
    p = bundle["truth"].p
    return np.concatenate(
        [
            rng.normal(0.0, 1.0, p.n_slow) + 0.8,
            rng.normal(0.0, 0.1, p.n_slow * p.n_fast),
        ]
    )


def _submodel(r, bundle):
    from . import models

    layers = r.get("submodel", "layers", bundle["layers"])
    seed = r.get("submodel", "seed", 0)
    if len(layers) < 2 or layers[0] != bundle["dim"] or layers[-1] != bundle["dim"]:
        raise ConfigError(
            f"submodel layers {layers} must map dimension "
            f"{bundle['dim']} to itself"
        )
    return models.MlpSubmodel(layers, seed=seed)


def _solver_kind(r):
    from .solvers import SolverKind

    scheme = r.get("solver", "scheme", "rk4")
    substeps = r.get("solver", "substeps", 1)
    if scheme not in ("euler", "rk4"):
        raise ConfigError(f"unknown solver scheme {scheme!r}")
    if substeps < 1:
        raise ConfigError("solver substeps must be >= 1")
    return SolverKind(scheme, substeps)


def _train_config(r, default_mode="online", default_epochs=50):
    from . import ega, training

    mode = r.get("train", "mode", default_mode)
    jacobian = None
    if mode == "online":
        try:
            jacobian = ega.JacobianMode(
                kind=r.get("train", "jacobian", "static"),
                ensemble=r.get("train", "ensemble", 5),
                ensemble_scale=r.get("train", "ensemble_sigma", 1e-3),
                seed=r.get("train", "seed", 0),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
    try:
        return training.TrainConfig(
            mode=mode,
            jacobian=jacobian,
            n=r.get("solver", "n", 10),
            batch=r.get("train", "batch", 32),
            epochs=r.get("train", "epochs", default_epochs),
            optimizer=r.get("train", "optimizer", "adam"),
            lr=r.get("train", "lr", 1e-2),
            reg_weight=r.get("train", "reg_weight", 0.0),
            seed=r.get("train", "seed", 0),
            val_fraction=r.get("train", "val_fraction", 0.1),
            solver=_solver_kind(r),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_params_into(submodel, path):
    from . import fileio

    loaded = fileio.load_params(path)
    if loaded.size != submodel.params.size:
        raise SchemaError(
            f"{path}: {loaded.size} parameters on disk, submodel has "
            f"{submodel.params.size}"
        )
    submodel.params.data[:] = loaded.data
    return submodel


def cmd_gen_data(r, args):
    from . import fileio, training

    b = _system_bundle(r)
    size = r.get("data", "size", b["size"])
    if size < 1:
        raise ConfigError("dataset size must be >= 1")
    burn_in = r.get("data", "burn_in", b["burn_in"])
    substeps = r.get("data", "substeps", b["gen_substeps"])
    anchor_stride = r.get("data", "anchor_stride", 1)
    seed = r.get("data", "seed", 0)
    h = r.get("solver", "h", b["h"])
    n = r.get("solver", "n", 10)
    u0 = _initial_state(b, seed)
    try:
        dataset = training.generate_dataset(
            b["truth"], u0, burn_in, size, n, h, substeps=substeps,
            defect=b["defect"], anchor_stride=anchor_stride,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    meta = {
        "system": b["name"],
        "seed": seed,
        "size": size,
        "n": n,
        "h": h,
        "burn_in": burn_in,
        "substeps": substeps,
        "anchor_stride": anchor_stride,
    }
    path = os.path.join(args.out, "dataset.bin")
    fileio.save_dataset(path, dataset, meta)
    print(f"wrote {path}: {size} anchors x {n} targets at h={h}")


def _run_training(r, args, fine_tune):
    from . import fileio, models, training
    from .errors import TrainingAborted

    b = _system_bundle(r)
    ds_path = r.get("data", "path", required=True)
    dataset = fileio.load_dataset(ds_path)
    submodel = _submodel(r, b)
    if fine_tune:
        _load_params_into(submodel, r.get("train", "init_params", required=True))
        config = _train_config(r, default_epochs=2)
        if config.mode == "offline":
            raise ConfigError("fine-tune requires an online mode")
    else:
        config = _train_config(r)
    system = models.HybridSystem(b["core"], submodel)

    params_path = os.path.join(args.out, "params.bin")
    report_path = os.path.join(args.out, "report.json")
    meta = {"system": b["name"], "layers": list(submodel.layer_sizes)}
    try:
        runner = training.fine_tune if fine_tune else training.train
        report = runner(system, dataset, config)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    except TrainingAborted as e:
        if e.report is not None:
            fileio.save_params(params_path, submodel.params, meta)
            fileio.save_report(report_path, e.report, meta={"aborted": True})
        raise
    fileio.save_params(params_path, submodel.params, meta)
    fileio.save_report(report_path, report, meta={"aborted": False})
    last_val = report.val_loss[-1] if report.val_loss else float("nan")
    print(f"wrote {params_path} and {report_path}; final val loss {last_val:.6g}")


def cmd_train(r, args):
    _run_training(r, args, fine_tune=False)


def cmd_fine_tune(r, args):
    _run_training(r, args, fine_tune=True)


def cmd_grad_check(r, args):
    import numpy as np

    from . import ega, fileio, metrics

    b = _system_bundle(r)
    if b["project"] is not None:
        raise ConfigError("grad-check runs on single-scale systems only")
    hs = r.get("metrics", "grad_h_values", list(np.logspace(-1, -4, 7)))
    modes = tuple(r.get("metrics", "grad_modes", ["exact", "static"]))
    for mode in modes:
        if mode not in ega.MODES:
            raise ConfigError(f"unknown gradient mode {mode!r}")
    n = r.get("metrics", "grad_n")
    window = r.get("metrics", "grad_window")
    if n is not None and window is not None:
        raise ConfigError("set either grad_n or grad_window, not both")
    if n is None and window is None:
        n = 10
    kind = _solver_kind(r)
    series = metrics.gradient_convergence(
        b["core"],
        b["truth"],
        r.get("submodel", "layers", b["layers"]),
        hs,
        n=n,
        window=window,
        modes=modes,
        n_seeds=r.get("metrics", "grad_seeds", 10),
        n_anchors=r.get("metrics", "grad_anchors", 100),
        scheme=kind.scheme,
        substeps=kind.substeps,
        loss_level=r.get("metrics", "grad_loss_level", False),
    )
    rows = [(h, mode, eps) for mode in modes for h, eps in series[mode].points]
    fileio.write_csv(os.path.join(args.out, "grad_check.csv"),
                     ["h", "mode", "epsilon"], rows)
    doc = {
        "slopes": {mode: series[mode].fitted_slope for mode in modes},
        "protocol": {"n": n, "window": window, "h_values": [float(h) for h in hs]},
    }
    fileio.save_summary(os.path.join(args.out, "grad_check.json"), doc)
    slopes = "  ".join(f"{m}={series[m].fitted_slope:.3f}" for m in modes)
    print(f"wrote grad_check.csv and grad_check.json; slopes {slopes}")


def _pick_model(r, b, default_model):
    from . import models

    target = r.get("metrics", "model", default_model)
    if target == "true":
        if b["project"] is not None:
            raise ConfigError(
                "the two-scale truth has no analytic Jacobian; pick core or hybrid"
            )
        return target, b["truth"]
    if target == "core":
        return target, b["core"]
    if target == "hybrid":
        submodel = _submodel(r, b)
        _load_params_into(submodel, r.get("train", "params", required=True))
        return target, models.HybridSystem(b["core"], submodel)
    raise ConfigError(f"unknown model {target!r} (expected true, core, or hybrid)")


def cmd_lyapunov(r, args, default_model="true"):
    from . import fileio, metrics

    b = _system_bundle(r)
    target, system = _pick_model(r, b, default_model)
    h = r.get("solver", "h", b["h"])
    kind = _solver_kind(r)
    u0 = _initial_state(b, r.get("data", "seed", 0))
    if b["project"] is not None:
        u0 = u0[: b["dim"]]
    result = metrics.lyapunov_spectrum(
        system,
        u0,
        h=h,
        kind=kind,
        transient=r.get("metrics", "lyap_transient", 10_000),
        steps=r.get("metrics", "lyap_steps", 200_000),
        qr_interval=r.get("metrics", "lyap_qr_interval", 10),
    )
    doc = {
        "model": target,
        "exponents": [float(x) for x in result.exponents],
        "dimension": result.dimension,
        "protocol": {
            "h": h,
            "transient": result.transient_steps,
            "steps": result.total_steps,
            "qr_interval": result.qr_interval,
        },
    }
    fileio.save_summary(os.path.join(args.out, "lyapunov.json"), doc)
    exps = " ".join(f"{x:+.4f}" for x in result.exponents)
    print(f"wrote lyapunov.json; {target}: [{exps}] dimension {result.dimension:.4f}")


def _evaluation_systems(r, b):
    from . import models

    systems = {"core": b["core"]}
    params_path = r.get("train", "params")
    if params_path:
        submodel = _submodel(r, b)
        _load_params_into(submodel, params_path)
        systems["hybrid"] = models.HybridSystem(b["core"], submodel)
    return systems


def _truth_run(r, b):
    """Burned-in truth start plus the generation-stride solver kind."""
    from . import solvers

    substeps = r.get("data", "substeps", b["gen_substeps"])
    burn_in = r.get("data", "burn_in", b["burn_in"])
    h = r.get("solver", "h", b["h"])
    u0 = _initial_state(b, r.get("data", "seed", 0))
    kind = solvers.SolverKind("rk4", substeps)
    z = solvers.advance(kind, b["truth"], u0, burn_in, h)
    return z, kind, h


def cmd_meg(r, args):
    from . import fileio, metrics, solvers

    b = _system_bundle(r)
    systems = _evaluation_systems(r, b)
    lead = r.get("metrics", "meg_lead", 100)
    m = r.get("metrics", "meg_initials", 20)
    spacing = r.get("metrics", "meg_spacing", 50)
    z, truth_kind, h = _truth_run(r, b)
    traj = solvers.rollout(truth_kind, b["truth"], z, m * spacing, h)
    truth_states = traj.states[::spacing][:m]
    project = b["project"]
    initials = project(truth_states) if project else truth_states

    raw = {
        name: metrics.mean_error_growth(
            system, b["truth"], initials, lead, h,
            model_kind=_solver_kind(r), truth_kind=truth_kind,
            truth_initials=truth_states if project else None, project=project,
        )
        for name, system in systems.items()
    }
    shared = metrics.normalized_error_growth(
        systems, b["truth"], initials, lead, h,
        reference="core", model_kind=_solver_kind(r), truth_kind=truth_kind,
        truth_initials=truth_states if project else None, project=project,
    )

    rows = []
    for name, curve in sorted(raw.items()):
        for i in range(lead):
            rows.append((name, i + 1, curve.meg[i], curve.std[i], curve.scaled_std[i]))
    fileio.write_csv(os.path.join(args.out, "meg.csv"),
                     ["model", "lead", "meg", "std", "scaled_std"], rows)
    rows = []
    for name, curve in sorted(shared.items()):
        for i in range(lead):
            rows.append((name, i + 1, curve.meg[i], curve.std[i], curve.scaled_std[i]))
    fileio.write_csv(os.path.join(args.out, "meg_normalized.csv"),
                     ["model", "lead", "error", "std", "scaled_std"], rows)
    doc = {
        "protocol": {"lead": lead, "initials": m, "spacing": spacing, "h": h},
        "models": {
            name: {"kept": curve.kept, "excluded": curve.excluded}
            for name, curve in sorted(raw.items())
        },
        "normalized_final": {
            name: float(curve.meg[-1]) for name, curve in sorted(shared.items())
        },
    }
    fileio.save_summary(os.path.join(args.out, "meg.json"), doc)
    print("wrote meg.csv, meg_normalized.csv, meg.json")


def cmd_pdf(r, args):
    from . import fileio, metrics, solvers

    b = _system_bundle(r)
    systems = _evaluation_systems(r, b)
    steps = r.get("metrics", "pdf_steps", 100_000)
    transient = r.get("metrics", "pdf_transient", 2_000)
    bins = r.get("metrics", "pdf_bins", 100)
    component = r.get("metrics", "pdf_component", 0)
    if not 0 <= component < b["dim"]:
        raise ConfigError(f"pdf_component {component} outside dimension {b['dim']}")
    z, truth_kind, h = _truth_run(r, b)
    project = b["project"]

    traj = solvers.rollout(truth_kind, b["truth"], z, steps, h)
    states = project(traj.states) if project else traj.states
    samples = {"truth": states[transient:, component]}
    start = (project(z) if project else z).copy()
    for name, system in systems.items():
        traj = solvers.rollout(_solver_kind(r), system, start, steps, h)
        samples[name] = traj.states[transient:, component]

    lo = min(float(s.min()) for s in samples.values())
    hi = max(float(s.max()) for s in samples.values())
    rows = []
    for name, sample in sorted(samples.items()):
        edges, density = metrics.histogram_series(sample, bins=bins, lo=lo, hi=hi)
        for i in range(bins):
            rows.append((name, edges[i], edges[i + 1], density[i]))
    fileio.write_csv(os.path.join(args.out, "histogram.csv"),
                     ["model", "bin_lo", "bin_hi", "density"], rows)
    distances = {
        name: metrics.distribution_distance(sample, samples["truth"])
        for name, sample in sorted(samples.items())
        if name != "truth"
    }
    doc = {
        "component": component,
        "distances": distances,
        "protocol": {"steps": steps, "transient": transient, "bins": bins, "h": h},
    }
    fileio.save_summary(os.path.join(args.out, "ks.json"), doc)
    ks = "  ".join(f"{k}={v:.4f}" for k, v in distances.items())
    print(f"wrote histogram.csv and ks.json; KS vs truth: {ks}")


def cmd_evaluate(r, args):
    default_model = "hybrid" if r.get("train", "params") else "core"
    cmd_lyapunov(r, args, default_model=default_model)
    cmd_meg(r, args)
    cmd_pdf(r, args)


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fine-tune": cmd_fine_tune,
    "grad-check": cmd_grad_check,
    "evaluate": cmd_evaluate,
    "lyapunov": cmd_lyapunov,
    "meg": cmd_meg,
    "pdf": cmd_pdf,
}


def _parser():
    parser = argparse.ArgumentParser(
        prog="hybridcal",
        description="Hybrid-model calibration experiments: data, training, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override data, submodel, and train seeds")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS thread pools")
        p.set_defaults(func=func)
    return parser


def _write_echo(r, args):
    from . import fileio

    doc = {"command": args.command, "config": r.echo()}
    fileio.save_summary(os.path.join(args.out, "resolved_config.json"), doc)


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        r = Resolver(load_config(args.config))
        if args.seed is not None:
            r.override("data", "seed", args.seed)
            r.override("submodel", "seed", args.seed)
            r.override("train", "seed", args.seed)
        os.makedirs(args.out, exist_ok=True)
        args.func(r, args)
        _write_echo(r, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        _write_echo(r, args)
        return 3
    return 0
