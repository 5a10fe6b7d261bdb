import numpy as np
import pytest

from hybridcal import ega, models, solvers, training
from hybridcal.errors import TrainingAborted
from hybridcal.solvers import SolverKind


def _l63_dataset(size=120, n=5, h=0.01, substeps=10, seed_state=(1.0, 1.0, 1.0),
                 anchor_stride=1):
    truth = models.lorenz63_true()
    return training.generate_dataset(
        truth, np.asarray(seed_state, dtype=np.float64), 500, size, n, h,
        substeps=substeps, defect=models.lorenz63_defect(), anchor_stride=anchor_stride,
    )


def _hybrid(seed=0):
    return models.HybridSystem(models.lorenz63_core(), models.MlpSubmodel([3, 3, 3, 3], seed=seed))


def _static_config(**kw):
    base = dict(mode="online", jacobian=ega.JacobianMode("static"), n=5, batch=32,
                epochs=2, optimizer="adam", lr=1e-3, seed=0)
    base.update(kw)
    return training.TrainConfig(**base)


def test_generate_dataset_layout():
    ds = _l63_dataset(size=50, n=4)
    assert ds.anchors.shape == (50, 3)
    assert ds.targets.shape == (50, 4, 3)
    assert ds.offline_targets.shape == (50, 3)
    # target j is the state j strides after its anchor
    kind = SolverKind("rk4", 10)
    truth = models.lorenz63_true()
    want = solvers.advance(kind, truth, ds.anchors[7], 1, ds.h)
    assert np.allclose(ds.targets[7, 0], want, atol=1e-14)
    # consecutive anchors are one stride apart at stride 1
    assert np.allclose(ds.anchors[1], ds.targets[0, 0], atol=1e-14)
    # offline targets sample the supplied defect field
    assert np.allclose(ds.offline_targets, models.lorenz63_defect()(ds.anchors), atol=1e-14)


def test_generate_dataset_anchor_stride():
    ds1 = _l63_dataset(size=41, n=3, anchor_stride=1)
    ds2 = _l63_dataset(size=21, n=3, anchor_stride=2)
    # stride-2 anchors are every second stride-1 anchor
    assert np.allclose(ds2.anchors, ds1.anchors[::2], atol=1e-14)
    assert np.allclose(ds2.targets[3], ds1.targets[6], atol=1e-14)
    with pytest.raises(ValueError):
        _l63_dataset(size=10, n=3, anchor_stride=0)


def test_generate_dataset_two_scale_projection():
    p = models.L96Params(n_slow=4, n_fast=2)
    full = models.L96TwoScale(p)
    rng = np.random.default_rng(7)
    z0 = np.concatenate([rng.standard_normal(4) + 0.8, 0.1 * rng.standard_normal(8)])
    ds = training.generate_dataset(full, z0, 50, 30, 3, 0.05, substeps=5)
    assert ds.anchors.shape == (30, 4)
    assert ds.offline_targets.shape == (30, 4)
    # replay the same integration and check the recorded coupling
    kind = SolverKind("rk4", 5)
    z = solvers.advance(kind, full, z0, 50, 0.05)
    traj = solvers.rollout(kind, full, z, 29 + 3, 0.05)
    assert np.allclose(ds.anchors, full.split(traj.states[:30])[0], atol=1e-14)
    assert np.allclose(ds.offline_targets, full.coupling(traj.states[:30]), atol=1e-14)


def test_dataset_validation():
    with pytest.raises(ValueError):
        training.Dataset(anchors=np.zeros((4, 3)), targets=np.zeros((5, 2, 3)), h=0.1)
    with pytest.raises(ValueError):
        training.Dataset(anchors=np.zeros((4, 3)), targets=np.zeros((4, 2, 2)), h=0.1)
    with pytest.raises(ValueError):
        training.Dataset(anchors=np.zeros((4, 3)), targets=np.zeros((4, 2, 3)), h=0.0)
    with pytest.raises(ValueError):
        training.Dataset(anchors=np.zeros((4, 3)), targets=np.zeros((4, 2, 3)), h=0.1,
                         offline_targets=np.zeros((3, 3)))


def test_online_loss_zero_for_perfect_model():
    # targets generated by the same solver the loss rolls out
    ds = _l63_dataset(size=40, n=4, substeps=1)
    truth = models.lorenz63_true()
    loss, resid = training.online_loss(truth, SolverKind("rk4", 1), ds.anchors,
                                       ds.targets, ds.h)
    assert loss < 1e-22
    assert np.abs(resid).max() < 1e-11


def test_online_loss_matches_direct_formula():
    ds = _l63_dataset(size=20, n=3)
    system = _hybrid(0)
    kind = SolverKind("rk4", 1)
    loss, resid = training.online_loss(system, kind, ds.anchors, ds.targets, ds.h)
    traj = solvers.rollout(kind, system, ds.anchors, 3, ds.h)
    want = traj.states[1:] - np.moveaxis(ds.targets, 1, 0)
    assert np.allclose(resid, want, atol=1e-14)
    assert abs(loss - np.sum(want * want) / (20 * 3)) < 1e-12


def test_contraction_matches_horizon_assembly():
    # the backward cotangent recursion equals sum_j w_j A_j for every mode
    ds = _l63_dataset(size=12, n=5)
    kind = SolverKind("rk4", 1)
    for mk in ("static", "exact", "tlm"):
        system = _hybrid(1)
        mode = ega.JacobianMode(mk)
        loss, grad = training._online_grad_ega(system, kind, ds.anchors, ds.targets,
                                               ds.h, mode)
        traj = solvers.rollout(kind, system, ds.anchors, 5, ds.h)
        resid = traj.states[1:] - np.moveaxis(ds.targets, 1, 0)
        w = (2.0 / (12 * 5)) * resid
        terms = ega.horizon_gradients(traj, system, mode)
        want = np.einsum("jbd,jbda->a", w, terms)
        assert np.abs(grad - want).max() < 1e-12, mk


def test_online_exact_gradient_matches_finite_difference():
    ds = _l63_dataset(size=8, n=3)
    system = _hybrid(2)
    kind = SolverKind("rk4", 1)
    grad = training._online_grad_exact(system, kind, ds.anchors, ds.targets, ds.h)
    theta0 = system.submodel.params.data.copy()

    def value(theta):
        system.submodel.params.data[:] = theta
        loss, _ = training.online_loss(system, kind, ds.anchors, ds.targets, ds.h)
        return loss

    eps = 1e-6
    for i in range(0, system.submodel.params.size, 7):
        tp, tm = theta0.copy(), theta0.copy()
        tp[i] += eps
        tm[i] -= eps
        fd = (value(tp) - value(tm)) / (2 * eps)
        assert abs(grad[i] - fd) < 1e-6
    system.submodel.params.data[:] = theta0


def test_gradient_step_descends():
    ds = _l63_dataset(size=32, n=5)
    kind = SolverKind("rk4", 1)
    for mk in ("static", "exact"):
        system = _hybrid(3)
        loss0, grad = training._online_grad_ega(
            system, kind, ds.anchors, ds.targets, ds.h, ega.JacobianMode(mk))
        system.submodel.params.data -= 1e-5 * grad
        loss1, _ = training.online_loss(system, kind, ds.anchors, ds.targets, ds.h)
        assert loss1 < loss0, mk


def test_sgd_and_adam_first_steps():
    params = models.mlp_init([2, 2], seed=0)
    theta0 = params.data.copy()
    grad = np.linspace(-1.0, 1.0, params.size)
    training.Sgd(params, 0.1).step(grad)
    assert np.allclose(params.data, theta0 - 0.1 * grad, atol=1e-15)
    params.data[:] = theta0
    adam = training.Adam(params, lr=0.1, eps=1e-8)
    adam.step(grad)
    want = theta0 - 0.1 * grad / (np.abs(grad) + 1e-8)
    assert np.allclose(params.data, want, atol=1e-12)


def test_train_bitwise_reproducible():
    ds = _l63_dataset()
    runs = []
    for _ in range(2):
        system = _hybrid(4)
        report = training.train(system, ds, _static_config())
        runs.append(report.final_params.data)
    assert np.array_equal(runs[0], runs[1])
    system = _hybrid(4)
    other = training.train(system, ds, _static_config(seed=1))
    assert not np.array_equal(runs[0], other.final_params.data)


def test_train_histories_and_initial_value():
    ds = _l63_dataset()
    system = _hybrid(5)
    kind = SolverKind("rk4", 1)
    n_val = max(1, int(round(0.1 * ds.size)))
    va_anchors = ds.anchors[ds.size - n_val :]
    va_targets = ds.targets[ds.size - n_val :, :5]
    want0, _ = training.online_loss(system, kind, va_anchors, va_targets, ds.h)
    report = training.train(system, ds, _static_config(epochs=3))
    assert len(report.train_loss) == 3 and len(report.val_loss) == 3
    assert report.initial_val_loss == want0
    assert report.skipped_batches == 0


def test_train_epochs_zero_is_noop():
    ds = _l63_dataset()
    system = _hybrid(6)
    theta0 = system.submodel.params.data.copy()
    report = training.train(system, ds, _static_config(epochs=0))
    assert report.train_loss == [] and report.val_loss == []
    assert np.array_equal(system.submodel.params.data, theta0)


def test_train_lr_zero_keeps_params():
    ds = _l63_dataset()
    system = _hybrid(7)
    theta0 = system.submodel.params.data.copy()
    report = training.train(system, ds, _static_config(epochs=2, lr=0.0))
    assert np.array_equal(system.submodel.params.data, theta0)
    assert report.val_loss[0] == report.initial_val_loss
    assert report.val_loss[1] == report.initial_val_loss


def test_train_offline_fits_defect():
    ds = _l63_dataset(size=200)
    system = _hybrid(8)
    cfg = training.TrainConfig(mode="offline", n=1, epochs=200, optimizer="adam",
                               lr=0.1, seed=0)
    before = training.offline_loss(system.submodel, ds.anchors, ds.offline_targets)
    report = training.train(system, ds, cfg)
    assert report.train_loss[-1] < 0.2 * before
    assert report.val_loss[-1] < report.val_loss[0]


def test_train_aborts_on_majority_blowup():
    ds = _l63_dataset()
    system = _hybrid(9)
    cfg = _static_config(optimizer="sgd", lr=1e8, epochs=1)
    with pytest.raises(TrainingAborted) as info:
        training.train(system, ds, cfg)
    report = info.value.report
    assert report is not None
    assert report.skipped_batches > 0


def test_train_validation_errors():
    ds = _l63_dataset(size=60, n=3)
    with pytest.raises(ValueError):
        training.train(_hybrid(0), ds, _static_config(n=4))  # horizon too long
    bare = training.Dataset(anchors=ds.anchors, targets=ds.targets, h=ds.h)
    with pytest.raises(ValueError):
        training.train(_hybrid(0), bare,
                       training.TrainConfig(mode="offline", n=3, epochs=1))
    wrong_dim = models.HybridSystem(models.l96_slow(models.L96Params(n_slow=4)),
                                    models.MlpSubmodel([4, 4], seed=0))
    with pytest.raises(ValueError):
        training.train(wrong_dim, ds, _static_config(n=3))
    with pytest.raises(ValueError):
        training.train(_hybrid(0), ds, _static_config(n=3, val_fraction=0.999))


def test_train_config_validation():
    with pytest.raises(ValueError):
        training.TrainConfig(mode="online", jacobian=None)
    with pytest.raises(ValueError):
        training.TrainConfig(mode="offline", optimizer="lbfgs")
    with pytest.raises(ValueError):
        training.TrainConfig(mode="offline", lr=-1.0)
    with pytest.raises(ValueError):
        training.TrainConfig(mode="nonsense")
    with pytest.raises(ValueError):
        training.TrainConfig(mode="offline", reg_weight=-0.1)


def test_fine_tune_rejects_offline_and_resumes():
    ds = _l63_dataset()
    system = _hybrid(10)
    with pytest.raises(ValueError):
        training.fine_tune(system, ds, training.TrainConfig(mode="offline"))
    first = training.train(system, ds, _static_config(epochs=2))
    resumed = models.HybridSystem(
        models.lorenz63_core(),
        models.MlpSubmodel([3, 3, 3, 3], params=first.final_params.copy()),
    )
    follow = training.fine_tune(resumed, ds, _static_config(epochs=1))
    assert follow.initial_val_loss == first.val_loss[-1]


def test_reg_weight_enters_loss_and_gradient():
    ds = _l63_dataset(size=40, n=3)
    lam = 1e-3
    sys_a, sys_b = _hybrid(11), _hybrid(11)
    cfg0 = _static_config(n=3)
    cfg1 = _static_config(n=3, reg_weight=lam)
    loss0, grad0 = training._batch_grad(sys_a, cfg0, ds.h, ds.anchors, ds.targets[:, :3],
                                        None, (0, 0, 0))
    loss1, grad1 = training._batch_grad(sys_b, cfg1, ds.h, ds.anchors, ds.targets[:, :3],
                                        None, (0, 0, 0))
    theta = sys_a.submodel.params.data
    assert abs(loss1 - loss0 - lam * np.dot(theta, theta)) < 1e-12
    assert np.allclose(grad1 - grad0, 2 * lam * theta, atol=1e-12)


def test_online_exact_mode_trains():
    ds = _l63_dataset(size=60, n=3)
    system = _hybrid(12)
    cfg = training.TrainConfig(mode="online_exact", n=3, epochs=1, batch=16,
                               optimizer="adam", lr=1e-3, seed=0)
    report = training.train(system, ds, cfg)
    assert len(report.train_loss) == 1
    assert np.isfinite(report.val_loss[-1])
