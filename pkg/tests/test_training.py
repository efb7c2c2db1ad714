import numpy as np
import pytest

from letac import data, sim
from letac import training as T
from letac.dynamics import MPCDims

from oracles import overfit_floor


def small_model(seed=0, N=5, M=4):
    return T.init_model(MPCDims(N, M, 0.04), seed=seed, hidden=8)


def sample(seed=0, B=3):
    rng = np.random.default_rng(seed)
    obj = sim.material("hard_rubber")
    obs = np.array([sim.observe_clean(obj, F, 1.0, False) for F in rng.uniform(1, 10, B)])
    obs += rng.normal(size=obs.shape) * sim.noise_scale(obj.texture_scale)
    return obs, rng.uniform(35, 44, B), rng.uniform(-1, 1, B), rng.uniform(38, 44, B)


def test_sequence_loss_examples():
    assert T.sequence_loss([3.0, 3.0, 3.0], 3.0) == 0.0
    assert T.sequence_loss([1.0, 2.0], 0.0, 3.0) == 17.0
    p = np.array([1.3, -0.4, 2.2])
    assert T.sequence_loss(2 * p, 0.0) == pytest.approx(4 * T.sequence_loss(p, 0.0), rel=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainingConfig(P_tilde=0.0)
    with pytest.raises(ValueError):
        T.TrainingConfig(lr=-1.0)


def test_grad_check_zero_gradient_point():
    m = small_model()
    obs, p_n, v_n, _ = sample()
    target = T.predict(m, obs[:1], p_n[:1], v_n[:1])[0]
    # a constant trajectory at p_slip needs p_traj == p_slip; use the loss-free case N = 1
    m1 = small_model(N=1)
    p1 = T.predict(m1, obs[:1], p_n[:1], v_n[:1])[0, 0]
    rep = T.grad_check(m1, (obs[:1], p_n[:1], v_n[:1], np.array([p1])))
    assert rep["grad_scale"] < 1e-10
    assert np.isfinite(target).all()


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_random(seed):
    rep = T.grad_check(small_model(seed), sample(seed))
    assert rep["max_rel_error"] <= 1e-3
    assert rep["layer_rel_error"] <= 1e-4


def test_grad_check_richardson_trend():
    # central differences: error against the analytic gradient shrinks with h
    m, s = small_model(7), sample(7)
    e4 = T.grad_check(m, s, h=1e-3)["max_rel_error"]
    e5 = T.grad_check(m, s, h=1e-4)["max_rel_error"]
    assert e5 < e4


@pytest.mark.parametrize("seed", range(3))
def test_overfit_single_reaches_structural_floor(seed):
    # p_1 cannot be steered independently (f_1 only sees v_n), so a far sample
    # bottoms out near overfit_floor; the literal 1% target is in the acceptance suite
    d = MPCDims()
    m = T.init_model(d, seed=seed)
    obs, p_n, v_n, p_slip = sample(seed, B=1)
    l0, l1, _ = T.overfit_single(m, obs, p_n, v_n, p_slip, steps=2000)
    floor = overfit_floor(p_n[0] - p_slip[0], v_n[0], d.dt, d.N)
    assert l1 <= 1.05 * floor
    assert floor / l0 == pytest.approx(0.25 / (d.N + 3.0), rel=0.1)


def test_evaluate_order_invariant():
    m = small_model(2)
    ds = data.add_no_contact_samples(50, np.random.default_rng(0))
    perm = np.random.default_rng(1).permutation(50)
    a = T.evaluate(m, ds)
    b = T.evaluate(m, ds.subset(perm))
    assert a == pytest.approx(b, rel=1e-13)


@pytest.fixture(scope="module")
def tiny_ds():
    ds, _, _ = data.collect([sim.material("rigid"), sim.material("gel")], 6, seed=2)
    return ds


def test_train_deterministic_and_certified(tiny_ds):
    tr, va = tiny_ds.split()
    before = tr.obs.copy()
    cfg = T.TrainingConfig(epochs=3, steps_per_epoch=10, batch_size=16)
    r1 = T.train(tr, small_model(), cfg, va)
    r2 = T.train(tr, small_model(), cfg, va)
    for a, b in zip(r1.model.arrays(), r2.model.arrays()):
        assert np.array_equal(a, b)
    assert np.array_equal(before, tr.obs)          # dataset untouched
    assert all(h["min_eig_H"] > 0 and h["rank_S_bar"] == 5 for h in r1.history)
    assert not np.triu(r1.model.layer.L_f, 1).any()


def test_resume_matches_uninterrupted(tiny_ds):
    tr, va = tiny_ds.split()
    cfg = T.TrainingConfig(epochs=4, steps_per_epoch=8, batch_size=16)
    full = T.train(tr, small_model(), cfg, va)
    half = T.train(tr, small_model(), cfg, va, stop_epoch=2)
    rest = T.train(tr, half.model, cfg, va, optimizer=half.optimizer, start_epoch=2)
    for a, b in zip(full.model.arrays(), rest.model.arrays()):
        assert np.array_equal(a, b)
    assert [h["val_loss"] for h in full.history] == [h["val_loss"] for h in half.history + rest.history]


def test_divergence_detected(tiny_ds):
    tr, _ = tiny_ds.split()
    m = small_model()
    m.encoder.weights[0][0, 0] = np.nan
    with pytest.raises(T.TrainingDiverged):
        T.train(tr, m, T.TrainingConfig(epochs=1, steps_per_epoch=2))


def test_certification_failure(tiny_ds):
    tr, _ = tiny_ds.split()
    m = small_model()
    m.layer.L_f[0, 1] = 0.3
    with pytest.raises(T.CertificationFailed):
        T.train(tr, m, T.TrainingConfig(epochs=1, steps_per_epoch=2))
