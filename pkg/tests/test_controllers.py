import numpy as np
import pytest

from letac import controllers as C
from letac import encoder as enc
from letac import layer as lay
from letac import training as T
from letac.dynamics import GripperState, MPCDims, step_gripper

from oracles import linear_contact_plant

LOOSE = C.SaturationBounds(-1e9, 1e9, -1e9, 1e9, -1e9, 1e9)


def obs_with(c=0.0, d=0.0):
    o = np.zeros(8)
    o[0], o[1] = c, d
    return o


@pytest.mark.parametrize("c,d,v", [(900.0, 0.0, 0.0), (1000.0, 0.0, 0.15), (900.0, 50.0, -0.15)])
def test_pd_examples(c, d, v):
    ref, vel = C.pd_step(obs_with(c, d), GripperState(30.0, 0.0))
    assert vel == pytest.approx(v, abs=1e-12)
    assert ref == pytest.approx(30.0 + v / 60.0, abs=1e-12)


def test_pd_gains_and_repeatability():
    cfg = C.PDConfig()
    assert cfg.K_P == pytest.approx(1.5e-3) and cfg.K_D == pytest.approx(60 / 3.6e5)
    s = GripperState(20.0, 1.0)
    assert C.pd_step(obs_with(950, 3), s, prev_c=940) == C.pd_step(obs_with(950, 3), s, prev_c=940)
    _, v = C.pd_step(obs_with(950, 0), s, prev_c=940)
    assert v == pytest.approx(cfg.K_P * 50 + cfg.K_D * 10 / cfg.dt)


def test_mpc_baseline_equilibrium():
    plan = C.mpc_baseline_step(obs_with(900.0, 0.0), GripperState(30.0, 0.0))
    assert np.allclose(plan.a, 0.0, atol=1e-12)
    assert plan.reference == pytest.approx(30.0, abs=1e-12)


def test_mpc_baseline_sign():
    plan = C.mpc_baseline_step(obs_with(1000.0, 0.0), GripperState(30.0, 0.0))
    assert plan.v_traj[0] >= 0 and plan.reference >= 30.0
    # one plant step with that velocity moves c toward c_ref
    assert linear_contact_plant(1000.0, plan.v_traj[0], 36000.0, 1 / 60) < 1000.0


@pytest.mark.parametrize("c0,d", [(700.0, 0.0), (1200.0, 0.0), (850.0, 40.0)])
def test_mpc_baseline_closed_loop_linear_plant(c0, d):
    cfg = C.MPCBaselineConfig()
    target = cfg.c_ref + cfg.Q_d * d
    c, s = c0, GripperState(35.0, 0.0)
    t_hit = None
    for n in range(int(3.0 / cfg.dt)):
        plan = C.mpc_baseline_step(obs_with(c, d), s, cfg)
        c = linear_contact_plant(c, s.v, cfg.K_c, cfg.dt)
        s = step_gripper(s, plan.a[0], cfg.dt)
        if abs(c - target) <= 0.02 * abs(c0 - target):
            t_hit = t_hit if t_hit is not None else (n + 1) * cfg.dt
        else:
            t_hit = None
    assert t_hit is not None and t_hit <= 3.0


def test_mpc_baseline_bounds():
    rng = np.random.default_rng(0)
    b = C.SaturationBounds()
    for _ in range(200):
        s = GripperState(rng.uniform(0, 70), rng.uniform(-15, 15))
        plan = C.mpc_baseline_step(obs_with(rng.uniform(0, 3000), rng.uniform(-50, 50)), s)
        assert np.all(plan.p_traj <= b.p_max + 1e-9) and np.all(plan.p_traj >= b.p_min - 1e-9)
        assert np.all(np.abs(plan.v_traj) <= 15 + 1e-9) and np.all(np.abs(plan.a) <= 100 + 1e-9)


def test_open_loop_latch():
    s = GripperState(30.0, 0.0)
    ref, latched = C.open_loop_step(5.0, s)
    assert latched is None and ref == pytest.approx(30.0 - 2.5 / 60)
    ref, latched = C.open_loop_step(10.5, GripperState(24.3, 0.0))
    assert ref == latched == 24.3
    for F in (0.0, 50.0, 3.0):
        assert C.open_loop_step(F, GripperState(10.0, 5.0), latched) == (24.3, 24.3)
    ctrl = C.OpenLoopController()
    ctrl.reset(0.01)
    for _ in range(5):
        assert ctrl.step(None, C.Measurement(ctrl.p, 0.0, 0.0)) >= 0.0
    assert ctrl.p == 0.0


def model_with_embedding(seed=0, f=None, dims=None):
    dims = dims or MPCDims(15, 20, 0.04)
    m = T.init_model(dims, seed=seed, hidden=16)
    if f is not None:
        for W in m.encoder.weights:
            W[:] = 0.0
        for b in m.encoder.biases:
            b[:] = 0.0
        m.encoder.biases[-1][:] = f
    return m


def test_letac_fixed_point_holds():
    m = model_with_embedding(f=np.zeros(20))
    plan = C.letac_step(m, obs_with(0.0, 0.0), GripperState(33.0, 0.0))
    assert np.allclose(plan.a, 0.0, atol=1e-12) and plan.reference == pytest.approx(33.0, abs=1e-12)


def test_letac_reduces_to_training_forward():
    rng = np.random.default_rng(3)
    m = model_with_embedding(seed=3)
    cfg = C.DeploymentConfig(K_v=1.0, K_a=1.0, K_d=0.0, bounds=LOOSE)
    for _ in range(5):
        o = np.abs(rng.normal(size=8)) * [900, 30, 0.2, 0.4, 0.5, 1, 1, 1]
        s = GripperState(rng.uniform(20, 50), rng.uniform(-2, 2))
        plan = C.letac_step(m, o, s, cfg)
        ref = lay.forward(m.layer, m.dims, enc.encode(o, m.encoder), s.p, s.v)
        assert np.allclose(plan.p_traj, ref.p_traj, rtol=1e-10, atol=1e-10)
        assert np.allclose(plan.a, ref.a_star, rtol=1e-7, atol=1e-8)


def test_letac_bounds_random():
    rng = np.random.default_rng(4)
    b = C.SaturationBounds()
    for seed in range(40):
        m = model_with_embedding(f=rng.normal(size=20) * 50)
        s = GripperState(rng.uniform(0, 70), rng.uniform(-15, 15))
        plan = C.letac_step(m, obs_with(0, rng.uniform(-40, 40)), s)
        assert np.all(plan.p_traj <= b.p_max + 1e-9) and np.all(plan.p_traj >= b.p_min - 1e-9)
        assert np.all(plan.v_traj <= b.v_max + 1e-9) and np.all(plan.v_traj >= b.v_min - 1e-9)
        assert np.all(np.abs(plan.a) <= 100 + 1e-9)


def test_letac_dim_mismatch():
    m = model_with_embedding()
    m.encoder = enc.init_encoder(seed=0, M=5)
    with pytest.raises(ValueError):
        C.letac_step(m, obs_with(), GripperState(30.0, 0.0))


def test_make_controller():
    assert C.make_controller("pd").name == "pd"
    with pytest.raises(ValueError):
        C.make_controller("letac")
    with pytest.raises(ValueError):
        C.make_controller("bangbang")
