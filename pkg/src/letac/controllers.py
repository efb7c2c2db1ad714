"""Deployed learned MPC, PD and model-based MPC baselines, and open-loop grasping.

Every controller maps (observation, measurement) to a width reference for
the low-level tracker. Widths in mm, velocities in mm/s.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import layer as lay
from .qp import DenseQP, QPError, solve_box
from .sim import thresholded_area


@dataclass(frozen=True)
class SaturationBounds:
    p_min: float = 0.0
    p_max: float = 70.0
    v_min: float = -15.0
    v_max: float = 15.0
    a_min: float = -100.0
    a_max: float = 100.0

    def __post_init__(self):
        if not (self.p_min < self.p_max and self.v_min < self.v_max and self.a_min < self.a_max):
            raise ValueError("each bound needs min < max")


@dataclass(frozen=True)
class DeploymentConfig:
    K_v: float = 100.0
    K_a: float = 2.0
    K_d: float = 0.02          # closing bias per pixel of marker displacement, mm/s/px
    bounds: SaturationBounds = SaturationBounds()
    period: float = 1.0 / 25.0

    def __post_init__(self):
        if not (self.K_v > 0 and self.K_a > 0):
            raise ValueError("K_v and K_a must be positive")


@dataclass(frozen=True)
class PDConfig:
    c_ref: float = 900.0
    Q_d: float = 2.0
    dt: float = 1.0 / 60.0
    K_P: float = None
    K_D: float = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.K_P is None:
            object.__setattr__(self, "K_P", 1.0 / (4e4 * self.dt))
        if self.K_D is None:
            object.__setattr__(self, "K_D", 1.0 / (3.6e5 * self.dt))
        if not (self.K_P > 0 and self.K_D > 0):
            raise ValueError("gains must be positive")


@dataclass(frozen=True)
class MPCBaselineConfig:
    c_ref: float = 900.0
    Q_d: float = 2.0
    P: float = 5.0
    Q_c: float = 36.0
    N: int = 10
    K_c: float = 36000.0
    Q_v: float = 1.0
    Q_a: float = 1.0
    dt: float = 1.0 / 60.0
    bounds: SaturationBounds = SaturationBounds()

    def __post_init__(self):
        if min(self.P, self.Q_c, self.K_c, self.Q_v, self.Q_a, self.dt) <= 0 or self.N < 1:
            raise ValueError("MPC baseline weights must be positive")


@dataclass
class PlanResult:
    reference: float
    p_traj: np.ndarray
    v_traj: np.ndarray
    a: np.ndarray
    ok: bool = True
    message: str = ""


def _stacked_rows(hz, p_n, v_n, bounds):
    """Horizon-wide bounds on p and v as C a <= b, plus acceleration box."""
    p0 = p_n + hz.dt * v_n * hz.kvec
    C = np.vstack([hz.G, -hz.G, hz.V, -hz.V])
    b = np.concatenate([bounds.p_max - p0, p0 - bounds.p_min,
                        np.full(hz.N, bounds.v_max - v_n), np.full(hz.N, v_n - bounds.v_min)])
    return C, b


def plan_constrained(alpha, beta, p_n, v_n, Q_v, Q_a, hz, v_target, bounds):
    """Solve the condensed tracking QP under saturation bounds over the horizon."""
    H = lay.structured_hessian(alpha, Q_v, Q_a, hz)
    q = lay.structured_linear(alpha, np.array([beta]), np.array([v_n]), Q_v, hz, v_target)[0]
    C, b = _stacked_rows(hz, p_n, v_n, bounds)
    sol = solve_box(DenseQP(H, q, np.full(hz.N, bounds.a_min), np.full(hz.N, bounds.a_max), C, b))
    a = sol.x
    v_traj = v_n + hz.V @ a
    p_traj = p_n + hz.dt * v_n * hz.kvec + hz.G @ a
    return PlanResult(float(p_traj[0]), p_traj, v_traj, a)


def letac_step(model, obs, state, cfg=None):
    """One receding-horizon step of the deployed learned controller.

    ``model`` is a training.Model. Returns a PlanResult whose ``reference``
    is p_{n+1}. Raises QPError if the constrained problem cannot be solved.
    """
    cfg = cfg or DeploymentConfig()
    if model.encoder.out_dim != model.dims.M:
        raise ValueError("encoder output does not match the layer embedding size")
    f = enc.encode(np.asarray(obs, dtype=float), model.encoder)
    L = model.layer
    QA = L.Q_f @ L.A_f
    alpha = float(L.A_f @ QA)
    beta = float(f @ QA)
    hz = lay.horizon(model.dims, L.P)
    v_target = -cfg.K_d * float(obs[1])
    return plan_constrained(alpha, beta, state.p, state.v, cfg.K_v * L.Q_v, cfg.K_a * L.Q_a,
                            hz, v_target, cfg.bounds)


def pd_step(obs, state, cfg=None, prev_c=None, c=None):
    """PD law on contact area; returns (reference, v).

    ``c`` overrides obs[0] (used for the thresholded area); ``prev_c`` None
    means no derivative term on the first call.
    """
    cfg = cfg or PDConfig()
    c = float(obs[0]) if c is None else float(c)
    d = float(obs[1])
    c_dot = 0.0 if prev_c is None else (c - prev_c) / cfg.dt
    v = cfg.K_P * (c - cfg.c_ref - cfg.Q_d * d) + cfg.K_D * c_dot
    return state.p + v * cfg.dt, v


def mpc_baseline_step(obs, state, cfg=None, c=None):
    """Model-based MPC on contact area with the linear model c' = c - K_c v dt.

    The error e = c - c_ref - Q_d d follows exactly the embedding dynamics of
    the learned layer with a one-dimensional state, A_f = -K_c dt and
    Q_f = Q_c, so the same condensed matrices apply.
    """
    cfg = cfg or MPCBaselineConfig()
    c = float(obs[0]) if c is None else float(c)
    e = c - cfg.c_ref - cfg.Q_d * float(obs[1])
    A = -cfg.K_c * cfg.dt
    alpha = cfg.Q_c * A * A
    beta = cfg.Q_c * A * e
    hz = lay.Horizon(cfg.N, cfg.dt, P=cfg.P)
    return plan_constrained(alpha, beta, state.p, state.v, cfg.Q_v, cfg.Q_a, hz, 0.0, cfg.bounds)


def open_loop_step(force, state, latched=None, threshold=10.0, speed=2.5, dt=1.0 / 60.0):
    """Close at constant speed until the force first exceeds the threshold, then hold.

    Returns (reference, latched) where ``latched`` is the held width or None.
    """
    if latched is not None:
        return latched, latched
    if force > threshold:
        return state.p, state.p
    return max(0.0, state.p - speed * dt), None


@dataclass
class Measurement:
    """What a controller may read from the plant each control tick."""
    p: float
    v: float
    F_normal: float


@dataclass
class Controller:
    """Common bookkeeping: integrated reference state, failure flags, solve times."""
    period: float = 1.0 / 60.0
    p: float = 0.0
    v: float = 0.0
    failures: int = 0
    solve_times: list = field(default_factory=list)
    name: str = "controller"

    def reset(self, p0):
        self.p, self.v = float(p0), 0.0
        self.failures = 0
        self.solve_times = []

    def step(self, obs, meas):
        raise NotImplementedError

    def _state(self):
        from .dynamics import GripperState
        return GripperState(self.p, self.v)


@dataclass
class LetacController(Controller):
    model: object = None
    cfg: DeploymentConfig = DeploymentConfig()
    name: str = "letac"

    def __post_init__(self):
        self.period = self.cfg.period

    def step(self, obs, meas):
        t0 = time.perf_counter()
        try:
            plan = letac_step(self.model, obs, self._state(), self.cfg)
            self.p, self.v = plan.reference, float(plan.v_traj[0])
        except QPError:
            # hold the previous reference
            self.failures += 1
            self.v = 0.0
        self.solve_times.append(time.perf_counter() - t0)
        return self.p


@dataclass
class ContactAreaController(Controller):
    """Shared pre-contact behaviour of the PD and MPC baselines."""
    threshold: float = 0.15        # imprint depth below which pixels do not count, mm
    approach_speed: float = 2.5

    def area(self, obs):
        return thresholded_area(obs, self.threshold)

    def approach(self):
        self.v = -self.approach_speed
        self.p = max(0.0, self.p + self.v * self.period)
        return self.p


@dataclass
class PDController(ContactAreaController):
    cfg: PDConfig = PDConfig()
    prev_c: float = None
    width_range: tuple = (0.0, 70.0)   # mechanical stroke of the gripper, mm
    name: str = "pd"

    def __post_init__(self):
        self.period = self.cfg.dt

    def reset(self, p0):
        super().reset(p0)
        self.prev_c = None

    def step(self, obs, meas):
        t0 = time.perf_counter()
        c = self.area(obs)
        if c <= 0:
            self.prev_c = None
            ref = self.approach()
        else:
            ref, self.v = pd_step(obs, self._state(), self.cfg, self.prev_c, c=c)
            # the law itself is unbounded; the stroke is not
            ref = min(max(ref, self.width_range[0]), self.width_range[1])
            self.v = (ref - self.p) / self.period
            self.p = ref
            self.prev_c = c
        self.solve_times.append(time.perf_counter() - t0)
        return ref


@dataclass
class MPCBaselineController(ContactAreaController):
    cfg: MPCBaselineConfig = MPCBaselineConfig()
    name: str = "mpc"

    def __post_init__(self):
        self.period = self.cfg.dt

    def step(self, obs, meas):
        t0 = time.perf_counter()
        c = self.area(obs)
        if c <= 0:
            ref = self.approach()
        else:
            try:
                plan = mpc_baseline_step(obs, self._state(), self.cfg, c=c)
                self.p, self.v = plan.reference, float(plan.v_traj[0])
            except QPError:
                self.failures += 1
                self.v = 0.0
            ref = self.p
        self.solve_times.append(time.perf_counter() - t0)
        return ref


@dataclass
class OpenLoopController(Controller):
    threshold: float = 10.0
    speed: float = 2.5
    latched: float = None
    name: str = "openloop"

    def reset(self, p0):
        super().reset(p0)
        self.latched = None

    def step(self, obs, meas):
        t0 = time.perf_counter()
        ref, self.latched = open_loop_step(meas.F_normal, self._state(), self.latched,
                                           self.threshold, self.speed, self.period)
        if self.latched is not None:
            ref = self.latched
        self.p = ref
        self.solve_times.append(time.perf_counter() - t0)
        return ref


CONTROLLERS = ("letac", "pd", "mpc", "openloop")


def make_controller(name, model=None, deploy=None, pd=None, mpc=None, threshold=0.15):
    if name == "letac":
        if model is None:
            raise ValueError("the learned controller needs a checkpoint")
        return LetacController(model=model, cfg=deploy or DeploymentConfig())
    if name == "pd":
        return PDController(cfg=pd or PDConfig(), threshold=threshold)
    if name == "mpc":
        return MPCBaselineController(cfg=mpc or MPCBaselineConfig(), threshold=threshold)
    if name == "openloop":
        return OpenLoopController()
    raise ValueError(f"unknown controller {name!r}; choose from {CONTROLLERS}")
