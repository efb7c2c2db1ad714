"""Synthetic grasp world: gel contact, Coulomb slip and scripted disturbances.

Units: widths in mm, forces in N, masses in kg, time in s. Cartesian
disturbance accelerations are in m/s^2 and only enter through the tangential
load ``mass * |a|``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import GripperState

C_SAT = 1800.0          # contact-area saturation, pixel units
K_MARKER = 10.0         # marker displacement per newton of transmitted shear, px/N
SLIP_BURST = 40.0       # extra marker displacement while slipping, px
F_DEPTH = 10.0          # force scale of gel imprint depth saturation, N
SLIP_DAMPING = 0.4      # in-hand slip: rate = excess force / damping, N s/mm
SHEAR_RELAX = 1.0       # relaxation time of residual gel shear after slip stops, s
SHEAR_SLIP = 1.0        # slip distance that saturates the residual shear, mm
SLIP_SPEED_SAT = 5.0    # slip speed at which the slip signature is fully developed, mm/s
TRACKER_TAU = 0.03      # low-level position tracker time constant, s
TRACKER_RATE = 15.0     # tracker rate limit, mm/s
FORCE_LIMIT = 20.0      # gripper grasp-force ceiling, N
DROP_SLIP = 10.0        # cumulative slip that counts as a drop, mm
DROP_CONTACT_LOSS = 0.5  # contact-loss duration that counts as a drop, s
GRAVITY = 9.81

# Observation noise std per channel. Physical channels (first five) are
# scaled by (0.5 + texture_scale); the trailing channels are material-blind.
OBS_NOISE = np.array([3.0, 0.3, 0.001, 0.001, 0.01, 0.2, 0.2, 0.2])


def noise_scale(texture_scale):
    s = OBS_NOISE.copy()
    s[:5] *= 0.5 + texture_scale
    return s


@dataclass(frozen=True)
class ObjectModel:
    name: str
    width_0: float         # mm
    stiffness: float       # object+gel series stiffness, N/mm
    mu: float              # static friction coefficient
    mass: float = 0.2      # kg
    texture_scale: float = 0.3
    F_c: float = 3.0       # contact-area force scale, N
    depth_cap: float = 0.5  # saturation depth of the gel imprint, mm
    marker_gain: float = 1.0
    load_jitter: float = 0.0  # shifting-mass load noise, m/s^2 (std)

    def __post_init__(self):
        if not (self.stiffness > 0 and self.mu > 0 and 0 < self.width_0 < 70):
            raise ValueError(f"invalid object parameters for {self.name!r}")

    def with_(self, **kw):
        return replace(self, **kw)


# Canonical training materials, stiffest first: (stiffness, mu, F_c, depth_cap, texture)
CANONICAL = {
    "rigid": (6.0, 0.50, 6.0, 1.44, 0.2),
    "hard_rubber": (2.5, 0.55, 3.0, 0.61, 0.4),
    "soft_rubber": (1.0, 0.60, 1.5, 0.35, 0.6),
    "gel": (0.4, 0.70, 0.6, 0.19, 0.8),
}
TRAINING_MATERIALS = tuple(CANONICAL)
BLOCK_WIDTH = 45.0


def material(name, width_0=BLOCK_WIDTH, mass=0.2, **kw):
    k, mu, F_c, depth_cap, tex = CANONICAL[name]
    return ObjectModel(name, width_0, k, mu, mass, tex, F_c, depth_cap, **kw)


def material_at(stiffness, name=None, width_0=BLOCK_WIDTH, mass=0.2, **kw):
    """Material with properties log-interpolated between the canonical blocks."""
    table = np.array(list(CANONICAL.values()))
    logk = np.log(table[:, 0])[::-1]
    cols = np.log(table[:, 1:])[::-1]
    x = np.log(stiffness)
    mu, F_c, depth_cap, tex = (float(np.exp(np.interp(x, logk, cols[:, j]))) for j in range(4))
    if name is None:
        name = f"k{stiffness:.3g}"
    return ObjectModel(name, width_0, float(stiffness), mu, mass, tex, F_c, depth_cap, **kw)


def egg_like(width_0=42.0, mass=0.06):
    """Extremely soft stress object: the imprint barely responds to force."""
    return ObjectModel("egg", width_0, 0.05, 0.3, mass, 1.0, 0.3, 0.015, marker_gain=0.15)


@dataclass
class WorldState:
    gripper: GripperState
    indentation: float = 0.0
    F_normal: float = 0.0
    F_ext: float = 0.0
    slipping: bool = False
    follower_offset: float = 0.0
    slip_speed: float = 0.0
    slip_total: float = 0.0
    width_shift: float = 0.0   # in-hand loosening, reduces effective object width
    contact_lost: float = 0.0
    shear_memory: float = 0.0  # residual gel shear in [0, 1], grows with slip distance
    dropped: bool = False
    t: float = 0.0


def effective_width(obj, world):
    return obj.width_0 - world.width_shift


def contact(obj, world, p=None):
    """(indentation, F_normal) at width p (defaults to the current width)."""
    if world.dropped:
        return 0.0, 0.0
    p = world.gripper.p if p is None else p
    delta = max(0.0, effective_width(obj, world) - p)
    return delta, obj.stiffness * delta


def is_slipping(obj, F_ext, F_normal):
    return F_ext > obj.mu * F_normal


def slip_width(obj, F_ext):
    """Largest width at which friction still balances F_ext."""
    if F_ext < 0:
        raise ValueError("F_ext must be nonnegative")
    return max(0.0, obj.width_0 - F_ext / (obj.mu * obj.stiffness))


def observe_clean(obj, F_normal, F_ext, slipping):
    """Noise-free observation vector (length 8).

    ``slipping`` may be a bool or a level in [0, 1]; fractional levels give
    the partially relaxed slip signature after a slip has stopped.
    """
    obs = np.zeros(8)
    if F_normal <= 0:
        return obs
    c = C_SAT * (1.0 - np.exp(-F_normal / obj.F_c))
    shear = min(F_ext, obj.mu * F_normal)
    d = obj.marker_gain * K_MARKER * shear
    level = float(slipping)
    if level > 0:
        d += level * obj.marker_gain * SLIP_BURST
        c *= 1.0 - 0.1 * level
    depth_max = obj.depth_cap * (1.0 - np.exp(-F_normal / F_DEPTH))
    obs[0] = c
    obs[1] = d
    obs[2] = 0.5 * depth_max
    obs[3] = depth_max
    obs[4] = obj.texture_scale * c / C_SAT
    return obs


def slip_level(world):
    """Strength in [0, 1] of the slip signature in the tactile image."""
    live = min(1.0, world.slip_speed / SLIP_SPEED_SAT) if world.slipping else 0.0
    return max(live, world.shear_memory)


def observe(obj, world, rng):
    """Tactile observation with additive noise.

    Channels: c, d, depth_mean, depth_max, texture_energy, three noise-only
    channels. Physical channels are clipped at zero after noise.
    """
    obs = observe_clean(obj, world.F_normal, world.F_ext, slip_level(world))
    obs = obs + rng.normal(size=8) * noise_scale(obj.texture_scale)
    obs[:5] = np.maximum(obs[:5], 0.0)
    return obs


def thresholded_area(obs, threshold):
    """Contact area a thresholded depth image would report.

    For a paraboloid imprint of peak depth D over area c, the region deeper
    than ``threshold`` covers c * (1 - threshold / D).
    """
    c, depth_max = obs[0], obs[3]
    if depth_max <= threshold:
        return 0.0
    return float(c * (1.0 - threshold / depth_max))


@dataclass(frozen=True)
class DisturbanceProfile:
    """Scripted end-effector motion reduced to the tangential load it induces.

    ``transport`` moves vertically (load m |g + a|); ``shaking`` and
    ``collision`` move horizontally (load m sqrt(g^2 + a^2)). Gravity is
    ramped in at ``release_time`` (the object is supported before that).
    """
    kind: str = "none"
    peak_velocity: float = 0.0      # m/s
    peak_acceleration: float = 0.0  # m/s^2
    impulse: float = 0.0            # N s (collision)
    duration: float = 0.0           # s
    seed: int = 0
    t_start: float = 9.0
    gravity: float = GRAVITY
    release_time: float = 6.0
    release_ramp: float = 2.0
    loosen_per_impulse: float = 0.0  # mm of in-hand loosening per N s
    impact_delay: float = 1.0
    impact_width: float = 0.03

    def __post_init__(self):
        for name in ("peak_velocity", "peak_acceleration", "impulse", "duration"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def end_time(self):
        return self.t_start + self.duration

    @property
    def impact_time(self):
        return self.t_start + self.impact_delay


def _sine_period(profile):
    # a(t) = A sin(2 pi t / T) has peak speed A T / pi for one leg, A/omega for a sustained shake
    return np.pi * profile.peak_velocity / profile.peak_acceleration


def accel(profile, t):
    """End-effector acceleration (horizontal, vertical) in m/s^2."""
    if profile.kind == "none" or profile.peak_acceleration == 0:
        return 0.0, 0.0
    s = t - profile.t_start
    if s < 0 or s > profile.duration:
        return 0.0, 0.0
    A = profile.peak_acceleration
    if profile.kind == "transport":
        T = _sine_period(profile)
        pause = max(0.0, profile.duration - 2 * T)
        if s <= T:
            return 0.0, A * np.sin(2 * np.pi * s / T)
        if pause + T <= s <= pause + 2 * T:
            return 0.0, -A * np.sin(2 * np.pi * (s - pause - T) / T)
        return 0.0, 0.0
    if profile.kind == "shaking":
        omega = A / profile.peak_velocity
        return A * np.sin(omega * s), 0.0
    if profile.kind == "collision":
        T = 2 * _sine_period(profile)
        if s <= T:
            return A * np.sin(2 * np.pi * s / T), 0.0
        return 0.0, 0.0
    raise ValueError(f"unknown disturbance kind {profile.kind!r}")


@dataclass
class Jitter:
    """Smooth zero-mean unit-variance noise: a seeded sum of sinusoids."""
    seed: int
    n: int = 6
    freqs: np.ndarray = field(init=False)
    phases: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 7])
        self.freqs = rng.uniform(1.5, 6.0, self.n) * 2 * np.pi
        self.phases = rng.uniform(0, 2 * np.pi, self.n)

    def __call__(self, t):
        return float(np.sqrt(2.0 / self.n) * np.sum(np.sin(self.freqs * t + self.phases)))


def support(profile, t):
    """Fraction of gravity carried by the grasp (0 before release, ramps to 1)."""
    if t < profile.release_time:
        return 0.0
    if profile.release_ramp <= 0:
        return 1.0
    return min(1.0, (t - profile.release_time) / profile.release_ramp)


def external_force(obj, profile, t, jitter=None):
    """Tangential load on the grasped object, N."""
    a_h, a_v = accel(profile, t)
    if jitter is not None and obj.load_jitter > 0 and t >= profile.release_time:
        a_h += obj.load_jitter * jitter(t)
    g = profile.gravity * support(profile, t)
    if profile.kind == "transport":
        load = obj.mass * abs(g + a_v)
    else:
        load = obj.mass * np.hypot(g + a_v, a_h)
    if profile.kind == "collision" and profile.impulse > 0:
        t0 = profile.impact_time
        if t0 <= t < t0 + profile.impact_width:
            load += profile.impulse / profile.impact_width
    return float(load)


def track(p, v_prev, p_ref, dt, p_floor=0.0):
    """First-order, rate-limited position tracker; returns (p, v)."""
    v = np.clip((p_ref - p) / TRACKER_TAU, -TRACKER_RATE, TRACKER_RATE)
    p_new = max(p_floor, p + v * dt)
    return p_new, (p_new - p) / dt


def step_world(obj, world, command, profile, t, dt, jitter=None):
    """Advance the world by dt under a width reference ``command`` (mm)."""
    w = replace(world)
    # in-hand loosening from an impact happens once, at its onset
    if profile.kind == "collision" and profile.impulse > 0 and not w.dropped:
        t0 = profile.impact_time
        if t0 <= t < t0 + dt:
            w.width_shift += profile.loosen_per_impulse * profile.impulse

    w_eff = effective_width(obj, w)
    floor = 0.0
    if not w.dropped:
        floor = max(0.0, w_eff - FORCE_LIMIT / obj.stiffness)
    p_cur = w.gripper.p
    p, v = track(p_cur, w.gripper.v, command, dt, p_floor=min(floor, p_cur))
    w.gripper = GripperState(p, v)

    w.indentation, w.F_normal = contact(obj, w)
    w.F_ext = 0.0 if w.dropped else external_force(obj, profile, t + dt, jitter)
    w.slipping = bool((not w.dropped) and is_slipping(obj, w.F_ext, w.F_normal))
    w.slip_speed = (w.F_ext - obj.mu * w.F_normal) / SLIP_DAMPING if w.slipping else 0.0
    w.slip_total += w.slip_speed * dt
    # residual shear builds with slip distance and relaxes once the grip holds
    w.shear_memory = min(1.0, w.shear_memory * np.exp(-dt / SHEAR_RELAX) + w.slip_speed * dt / SHEAR_SLIP)

    held = support(profile, t + dt) > 0
    if not w.dropped and held and w.F_normal <= 0:
        w.contact_lost += dt
    elif w.F_normal > 0:
        w.contact_lost = 0.0
    if not w.dropped and (w.slip_total > DROP_SLIP or w.contact_lost > DROP_CONTACT_LOSS):
        w.dropped = True
        w.F_normal = 0.0
        w.indentation = 0.0
        w.slipping = False
        w.slip_speed = 0.0
        w.shear_memory = 0.0
        w.F_ext = 0.0
    w.t = t + dt
    return w
