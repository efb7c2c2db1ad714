"""Leader/follower slip-labelling protocol and dataset assembly.

A trial: the follower starts from a secure grasp, the leader applies a
tangential load through an impedance spring, and the follower relaxes its
width at constant speed until the object slips. Every frame of the trial is
labelled with the width at which slip was detected.
"""
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import sim
from .fileio import atomic_write, dumps_json

FPS = 60.0
RELAX_SPEED = 4.5        # mm/s
RECOIL_THRESHOLD = 5.0   # mm/s
POST_SLIP = 0.2          # s
NO_CONTACT_WIDTH = 30.0
NO_CONTACT_TARGET = 28.5


class DegenerateTrial(ValueError):
    """The object slipped at the initial grip; the trial carries no label."""


@dataclass
class CollectionConfig:
    impedance_stiffness: float = 0.15   # N/mm
    max_dx: float = 35.0
    max_dy: float = 21.0
    grip_force: float = 12.0            # initial secure grip, N
    recoil_damping: float = 0.02        # follower recoil: excess force / damping, N s/mm
    kinetic_ratio: float = 0.8          # kinetic/static friction once slip starts
    width_noise: float = 0.05           # label noise std, mm
    obs_noise: bool = True

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrialRecord:
    material: str
    trial_id: int
    dx: float
    dy: float
    F_ext: float
    p: np.ndarray           # follower width per frame, mm
    t: np.ndarray
    obs: np.ndarray         # (frames, 8)
    slip_frame: int = None
    p_slip: float = None
    fitted: bool = False

    @property
    def n_frames(self):
        return len(self.p)


def relax_frames(obj, F_ext, cfg):
    """Frame widths and slip-detection index for one relaxation.

    Returns (p, slipping, detect) where detect is None if no slip was seen
    before the follower lost contact.
    """
    k, mu = obj.stiffness, obj.mu
    p0 = obj.width_0 - cfg.grip_force / k
    if sim.is_slipping(obj, F_ext, cfg.grip_force):
        raise DegenerateTrial(f"{obj.name}: F_ext={F_ext:.3f} N exceeds friction at the initial grip")
    step = RELAX_SPEED / FPS
    n_max = int(np.ceil((obj.width_0 - p0) / step)) + 1
    p = p0 + step * np.arange(n_max)
    F_N = k * np.maximum(0.0, obj.width_0 - p)
    started = np.maximum.accumulate(F_ext > mu * F_N)
    # after breakaway the contact is kinetic; before it the follower does not move
    recoil = np.where(started, (F_ext - cfg.kinetic_ratio * mu * F_N) / cfg.recoil_damping, 0.0)
    hits = np.flatnonzero(recoil > RECOIL_THRESHOLD)
    n_post = int(round(POST_SLIP * FPS))
    if hits.size:
        detect = int(hits[0])
        stop = detect + n_post + 1
        p = p0 + step * np.arange(stop)
        F_N = k * np.maximum(0.0, obj.width_0 - p)
        slipping = np.arange(stop) >= detect
        return p, F_N, slipping, detect
    in_contact = F_N > 0
    return p[in_contact], F_N[in_contact], np.zeros(in_contact.sum(), bool), None


def run_trial(obj, impedance_stiffness=None, rng=None, cfg=None, trial_id=0):
    """Simulate one data-collection trial.

    Raises
    ------
    DegenerateTrial
        If the drawn load already exceeds friction at the initial grip.
    """
    cfg = cfg or CollectionConfig()
    if impedance_stiffness is not None:
        cfg = CollectionConfig(**{**cfg.to_dict(), "impedance_stiffness": impedance_stiffness})
    rng = np.random.default_rng() if rng is None else rng
    dx = rng.uniform(-cfg.max_dx, cfg.max_dx)
    dy = rng.uniform(-cfg.max_dy, cfg.max_dy)
    F_ext = cfg.impedance_stiffness * float(np.hypot(dx, dy))
    return trial_from_force(obj, F_ext, rng, cfg, trial_id, dx, dy)


def trial_from_force(obj, F_ext, rng, cfg=None, trial_id=0, dx=0.0, dy=0.0):
    cfg = cfg or CollectionConfig()
    p, F_N, slipping, detect = relax_frames(obj, F_ext, cfg)
    n = len(p)
    obs = np.array([sim.observe_clean(obj, F_N[i], F_ext, slipping[i]) for i in range(n)]).reshape(n, 8)
    if cfg.obs_noise:
        obs = obs + rng.normal(size=obs.shape) * sim.noise_scale(obj.texture_scale)
        obs[:, :5] = np.maximum(obs[:, :5], 0.0)
    p_slip = None
    if detect is not None:
        p_slip = float(p[detect] + cfg.width_noise * rng.normal())
    return TrialRecord(obj.name, trial_id, dx, dy, F_ext, p, np.arange(n) / FPS, obs, detect, p_slip)


@dataclass
class Fit:
    slope: float
    intercept: float
    r2: float
    n: int


def fit_line(F, p_slip):
    F = np.asarray(F, float)
    p_slip = np.asarray(p_slip, float)
    if F.size < 2 or np.ptp(F) == 0:
        raise ValueError("under-determined regression: need two distinct slipping loads")
    res = stats.linregress(F, p_slip)
    return Fit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), int(F.size))


def regression_fill(trials):
    """Label non-slipping trials from a per-material OLS fit of p_slip on F_ext.

    Returns the per-material fits; trials are updated in place.
    """
    fits = {}
    for name in sorted({t.material for t in trials}):
        group = [t for t in trials if t.material == name]
        slipped = [t for t in group if t.slip_frame is not None]
        fit = fit_line([t.F_ext for t in slipped], [t.p_slip for t in slipped])
        for t in group:
            if t.p_slip is None:
                t.p_slip = fit.intercept + fit.slope * t.F_ext
                t.fitted = True
        fits[name] = fit
    return fits


@dataclass
class Dataset:
    """Column-oriented samples; one row per recorded frame."""
    trial_id: np.ndarray
    material: np.ndarray
    frame: np.ndarray
    t: np.ndarray
    obs: np.ndarray
    p_n: np.ndarray
    v_n: np.ndarray
    p_slip: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.p_n)

    def subset(self, mask):
        return Dataset(self.trial_id[mask], self.material[mask], self.frame[mask], self.t[mask],
                       self.obs[mask], self.p_n[mask], self.v_n[mask], self.p_slip[mask], dict(self.meta))

    def split(self):
        """(train, validation) using the validation trial ids in ``meta``."""
        val = np.isin(self.trial_id, np.asarray(self.meta.get("val_trials", []), dtype=int))
        return self.subset(~val), self.subset(val)


def add_no_contact_samples(count, rng, texture_scale=0.5, first_id=-1):
    """Empty-gel frames labelled with a slow closing target."""
    obs = rng.normal(size=(count, 8)) * sim.noise_scale(texture_scale)
    obs[:, :5] = np.maximum(obs[:, :5], 0.0)
    p_slip = NO_CONTACT_TARGET + rng.uniform(-0.5, 0.5, count)
    p_n = np.full(count, NO_CONTACT_WIDTH)
    v_n = (p_slip - p_n) / 3.0
    ids = first_id - np.arange(count)
    return Dataset(ids, np.full(count, "none", dtype=object), np.zeros(count, int), np.zeros(count),
                   obs, p_n, v_n, p_slip)


def assemble_dataset(trials, no_contact=None, rng=None, val_fraction=0.2):
    """Flatten labelled trials into samples and split by trial."""
    if not trials and (no_contact is None or len(no_contact) == 0):
        raise ValueError("nothing to assemble")
    rng = np.random.default_rng() if rng is None else rng
    if any(t.p_slip is None for t in trials):
        raise ValueError("unlabelled trial; run regression_fill first")
    parts = []
    for tr in trials:
        n = tr.n_frames
        parts.append((np.full(n, tr.trial_id), np.full(n, tr.material, dtype=object), np.arange(n),
                      tr.t, tr.obs, tr.p, rng.uniform(-1.0, 1.0, n), np.full(n, tr.p_slip)))
    cols = [np.concatenate(c) for c in zip(*parts)] if parts else None
    if no_contact is not None and len(no_contact):
        nc = (no_contact.trial_id, no_contact.material, no_contact.frame, no_contact.t,
              no_contact.obs, no_contact.p_n, no_contact.v_n, no_contact.p_slip)
        cols = list(nc) if cols is None else [np.concatenate([a, b]) for a, b in zip(cols, nc)]
    ds = Dataset(cols[0].astype(int), cols[1].astype(object), cols[2].astype(int), cols[3].astype(float),
                 cols[4].astype(float), cols[5].astype(float), cols[6].astype(float), cols[7].astype(float))
    ids = np.unique(ds.trial_id)
    n_val = int(round(val_fraction * len(ids)))
    val = np.sort(rng.choice(ids, size=n_val, replace=False)) if n_val else np.zeros(0, int)
    ds.meta["val_trials"] = [int(i) for i in val]
    ds.meta["val_fraction"] = val_fraction
    return ds


def collect(materials, trials_per_material, seed, cfg=None, no_contact=None, val_fraction=0.2):
    """Full pipeline: trials for every material, regression fill, assembly.

    Per-trial generators are spawned from the master seed so each trial is
    reproducible on its own. Returns (dataset, fits, n_degenerate).
    """
    cfg = cfg or CollectionConfig()
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(materials) * trials_per_material + 2)
    trials, degenerate = [], 0
    tid = 0
    for mi, obj in enumerate(materials):
        for j in range(trials_per_material):
            rng = np.random.default_rng(children[mi * trials_per_material + j])
            try:
                trials.append(run_trial(obj, rng=rng, cfg=cfg, trial_id=tid))
            except DegenerateTrial:
                degenerate += 1
            tid += 1
    fits = regression_fill(trials)
    if no_contact is None:
        no_contact = len(materials) * trials_per_material * 5
    nc = add_no_contact_samples(no_contact, np.random.default_rng(children[-2]))
    ds = assemble_dataset(trials, nc, np.random.default_rng(children[-1]), val_fraction)
    ds.meta.update({
        "seed": int(seed),
        "materials": [o.name for o in materials],
        "trials_per_material": trials_per_material,
        "degenerate": degenerate,
        "collection": cfg.to_dict(),
        "fits": {k: v.__dict__ for k, v in fits.items()},
        # per-trial summary: [trial_id, material, F_ext, p_slip, slipped]
        "trials": [[t.trial_id, t.material, float(t.F_ext), float(t.p_slip), t.slip_frame is not None]
                   for t in trials],
    })
    return ds, fits, degenerate


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


COLUMNS = ["trial_id", "material", "frame", "t"] + [f"obs_{i}" for i in range(8)] + ["p_n", "v_n", "p_slip"]


def save_dataset(ds, path, meta_path=None, config=None):
    """CSV with repr floats (lossless) plus a JSON sidecar with the metadata."""
    K = ds.obs.shape[1]
    header = ["trial_id", "material", "frame", "t"] + [f"obs_{i}" for i in range(K)] + ["p_n", "v_n", "p_slip"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(len(ds)):
        w.writerow([int(ds.trial_id[i]), ds.material[i], int(ds.frame[i]), repr(float(ds.t[i]))]
                   + [repr(float(x)) for x in ds.obs[i]]
                   + [repr(float(ds.p_n[i])), repr(float(ds.v_n[i])), repr(float(ds.p_slip[i]))])
    atomic_write(path, buf.getvalue())
    meta = dict(ds.meta)
    if config is not None:
        meta["config_hash"] = config_hash(config)
    meta_path = meta_path or str(path) + ".meta.json"
    atomic_write(meta_path, dumps_json(meta))
    return meta_path


def load_dataset(path, meta_path=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    if header[:4] != ["trial_id", "material", "frame", "t"] or header[-3:] != ["p_n", "v_n", "p_slip"]:
        raise ValueError(f"{path}: unexpected header {header}")
    K = len(header) - 7
    if not body:
        raise ValueError(f"{path}: no samples")
    cols = list(zip(*body))
    obs = np.array([[float(x) for x in cols[4 + j]] for j in range(K)]).T
    meta_path = meta_path or str(path) + ".meta.json"
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return Dataset(np.array([int(x) for x in cols[0]]), np.array(cols[1], dtype=object),
                   np.array([int(x) for x in cols[2]]), np.array([float(x) for x in cols[3]]),
                   obs, np.array([float(x) for x in cols[-3]]), np.array([float(x) for x in cols[-2]]),
                   np.array([float(x) for x in cols[-1]]), meta)
