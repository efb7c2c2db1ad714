"""End-to-end training of encoder + MPC layer with the sequence loss."""
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoder as enc
from . import layer as lay
from .dynamics import MPCDims


class TrainingDiverged(RuntimeError):
    pass


class CertificationFailed(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    P_tilde: float = 3.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 120
    steps_per_epoch: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 10.0
    seed: int = 0
    lr_final: float = 0.1           # cosine decay to lr * lr_final by the last epoch
    l2: float = 0.2                # L2 penalty on encoder weight matrices (added to the gradient)
    no_contact_share: float = 0.1   # sampling mass given to empty-gel frames

    def __post_init__(self):
        if not self.P_tilde > 0:
            raise ValueError("P_tilde must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class Model:
    encoder: enc.EncoderParams
    layer: lay.LayerParams
    dims: MPCDims

    def copy(self):
        return Model(self.encoder.copy(), self.layer.copy(), self.dims)

    def arrays(self):
        """Learnable arrays in a fixed order: A_f, L_f, then (W, b) per encoder layer."""
        out = [self.layer.A_f, self.layer.L_f]
        for W, b in zip(self.encoder.weights, self.encoder.biases):
            out += [W, b]
        return out


def init_model(dims=None, seed=0, hidden=32, depth=2, a_scale=None, l_scale=1.0,
               out_scale=0.1, K=enc.OBS_DIM, **weights):
    """Fresh model. A_f is drawn small so O(1) embeddings map to mm-scale moves."""
    dims = dims or MPCDims()
    rng = np.random.default_rng([seed, 1])
    if a_scale is None:
        a_scale = 0.1 * dims.dt
    layer = lay.init_params(dims, rng, a_scale=a_scale, l_scale=l_scale, **weights)
    encoder = enc.init_encoder(K=K, M=dims.M, hidden=hidden, depth=depth, seed=seed, out_scale=out_scale)
    return Model(encoder, layer, dims)


def sequence_loss(p_traj, p_slip, P_tilde=3.0):
    """sum_k (p_k - p_slip)^2 + P_tilde (p_N - p_slip)^2; vectorised over a leading batch axis."""
    p_traj = np.asarray(p_traj, dtype=float)
    e = p_traj - np.asarray(p_slip, dtype=float)[..., None]
    return np.sum(e * e, axis=-1) + P_tilde * e[..., -1] ** 2


def sequence_loss_grad(p_traj, p_slip, P_tilde=3.0):
    e = np.asarray(p_traj, dtype=float) - np.asarray(p_slip, dtype=float)[..., None]
    g = 2.0 * e
    g[..., -1] += 2.0 * P_tilde * e[..., -1]
    return g


def predict(model, obs, p_n, v_n):
    """Planned width trajectories (B, N) for a batch of observations."""
    f = enc.encode(np.atleast_2d(obs), model.encoder)
    return lay.forward_batch(model.layer, model.dims, f, p_n, v_n).p_traj


def batch_loss(model, obs, p_n, v_n, p_slip, P_tilde=3.0):
    """Mean sequence loss over a batch (fixed reduction order)."""
    return float(np.mean(sequence_loss(predict(model, obs, p_n, v_n), p_slip, P_tilde)))


def evaluate(model, ds, P_tilde=3.0, chunk=4096):
    if len(ds) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(ds), chunk):
        sl = slice(s, s + chunk)
        total += float(np.sum(sequence_loss(predict(model, ds.obs[sl], ds.p_n[sl], ds.v_n[sl]),
                                            ds.p_slip[sl], P_tilde)))
    return total / len(ds)


def loss_and_grad(model, obs, p_n, v_n, p_slip, P_tilde=3.0):
    """Mean loss and gradients aligned with ``model.arrays()``."""
    f, ecache = enc.encode(np.atleast_2d(obs), model.encoder, return_cache=True)
    out = lay.forward_batch(model.layer, model.dims, f, p_n, v_n)
    B = f.shape[0]
    losses = sequence_loss(out.p_traj, p_slip, P_tilde)
    g_p = sequence_loss_grad(out.p_traj, p_slip, P_tilde) / B
    gA, gL, gf = lay.backward_batch(out.cache, g_p)
    gW, gb, _ = enc.encode_backward(ecache, model.encoder, gf)
    grads = [gA, gL]
    for a, b in zip(gW, gb):
        grads += [a, b]
    return float(np.mean(losses)), grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def add_l2(arrays, grads, l2):
    """Add the gradient of l2 * ||W||^2 for every encoder weight matrix, in place."""
    if l2:
        for a, g in zip(arrays[2::2], grads[2::2]):
            g += 2.0 * l2 * a


def lr_at(cfg, step):
    total = max(cfg.epochs * cfg.steps_per_epoch, 1)
    frac = min(step / total, 1.0)
    return cfg.lr * (cfg.lr_final + (1.0 - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def adam_update(arrays, grads, state, cfg, lr=None):
    """In-place Adam step after global-norm clipping. Returns the pre-clip norm."""
    lr = cfg.lr if lr is None else lr
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    scale = cfg.clip / norm if cfg.clip and norm > cfg.clip else 1.0
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        g = g * scale
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        a -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return norm


def sampling_weights(ds, no_contact_share=0.1):
    """Per-sample probabilities: each trial weighs the same regardless of length."""
    ids = ds.trial_id
    contact = ids >= 0
    w = np.zeros(len(ds))
    if contact.any():
        uniq, inv, counts = np.unique(ids[contact], return_inverse=True, return_counts=True)
        w[contact] = 1.0 / counts[inv]
        w[contact] *= (1.0 - no_contact_share) / w[contact].sum()
    if (~contact).any():
        share = no_contact_share if contact.any() else 1.0
        w[~contact] = share / (~contact).sum()
    return w / w.sum()


def certify(model):
    rep = lay.check_feasibility(model.layer, model.dims)
    if not rep.ok:
        raise CertificationFailed(f"feasibility certification failed: {rep}")
    return rep


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    optimizer: AdamState = None
    epoch: int = 0


def train(train_ds, model, cfg=None, val_ds=None, optimizer=None, start_epoch=0, log=None,
          stop_epoch=None):
    """Mini-batch Adam on the sequence loss.

    The batch order of epoch e is drawn from a generator seeded by
    (cfg.seed, e), so a run resumed from an epoch checkpoint (with its
    optimizer state) continues exactly as the uninterrupted run would.
    ``stop_epoch`` ends the call early without changing the learning-rate
    schedule, which is always laid out over ``cfg.epochs``.

    Raises
    ------
    TrainingDiverged
        On a non-finite loss or gradient.
    CertificationFailed
        If the layer loses its feasibility certificate at a checkpoint.
    """
    cfg = cfg or TrainingConfig()
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    certify(model)
    arrays = model.arrays()
    opt = optimizer or AdamState.zeros_like(arrays)
    probs = sampling_weights(train_ds, cfg.no_contact_share)
    history = []
    if start_epoch == 0:
        history.append(_record(model, train_ds, val_ds, cfg, 0, 0, float("nan")))
        if log:
            log(history[-1])
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, stop):
        rng = np.random.default_rng([cfg.seed, epoch])
        running = 0.0
        for step in range(cfg.steps_per_epoch):
            idx = rng.choice(len(train_ds), size=cfg.batch_size, p=probs)
            try:
                loss, grads = loss_and_grad(model, train_ds.obs[idx], train_ds.p_n[idx], train_ds.v_n[idx],
                                            train_ds.p_slip[idx], cfg.P_tilde)
            except ValueError as exc:
                # the layer rejects non-finite embeddings; that is divergence when the weights blew up
                if all(np.all(np.isfinite(a)) for a in arrays):
                    raise
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch} step {step}") from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(
                    f"non-finite loss/gradient at epoch {epoch} step {step}: loss={loss}, "
                    f"alpha={float(model.layer.A_f @ model.layer.Q_f @ model.layer.A_f):.3e}")
            add_l2(arrays, grads, cfg.l2)
            adam_update(arrays, grads, opt, cfg, lr_at(cfg, opt.t))
            running += loss
        history.append(_record(model, train_ds, val_ds, cfg, epoch + 1, opt.t,
                               running / max(cfg.steps_per_epoch, 1)))
        if log:
            log(history[-1])
    return TrainResult(model, history, opt, max(stop, start_epoch))


def _record(model, train_ds, val_ds, cfg, epoch, step, train_loss):
    rep = certify(model)
    val = evaluate(model, val_ds, cfg.P_tilde) if val_ds is not None and len(val_ds) else float("nan")
    return {"epoch": epoch, "step": step, "train_loss": train_loss, "val_loss": val,
            "min_eig_H": rep.min_eigenvalue_H, "rank_S_bar": rep.rank_S_bar}


def overfit_single(model, obs, p_n, v_n, p_slip, steps=2000, cfg=None):
    """Fit one sample; returns (initial loss, final loss, model)."""
    cfg = cfg or TrainingConfig(lr=1e-2, clip=0.0)
    model = model.copy()
    arrays = model.arrays()
    opt = AdamState.zeros_like(arrays)
    obs = np.atleast_2d(obs)
    p_n, v_n, p_slip = np.atleast_1d(p_n), np.atleast_1d(v_n), np.atleast_1d(p_slip)
    l0 = batch_loss(model, obs, p_n, v_n, p_slip, cfg.P_tilde)
    loss = l0
    for _ in range(steps):
        loss, grads = loss_and_grad(model, obs, p_n, v_n, p_slip, cfg.P_tilde)
        if loss <= 1e-2 * l0:
            break
        adam_update(arrays, grads, opt, cfg)
    loss = batch_loss(model, obs, p_n, v_n, p_slip, cfg.P_tilde)
    return l0, loss, model


def _rel_err(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


FD_NOISE = 10.0     # central-difference round-off in units of eps*|loss|/h (measured ~2.5)


def grad_check(model, sample, h=1e-5, P_tilde=3.0):
    """Analytic vs central-difference gradient for every learnable coordinate.

    ``sample`` is (obs, p_n, v_n, p_slip). Relative errors use the
    denominator max(|analytic|, |numeric|, floor), where the floor is the
    larger of 1e-6 * max|analytic| (exact zeros from dead ReLUs) and the
    smallest gradient a central difference can resolve to 1e-3 relative
    accuracy: its round-off is about FD_NOISE * eps * |loss| / h, so
    coordinates below 1e3 times that are compared in absolute terms.
    The upper triangle of L_f is not a parameter and is skipped.
    """
    obs, p_n, v_n, p_slip = sample
    args = (np.atleast_2d(obs), np.atleast_1d(p_n), np.atleast_1d(v_n), np.atleast_1d(p_slip), P_tilde)
    model = model.copy()
    loss, grads = loss_and_grad(model, *args)
    arrays = model.arrays()
    names = ["A_f", "L_f"] + [f"{k}{i}" for i in range(len(model.encoder.weights)) for k in ("W", "b")]
    scale = max(max(float(np.abs(g).max(initial=0.0)) for g in grads), 1e-300)
    resolution = FD_NOISE * np.finfo(float).eps * max(abs(loss), 1.0) / h
    floor = max(1e-6 * scale, 1e3 * resolution)
    report = {}
    for name, a, g in zip(names, arrays, grads):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            if name == "L_f" and idx[1] > idx[0]:
                continue
            old = a[idx]
            a[idx] = old + h
            lp = batch_loss(model, *args)
            a[idx] = old - h
            lm = batch_loss(model, *args)
            a[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        mask = np.ones(a.shape, bool) if name != "L_f" else np.tril(np.ones(a.shape, bool))
        err = _rel_err(g[mask], num[mask], floor)
        report[name] = float(err.max(initial=0.0))
    layer_err = max(report["A_f"], report["L_f"])
    return {"max_rel_error": max(report.values()), "layer_rel_error": layer_err,
            "per_parameter": report, "grad_scale": scale, "floor": floor}


def config_dict(cfg):
    return asdict(cfg)
