"""Versioned JSON checkpoints.

Layout (``format = "letac-checkpoint"``, ``version = 1``)::

    {
      "format": "letac-checkpoint", "version": 1,
      "dims":    {"N": int, "M": int, "dt": float},
      "layer":   {"eps", "Q_v", "Q_a", "P": float,
                  "A_f": [M floats], "L_f": [M*M floats, row-major]},
      "encoder": {"sizes": [K, h, ..., M], "seed": int,
                  "weights": [[out*in floats, row-major], ...],
                  "biases": [[out floats], ...],
                  "obs_offset": [K floats], "obs_scale": [K floats]},
      "epoch": int,                       # completed epochs
      "optimizer": null | {"t": int, "m": [...], "v": [...]},
      "training": null | {TrainingConfig fields}
    }

Optimizer moments follow ``Model.arrays()`` order and are flattened
row-major. Floats are written with ``repr`` so a save/load cycle is exact.
L_f is stored in full; its strict upper triangle must be zero.
"""
import json

import numpy as np

from . import encoder as enc
from . import layer as lay
from .dynamics import DomainError, MPCDims
from .fileio import dumps_json, atomic_write
from .training import AdamState, Model

FORMAT = "letac-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or structurally invalid checkpoint."""


class StorageInvariantError(CheckpointError):
    """The stored parameters violate a storage invariant (e.g. L_f not lower-triangular)."""


def to_dict(model, epoch=0, optimizer=None, training=None):
    L, E, d = model.layer, model.encoder, model.dims
    sizes = [E.in_dim] + [W.shape[0] for W in E.weights]
    out = {
        "format": FORMAT,
        "version": VERSION,
        "dims": {"N": int(d.N), "M": int(d.M), "dt": float(d.dt)},
        "layer": {"eps": float(L.eps), "Q_v": float(L.Q_v), "Q_a": float(L.Q_a), "P": float(L.P),
                  "A_f": L.A_f.tolist(), "L_f": L.L_f.ravel().tolist()},
        "encoder": {"sizes": sizes, "seed": int(E.seed),
                    "weights": [W.ravel().tolist() for W in E.weights],
                    "biases": [b.tolist() for b in E.biases],
                    "obs_offset": E.obs_offset.tolist(), "obs_scale": E.obs_scale.tolist()},
        "epoch": int(epoch),
        "optimizer": None,
        "training": training,
    }
    if optimizer is not None:
        out["optimizer"] = {"t": int(optimizer.t),
                            "m": [a.ravel().tolist() for a in optimizer.m],
                            "v": [a.ravel().tolist() for a in optimizer.v]}
    return out


def save(path, model, epoch=0, optimizer=None, training=None):
    return atomic_write(path, dumps_json(to_dict(model, epoch, optimizer, training)))


def _arr(x, shape, what):
    a = np.asarray(x, dtype=float)
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"{what}: expected {int(np.prod(shape))} values, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise CheckpointError(f"{what}: non-finite values")
    return a.reshape(shape)


def from_dict(doc, strict=True):
    """Rebuild (model, epoch, optimizer, training, issues).

    With ``strict`` a storage-invariant violation raises; otherwise it is
    listed in ``issues`` and the parameters are returned as stored.
    """
    try:
        if doc.get("format") != FORMAT:
            raise CheckpointError(f"not a checkpoint (format={doc.get('format')!r})")
        if doc.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
        dd = doc["dims"]
        dims = MPCDims(int(dd["N"]), int(dd["M"]), float(dd["dt"]))
        ld = doc["layer"]
        M = dims.M
        A_f = _arr(ld["A_f"], (M,), "layer.A_f")
        L_f = _arr(ld["L_f"], (M, M), "layer.L_f")
        layer = lay.LayerParams(A_f, L_f, eps=float(ld["eps"]), Q_v=float(ld["Q_v"]),
                                Q_a=float(ld["Q_a"]), P=float(ld["P"]))
        ed = doc["encoder"]
        sizes = [int(s) for s in ed["sizes"]]
        if len(ed["weights"]) != len(sizes) - 1 or len(ed["biases"]) != len(sizes) - 1:
            raise CheckpointError("encoder: layer count does not match sizes")
        Ws = [_arr(w, (o, i), f"encoder.weights[{k}]")
              for k, (w, i, o) in enumerate(zip(ed["weights"], sizes[:-1], sizes[1:]))]
        bs = [_arr(b, (o,), f"encoder.biases[{k}]") for k, (b, o) in enumerate(zip(ed["biases"], sizes[1:]))]
        K = sizes[0]
        encoder = enc.EncoderParams(Ws, bs, _arr(ed["obs_offset"], (K,), "encoder.obs_offset"),
                                    _arr(ed["obs_scale"], (K,), "encoder.obs_scale"), int(ed.get("seed", 0)))
        if encoder.out_dim != M:
            raise CheckpointError(f"encoder output {encoder.out_dim} does not match M={M}")
        model = Model(encoder, layer, dims)
        opt = None
        od = doc.get("optimizer")
        if od is not None:
            shapes = [a.shape for a in model.arrays()]
            if len(od["m"]) != len(shapes) or len(od["v"]) != len(shapes):
                raise CheckpointError("optimizer: moment count does not match the parameters")
            opt = AdamState([_arr(m, s, "optimizer.m") for m, s in zip(od["m"], shapes)],
                            [_arr(v, s, "optimizer.v") for v, s in zip(od["v"], shapes)], int(od["t"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: missing or mistyped field {exc}") from exc
    except DomainError as exc:
        raise CheckpointError(str(exc)) from exc

    issues = []
    upper = np.abs(np.triu(L_f, 1))
    if upper.max(initial=0.0) > 0:
        i, j = np.unravel_index(np.argmax(upper), upper.shape)
        issues.append(f"L_f upper triangle is not zero: {int((upper > 0).sum())} entries, "
                      f"largest |L_f[{i},{j}]| = {upper[i, j]:.6g}")
    if not (layer.Q_v > 0 and layer.Q_a > 0 and layer.P > 0 and layer.eps > 0):
        issues.append("Q_v, Q_a, P and eps must all be positive")
    if issues and strict:
        raise StorageInvariantError("; ".join(issues))
    return model, int(doc.get("epoch", 0)), opt, doc.get("training"), issues


def load(path, strict=True):
    """Load a checkpoint file; see ``from_dict`` for the return value."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc, strict=strict)


def load_model(path):
    return load(path, strict=True)[0]
