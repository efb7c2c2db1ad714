"""Small ReLU MLP mapping a tactile observation vector to an embedding."""
from dataclasses import dataclass, field

import numpy as np

OBS_CHANNELS = ("c", "d", "depth_mean", "depth_max", "texture_energy")
OBS_DIM = 8

# Fixed per-channel (offset, scale); deployment never needs dataset statistics.
DEFAULT_NORMALIZATION = (
    np.array([900.0, 30.0, 0.2, 0.4, 0.5, 0.0, 0.0, 0.0]),
    np.array([600.0, 25.0, 0.2, 0.4, 0.5, 1.0, 1.0, 1.0]),
)


@dataclass
class EncoderParams:
    """Weights of a K -> h -> ... -> M network; ``weights[i]`` is (out, in)."""
    weights: list
    biases: list
    obs_offset: np.ndarray = field(default_factory=lambda: DEFAULT_NORMALIZATION[0].copy())
    obs_scale: np.ndarray = field(default_factory=lambda: DEFAULT_NORMALIZATION[1].copy())
    seed: int = 0

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.obs_offset = np.asarray(self.obs_offset, dtype=float)
        self.obs_scale = np.asarray(self.obs_scale, dtype=float)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        prev = self.weights[0].shape[1]
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != prev or b.shape != (W.shape[0],):
                raise ValueError(f"inconsistent layer shapes {W.shape}, {b.shape}")
            prev = W.shape[0]
        if self.obs_offset.shape != (self.in_dim,) or self.obs_scale.shape != (self.in_dim,):
            raise ValueError("normalization constants must match the input dimension")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.obs_offset.copy(), self.obs_scale.copy(), self.seed)

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def init_encoder(K=OBS_DIM, hidden=32, M=20, seed=0, depth=2, out_scale=0.1):
    """He-normal hidden layers; the output layer is scaled down by ``out_scale``."""
    rng = np.random.default_rng(seed)
    sizes = [K] + [hidden] * depth + [M]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / n_in)
        if i == len(sizes) - 2:
            std *= out_scale
        weights.append(rng.normal(scale=std, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    offset, scale = DEFAULT_NORMALIZATION
    if K != OBS_DIM:
        offset, scale = np.zeros(K), np.ones(K)
    return EncoderParams(weights, biases, offset.copy(), scale.copy(), seed)


def encode(obs, params, return_cache=False):
    """Forward pass for one observation (K,) or a batch (B, K)."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    x = np.atleast_2d(obs)
    if x.shape[1] != params.in_dim:
        raise ValueError(f"observation has {x.shape[1]} channels, encoder expects {params.in_dim}")
    h = (x - params.obs_offset) / params.obs_scale
    acts = [h]
    pre = []
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    f = h[0] if single else h
    if return_cache:
        return f, {"acts": acts, "pre": pre, "single": single}
    return f


def encode_backward(cache, params, grad_f):
    """Gradients of <grad_f, f> w.r.t. weights, biases and the raw observation.

    ReLU subgradient at zero is taken as 0.
    """
    if cache is None:
        raise RuntimeError("encode_backward called without a forward cache")
    g = np.atleast_2d(np.asarray(grad_f, dtype=float))
    acts, pre = cache["acts"], cache["pre"]
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (pre[i] > 0)
        gW[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grad_obs = g / params.obs_scale
    if cache["single"]:
        grad_obs = grad_obs[0]
    return gW, gb, grad_obs
