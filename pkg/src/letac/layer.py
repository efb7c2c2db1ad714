"""Differentiable linear-MPC layer.

The layer solves, for an embedding ``f_n`` and finger state ``(p_n, v_n)``::

    min_a  P (f_N' Qf f_N + Qv v_N^2) + sum_{k<N} f_k' Qf f_k + Qv v_k^2 + Qa a_k^2
    s.t.   f_{k+1} = f_k + A_f v_k,   (p, v) double integrator

with ``Qf = Lf Lf' + eps I``. States are eliminated through the prediction
matrix ``S_bar`` (condensing), giving ``H = 2 (Qa I + S_bar' Q_bar S_bar)``.

Because the embedding only ever appears as ``A_f' Qf f``, the condensed
problem depends on ``(A_f, Lf, f_n)`` through two scalars::

    alpha = A_f' Qf A_f,    beta = A_f' Qf f_n

which the batched forward/backward passes exploit. ``build_condensed``
assembles the explicit block matrices and is used for certification and as
an independent cross-check of the structured route.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import DomainError, MPCDims, GripperState, rollout_stacked
from .qp import NotPositiveDefinite, solve_unconstrained


@dataclass
class LayerParams:
    A_f: np.ndarray
    L_f: np.ndarray
    eps: float = 1e-4
    Q_v: float = 0.02
    Q_a: float = 5e-5
    P: float = 5.0

    def __post_init__(self):
        self.A_f = np.asarray(self.A_f, dtype=float).reshape(-1)
        self.L_f = np.asarray(self.L_f, dtype=float)
        M = self.A_f.shape[0]
        if self.L_f.shape != (M, M):
            raise DomainError(f"L_f must be {M}x{M}, got {self.L_f.shape}")

    @property
    def M(self):
        return self.A_f.shape[0]

    @property
    def Q_f(self):
        return q_f_from_cholesky(self.L_f, self.eps)

    def storage_ok(self, tol=0.0):
        return bool(np.all(np.abs(np.triu(self.L_f, 1)) <= tol))

    def validate(self):
        if not self.storage_ok():
            raise DomainError("L_f has nonzero entries above the diagonal")
        if not (self.Q_v > 0 and self.Q_a > 0 and self.P > 0 and self.eps > 0):
            raise DomainError("Q_v, Q_a, P and eps must all be positive")
        if not (np.all(np.isfinite(self.A_f)) and np.all(np.isfinite(self.L_f))):
            raise DomainError("non-finite layer parameters")

    def copy(self):
        return replace(self, A_f=self.A_f.copy(), L_f=self.L_f.copy())


def init_params(dims, rng, a_scale=1.0, l_scale=1.0, **weights):
    """Random A_f ~ N(0, a_scale^2 / M), L_f = l_scale * I."""
    A_f = rng.normal(scale=a_scale / np.sqrt(dims.M), size=dims.M)
    return LayerParams(A_f, l_scale * np.eye(dims.M), **weights)


def q_f_from_cholesky(L_f, eps):
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    L_f = np.asarray(L_f, dtype=float)
    Q = L_f @ L_f.T + eps * np.eye(L_f.shape[0])
    return 0.5 * (Q + Q.T)


@dataclass
class CondensedQP:
    A: np.ndarray        # (M+1, M+1) transition of x = (f, v)
    B: np.ndarray        # (M+1,)
    S_bar: np.ndarray    # (N(M+1), N)
    Q_bar: np.ndarray    # (N(M+1), N(M+1))
    Q_bar_a: np.ndarray  # (N, N)
    H: np.ndarray        # (N, N)
    x0_effect: np.ndarray  # (N(M+1), M+1), stacked A^k, maps x_n to free response
    dims: MPCDims = None
    Q_v: float = 0.0     # velocity weight actually used (after any deployment gain)


def build_condensed(params, dims, Kv=1.0, Ka=1.0):
    """Assemble the block matrices and Hessian explicitly.

    ``Kv`` and ``Ka`` scale Q_v and Q_a (deployment gains); both default to 1.
    """
    M, N, dt = dims.M, dims.N, dims.dt
    if params.M != M:
        raise DomainError(f"params have M={params.M}, dims have M={M}")
    nx = M + 1
    A = np.eye(nx)
    A[:M, M] = params.A_f
    B = np.zeros(nx)
    B[M] = dt
    Qv = Kv * params.Q_v
    Q = np.zeros((nx, nx))
    Q[:M, :M] = params.Q_f
    Q[M, M] = Qv

    powers = [np.eye(nx)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    S_bar = np.zeros((N * nx, N))
    T = np.zeros((N * nx, nx))
    for i in range(N):
        T[i * nx:(i + 1) * nx] = powers[i + 1]
        for j in range(i + 1):
            S_bar[i * nx:(i + 1) * nx, j] = powers[i - j] @ B
    Q_bar = np.zeros((N * nx, N * nx))
    for i in range(N):
        w = params.P if i == N - 1 else 1.0
        Q_bar[i * nx:(i + 1) * nx, i * nx:(i + 1) * nx] = w * Q
    Q_bar_a = Ka * params.Q_a * np.eye(N)
    H = 2.0 * (Q_bar_a + S_bar.T @ Q_bar @ S_bar)
    H = 0.5 * (H + H.T)
    return CondensedQP(A, B, S_bar, Q_bar, Q_bar_a, H, T, dims, Qv)


def build_linear_term(cqp, f_n, p_n, v_n, v_target=0.0):
    """Linear term q such that 1/2 a'Ha + q'a + const equals the rollout cost.

    ``p_n`` does not enter: neither the embedding transition nor the cost
    involves the width. ``v_target`` shifts the velocity cost to
    ``(v - v_target)^2`` (held constant over the horizon).
    """
    f_n = np.asarray(f_n, dtype=float).reshape(-1)
    nx = cqp.A.shape[0]
    if f_n.shape != (nx - 1,):
        raise DomainError(f"f_n must have length {nx - 1}")
    x_n = np.concatenate([f_n, [v_n]])
    N = cqp.S_bar.shape[1]
    ref = np.zeros(N * nx)
    ref[nx - 1::nx] = v_target
    return 2.0 * cqp.S_bar.T @ (cqp.Q_bar @ (cqp.x0_effect @ x_n - ref))


def rollout_cost(params, dims, f_n, p_n, v_n, a, Kv=1.0, Ka=1.0, v_target=0.0):
    """Cost of the MPC objective evaluated by explicit rollout (no condensing)."""
    f, p, v = rollout_stacked(f_n, GripperState(p_n, v_n), params.A_f, a, dims)
    Q_f = params.Q_f
    Qv, Qa = Kv * params.Q_v, Ka * params.Q_a
    f_all = np.vstack([np.asarray(f_n, dtype=float)[None, :], f])
    v_all = np.concatenate([[v_n], v])
    stage = np.einsum("ki,ij,kj->k", f_all, Q_f, f_all) + Qv * (v_all - v_target) ** 2
    return float(stage[:-1].sum() + params.P * stage[-1] + Qa * np.sum(np.asarray(a) ** 2))


@dataclass
class Horizon:
    """Lower-triangular maps from accelerations to horizon quantities.

    For a[0..N-1] and step k = 1..N (row k-1)::

        vel[k]  = dt * sum_{i<k} a_i             -> V
        disp[k] = sum_{1<=j<k} vel[j]            -> C  (feeds f_k = f_n + A_f disp_k)
        width[k] = sum_{j<k} (vel[j] dt + a_j dt^2 / 2)  -> G
    """
    N: int
    dt: float
    w: np.ndarray = field(init=False)
    V: np.ndarray = field(init=False)
    C: np.ndarray = field(init=False)
    G: np.ndarray = field(init=False)
    kvec: np.ndarray = field(init=False)
    P: float = 1.0

    def __post_init__(self):
        N, dt = self.N, self.dt
        low = np.tril(np.ones((N, N)))
        self.V = dt * low
        strict = np.tril(np.ones((N, N)), -1)
        self.C = strict @ self.V
        vel_prev = np.vstack([np.zeros((1, N)), self.V[:-1]])  # velocity before step k
        self.G = low @ (vel_prev * dt + 0.5 * dt * dt * np.eye(N))
        self.kvec = np.arange(1, N + 1, dtype=float)
        self.w = np.ones(N)
        self.w[-1] = self.P


def horizon(dims, P):
    return Horizon(dims.N, dims.dt, P=P)


def structured_hessian(alpha, Qv, Qa, hz):
    W = hz.w
    H = 2.0 * (Qa * np.eye(hz.N) + alpha * hz.C.T @ (W[:, None] * hz.C)
               + Qv * hz.V.T @ (W[:, None] * hz.V))
    return 0.5 * (H + H.T)


def structured_linear(alpha, beta, v_n, Qv, hz, v_target=0.0):
    """q for a batch: beta, v_n, v_target broadcast over the leading axis."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    v_n = np.broadcast_to(np.asarray(v_n, dtype=float), beta.shape)
    v_err = v_n - v_target
    Cw = hz.C.T @ hz.w                       # d q / d beta / 2
    Ck = hz.C.T @ (hz.w * hz.kvec)           # d q / d (alpha v_n) / 2
    Vw = hz.V.T @ hz.w
    return 2.0 * (beta[:, None] * Cw[None, :] + (alpha * v_n)[:, None] * Ck[None, :]
                  + Qv * v_err[:, None] * Vw[None, :])


@dataclass
class LayerCache:
    params: LayerParams
    dims: MPCDims
    f_n: np.ndarray
    p_n: np.ndarray
    v_n: np.ndarray
    alpha: float
    beta: np.ndarray
    a_star: np.ndarray
    factor: tuple
    hz: Horizon


@dataclass
class LayerOutput:
    a_star: np.ndarray
    p_traj: np.ndarray
    v_traj: np.ndarray
    f_traj: np.ndarray
    cache: LayerCache = None


def forward_batch(params, dims, f_n, p_n, v_n, with_f_traj=False):
    """Solve the unconstrained layer QP for a batch of B samples.

    f_n: (B, M); p_n, v_n: (B,). Returns p_traj and v_traj of shape (B, N).
    """
    f_n = np.atleast_2d(np.asarray(f_n, dtype=float))
    B = f_n.shape[0]
    p_n = np.broadcast_to(np.asarray(p_n, dtype=float), (B,))
    v_n = np.broadcast_to(np.asarray(v_n, dtype=float), (B,))
    Q_f = params.Q_f
    QA = Q_f @ params.A_f
    alpha = float(params.A_f @ QA)
    beta = f_n @ QA
    hz = horizon(dims, params.P)
    H = structured_hessian(alpha, params.Q_v, params.Q_a, hz)
    try:
        factor = cho_factor(H, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"layer Hessian lost positive definiteness: {exc}") from None
    q = structured_linear(alpha, beta, v_n, params.Q_v, hz)
    a_star = -cho_solve(factor, q.T).T
    v_traj = v_n[:, None] + a_star @ hz.V.T
    p_traj = p_n[:, None] + dims.dt * v_n[:, None] * hz.kvec[None, :] + a_star @ hz.G.T
    f_traj = None
    if with_f_traj:
        disp = v_n[:, None] * hz.kvec[None, :] + a_star @ hz.C.T
        f_traj = f_n[:, None, :] + disp[:, :, None] * params.A_f[None, None, :]
    cache = LayerCache(params, dims, f_n, p_n, v_n, alpha, beta, a_star, factor, hz)
    return LayerOutput(a_star, p_traj, v_traj, f_traj, cache)


def backward_batch(cache, grad_p_traj):
    """Gradients of sum_b <grad_p_traj[b], p_traj[b]>.

    Implicit differentiation of H a* = -q: with lam = H^-1 (dp/da)' g,
    d/dtheta = -lam' (dH/dtheta a* + dq/dtheta).

    Returns (grad_A_f, grad_L_f, grad_f_n) with grad_L_f lower triangular
    and grad_f_n of shape (B, M).
    """
    if cache is None:
        raise RuntimeError("backward called without a forward cache")
    params, hz = cache.params, cache.hz
    g = np.atleast_2d(np.asarray(grad_p_traj, dtype=float))
    ga = g @ hz.G                                   # (B, N) dl/da
    lam = cho_solve(cache.factor, ga.T).T           # (B, N)
    a = cache.a_star
    W = hz.w
    Cw = hz.C.T @ W
    Ck = hz.C.T @ (W * hz.kvec)
    CWC = hz.C.T @ (W[:, None] * hz.C)
    # dl/dbeta_b = -lam_b . dq/dbeta ; dl/dalpha sums H- and q-dependence
    d_beta = -2.0 * lam @ Cw
    d_alpha = -2.0 * float(np.sum((lam @ CWC) * a) + np.sum((lam @ Ck) * cache.v_n))

    Q_f = params.Q_f
    A_f = params.A_f
    QA = Q_f @ A_f
    # alpha = A' Q A, beta_b = A' Q f_b
    grad_A = d_alpha * 2.0 * QA + Q_f @ (cache.f_n.T @ d_beta)
    grad_Q = d_alpha * np.outer(A_f, A_f) + np.outer(A_f, d_beta @ cache.f_n)
    grad_L = np.tril((grad_Q + grad_Q.T) @ params.L_f)
    grad_f = d_beta[:, None] * QA[None, :]
    return grad_A, grad_L, grad_f


def forward(params, dims, f_n, p_n, v_n):
    """Single-sample forward pass; returns LayerOutput with 1-D trajectories."""
    out = forward_batch(params, dims, np.asarray(f_n, dtype=float)[None, :], [p_n], [v_n],
                        with_f_traj=True)
    return LayerOutput(out.a_star[0], out.p_traj[0], out.v_traj[0], out.f_traj[0], out.cache)


def backward(params, dims, f_n, p_n, v_n, grad_p_traj, cache=None):
    if cache is None:
        cache = forward(params, dims, f_n, p_n, v_n).cache
    gA, gL, gf = backward_batch(cache, np.asarray(grad_p_traj, dtype=float)[None, :])
    return gA, gL, gf[0]


def forward_explicit(params, dims, f_n, p_n, v_n):
    """Forward pass through the explicit condensed matrices (reference route)."""
    cqp = build_condensed(params, dims)
    q = build_linear_term(cqp, f_n, p_n, v_n)
    a = solve_unconstrained(cqp.H, q).x
    f, p, v = rollout_stacked(f_n, GripperState(p_n, v_n), params.A_f, a, dims)
    return LayerOutput(a, p, v, f)


@dataclass
class FeasibilityReport:
    min_eigenvalue_H: float
    rank_S_bar: int
    N: int
    spd: bool
    storage_ok: bool = True

    @property
    def ok(self):
        return self.spd and self.storage_ok


def check_feasibility(params, dims):
    """Certify that the condensed Hessian is SPD and S_bar has full column rank."""
    cqp = build_condensed(params, dims)
    H = 0.5 * (cqp.H + cqp.H.T)
    lam_min = float(np.linalg.eigvalsh(H)[0])
    rank = int(np.linalg.matrix_rank(cqp.S_bar))
    return FeasibilityReport(lam_min, rank, dims.N, bool(lam_min > 0 and rank == dims.N),
                             params.storage_ok())
