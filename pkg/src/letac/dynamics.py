"""Finger-width double integrator and the stacked embedding/gripper rollout."""
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised for non-finite or shape-inconsistent model inputs."""


@dataclass(frozen=True)
class GripperState:
    p: float  # finger width, mm
    v: float  # finger velocity, mm/s

    def __post_init__(self):
        if not (np.isfinite(self.p) and np.isfinite(self.v)):
            raise DomainError(f"non-finite gripper state ({self.p}, {self.v})")


@dataclass(frozen=True)
class MPCDims:
    N: int = 15
    M: int = 20
    dt: float = 1.0 / 25.0

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise DomainError(f"horizon and embedding size must be >= 1, got N={self.N}, M={self.M}")
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")


def step_gripper(state, a, dt):
    """Advance one step: p' = p + v dt + a dt^2 / 2, v' = v + a dt."""
    if not (np.isfinite(a) and np.isfinite(dt)):
        raise DomainError(f"non-finite acceleration or dt ({a}, {dt})")
    return GripperState(state.p + state.v * dt + 0.5 * a * dt * dt, state.v + a * dt)


def rollout_stacked(f0, state0, A_f, accels, dims):
    """Roll the stacked (f, p, v) system forward under an acceleration sequence.

    The embedding update uses the velocity *before* the gripper step, so
    ``f[k+1] = f[k] + A_f * v[k]``.

    Returns
    -------
    f : (N, M) array
    p, v : (N,) arrays
        States at steps n+1 .. n+N.
    """
    f0 = np.asarray(f0, dtype=float)
    A_f = np.asarray(A_f, dtype=float)
    accels = np.asarray(accels, dtype=float)
    if accels.shape != (dims.N,):
        raise DomainError(f"expected {dims.N} accelerations, got shape {accels.shape}")
    if f0.shape != (dims.M,) or A_f.shape != (dims.M,):
        raise DomainError(f"embedding vectors must have length {dims.M}")
    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(A_f)) and np.all(np.isfinite(accels))):
        raise DomainError("non-finite rollout input")

    dt = dims.dt
    # v_k for k = n .. n+N-1 (pre-step velocities), then successive widths
    v_pre = state0.v + dt * np.concatenate(([0.0], np.cumsum(accels[:-1])))
    v = state0.v + dt * np.cumsum(accels)
    p = state0.p + np.cumsum(v_pre * dt + 0.5 * accels * dt * dt)
    f = f0[None, :] + np.cumsum(v_pre)[:, None] * A_f[None, :]
    return f, p, v


def stacked_transition(A_f, dt):
    """Block matrices of the (f, p, v) transition: x' = A x + B a."""
    A_f = np.asarray(A_f, dtype=float)
    M = A_f.shape[0]
    A = np.eye(M + 2)
    A[:M, M + 1] = A_f
    A[M, M + 1] = dt
    B = np.zeros(M + 2)
    B[M] = 0.5 * dt * dt
    B[M + 1] = dt
    return A, B
