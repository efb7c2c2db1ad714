"""Independent reference implementations used only by the tests.

Each oracle is written from the defining formulas, without calling the
package routine it checks.
"""
import itertools

import numpy as np


# gripper / stacked rollout ---------------------------------------------------

def rollout_loop(f0, p0, v0, A_f, accels, dt):
    """Per-step iteration: f += A_f v (pre-step v), then the double integrator."""
    f = np.array(f0, float)
    p, v = float(p0), float(v0)
    fs, ps, vs = [], [], []
    for a in accels:
        f = f + np.asarray(A_f, float) * v
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        fs.append(f.copy())
        ps.append(p)
        vs.append(v)
    return np.array(fs), np.array(ps), np.array(vs)


def mpc_cost_loop(A_f, L_f, eps, Q_v, Q_a, P, f0, v0, accels, dt, v_target=0.0):
    """Eq.-2-style cost by explicit stepping (stage k = 0..N-1, terminal at N)."""
    Q_f = L_f @ L_f.T + eps * np.eye(len(A_f))
    f = np.array(f0, float)
    v = float(v0)
    N = len(accels)
    total = 0.0
    for k in range(N):
        total += f @ Q_f @ f + Q_v * (v - v_target) ** 2 + Q_a * accels[k] ** 2
        f = f + np.asarray(A_f) * v
        v = v + accels[k] * dt
    total += P * (f @ Q_f @ f + Q_v * (v - v_target) ** 2)
    return total


# QP --------------------------------------------------------------------------

def brute_force_qp(H, q, G, h, tol=1e-9):
    """Minimise 1/2 x'Hx + q'x s.t. Gx <= h by enumerating every active set.

    For each subset, solve the equality-constrained KKT system and keep the
    feasible candidate with nonnegative multipliers and lowest objective.
    """
    n = len(q)
    m = G.shape[0]
    best, best_val = None, np.inf
    for k in range(0, min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            if k:
                K[:n, n:] = G[S].T
                K[n:, :n] = G[S]
            rhs = np.concatenate([-q, h[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(lam < -tol) or np.any(G @ x - h > tol * max(1.0, np.abs(h).max(initial=0))):
                continue
            val = 0.5 * x @ H @ x + q @ x
            if val < best_val:
                best, best_val = x, val
    return best, best_val


def brute_force_box(H, q, lower, upper):
    """Box-only enumeration: every face (free set F, each fixed coordinate at lo or hi).

    The face minimiser is x_F = -H_FF^-1 (q_F + H_FA x_A). For a convex QP the
    lowest objective among feasible face minimisers is the global optimum,
    so no multiplier test is needed. Bound choices of one free set are
    solved together as a multi-column right-hand side.
    """
    n = len(q)
    best, best_val = None, np.inf
    for mask in range(1 << n):
        F = [i for i in range(n) if mask >> i & 1]
        A = [i for i in range(n) if not mask >> i & 1]
        choice = np.array(list(itertools.product((0, 1), repeat=len(A))), dtype=int).reshape(1 << len(A), len(A))
        XA = np.where(choice == 0, lower[A], upper[A]).T            # (|A|, combos)
        X = np.zeros((n, XA.shape[1]))
        X[A] = XA
        if F:
            rhs = q[F][:, None] + H[np.ix_(F, A)] @ XA
            X[F] = -np.linalg.solve(H[np.ix_(F, F)], rhs)
            ok = np.all((X[F] >= lower[F][:, None] - 1e-12) & (X[F] <= upper[F][:, None] + 1e-12), axis=0)
        else:
            ok = np.ones(X.shape[1], bool)
        if not ok.any():
            continue
        vals = 0.5 * np.einsum("ic,ij,jc->c", X, H, X) + q @ X
        vals[~ok] = np.inf
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best, best_val = X[:, j].copy(), float(vals[j])
    return best, best_val


def box_rows(lower, upper):
    n = len(lower)
    return np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower])


# encoder ---------------------------------------------------------------------

def naive_mlp(x, weights, biases, offset, scale):
    """Scalar-loop forward pass of a ReLU MLP with linear output."""
    h = [(x[i] - offset[i]) / scale[i] for i in range(len(x))]
    for li, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for r in range(W.shape[0]):
            s = b[r]
            for c in range(W.shape[1]):
                s += W[r, c] * h[c]
            out.append(s if li == len(weights) - 1 else max(s, 0.0))
        h = out
    return np.array(h)


# finite differences ----------------------------------------------------------

def central_diff(fun, x, h=1e-5):
    x = np.array(x, float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fun(x)
        x[idx] = old - h
        fm = fun(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


# grasp world -----------------------------------------------------------------

def coulomb_slip_width(width_0, mu, k, F_ext):
    return max(0.0, width_0 - F_ext / (mu * k))


def linear_contact_plant(c0, v, K_c, dt):
    """The baselines' assumed contact model, used as the exact plant."""
    return c0 - K_c * v * dt


def overfit_floor(e0, v_n, dt, N, P_tilde=3.0):
    """Loss left when the embedding cost dominates the plan (alpha -> inf).

    Velocities from step 2 on vanish, so p_2..p_N share one offset x from
    p_slip while p_1 sits halfway: e_1 = (e0 + x)/2 + v_n dt/4. Minimising
    e_1^2 + K x^2 over x gives c^2 K / (K + 1/4).
    """
    c = 0.5 * e0 + 0.25 * v_n * dt
    K = N - 1 + P_tilde
    return c * c * K / (K + 0.25)
