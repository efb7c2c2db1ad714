"""Dense convex QP solvers.

Problems have the form::

    minimize    1/2 x^T H x + q^T x
    subject to  lower <= x <= upper,   C x <= b

``solve_unconstrained`` is a Cholesky solve. ``solve_box`` is a dual
active-set method (Goldfarb & Idnani): it starts at the unconstrained
minimizer, adds the most violated constraint each outer iteration and keeps
dual feasibility throughout, so no feasible starting point is needed and an
infeasible constraint set is detected rather than cycled on.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


class QPError(RuntimeError):
    pass


class NotPositiveDefinite(QPError):
    """Cholesky factorization of the Hessian failed."""


class InfeasibleQP(QPError):
    pass


class NotConverged(QPError):
    def __init__(self, msg, best_residual):
        super().__init__(msg)
        self.best_residual = best_residual


@dataclass
class DenseQP:
    H: np.ndarray
    q: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    C: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        scale = max(1.0, np.abs(self.H).max(initial=0.0))
        if np.abs(self.H - self.H.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("H is not symmetric")
        if self.lower is not None:
            self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        if self.upper is not None:
            self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if (self.C is None) != (self.b is None):
            raise ValueError("C and b must be given together")
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
            self.b = np.asarray(self.b, dtype=float).reshape(-1)
            if self.C.shape != (self.b.shape[0], n):
                raise ValueError("C and b shapes disagree")

    @property
    def n(self):
        return self.q.shape[0]

    def objective(self, x):
        return 0.5 * x @ self.H @ x + self.q @ x

    def inequality_rows(self):
        """Stack bounds and affine rows into G x <= h; returns (G, h, kinds).

        ``kinds`` holds ("upper", i), ("lower", i) or ("row", j) per row.
        Infinite bounds are skipped.
        """
        n = self.n
        rows, rhs, kinds = [], [], []
        eye = np.eye(n)
        if self.upper is not None:
            for i in np.flatnonzero(np.isfinite(self.upper)):
                rows.append(eye[i])
                rhs.append(self.upper[i])
                kinds.append(("upper", int(i)))
        if self.lower is not None:
            for i in np.flatnonzero(np.isfinite(self.lower)):
                rows.append(-eye[i])
                rhs.append(-self.lower[i])
                kinds.append(("lower", int(i)))
        if self.C is not None:
            for j in range(self.C.shape[0]):
                if np.isfinite(self.b[j]):
                    rows.append(self.C[j])
                    rhs.append(self.b[j])
                    kinds.append(("row", j))
        if not rows:
            return np.zeros((0, n)), np.zeros(0), kinds
        return np.array(rows), np.array(rhs), kinds


@dataclass
class QPSolution:
    x: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray
    lam_rows: np.ndarray
    kkt_residual: float
    iterations: int
    active: list = field(default_factory=list)

    @property
    def multipliers(self):
        return {"lower": self.lam_lower, "upper": self.lam_upper, "rows": self.lam_rows}


def _factor(H):
    try:
        return cho_factor(H, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise NotPositiveDefinite(f"Hessian is not positive definite: {exc}") from None


def kkt_residual(H, q, x, G, h, lam):
    """Infinity norm of stationarity, primal/dual feasibility and complementarity."""
    stat = H @ x + q
    parts = [np.abs(stat + G.T @ lam).max(initial=0.0) if G.size else np.abs(stat).max(initial=0.0)]
    if G.size:
        slack = G @ x - h
        parts.append(max(0.0, slack.max()))
        parts.append(max(0.0, -lam.min()))
        parts.append(np.abs(lam * slack).max())
    return float(max(parts))


def solve_unconstrained(H, q):
    H = np.asarray(H, dtype=float)
    q = np.asarray(q, dtype=float)
    factor = _factor(H)
    x = cho_solve(factor, -q)
    n = q.shape[0]
    res = float(np.abs(H @ x + q).max(initial=0.0))
    return QPSolution(x, np.zeros(n), np.zeros(n), np.zeros(0), res, 0)


def _split_multipliers(lam, kinds, n, m_rows):
    lam_lower, lam_upper, lam_rows = np.zeros(n), np.zeros(n), np.zeros(m_rows)
    for value, (kind, i) in zip(lam, kinds):
        if kind == "upper":
            lam_upper[i] = value
        elif kind == "lower":
            lam_lower[i] = value
        else:
            lam_rows[i] = value
    return lam_lower, lam_upper, lam_rows


def solve_box(H, q=None, lower=None, upper=None, C=None, b=None, max_iter=None, tol=1e-7):
    """Minimize 1/2 x'Hx + q'x subject to bounds and C x <= b.

    Raises
    ------
    NotPositiveDefinite
        If H cannot be Cholesky factored.
    InfeasibleQP
        If the constraint set is empty.
    NotConverged
        If the iteration cap is hit; carries the best KKT residual seen.
    """
    prob = H if isinstance(H, DenseQP) else DenseQP(H, q, lower, upper, C, b)
    H, q, n = prob.H, prob.q, prob.n
    G, h, kinds = prob.inequality_rows()
    m = G.shape[0]
    m_rows = 0 if prob.C is None else prob.C.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + m) + 20

    factor = _factor(H)
    x = cho_solve(factor, -q)
    if m == 0:
        res = float(np.abs(H @ x + q).max(initial=0.0))
        return QPSolution(x, np.zeros(n), np.zeros(n), np.zeros(0), res, 0)

    W = cho_solve(factor, G.T)  # H^-1 G^T, one column per constraint
    row_scale = np.maximum(1.0, np.abs(G).max(axis=1))
    feas_tol = 1e-12 * np.maximum(1.0, np.abs(h))
    active = []
    lam = np.zeros(m)
    iterations = 0

    while True:
        viol = (G @ x - h) / row_scale
        viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] * row_scale[p] <= feas_tol[p]:
            break
        lam_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                lam_full = lam.copy()
                lam_full[p] = lam_p
                best = kkt_residual(H, q, x, G, h, lam_full)
                raise NotConverged(f"active-set iteration cap {max_iter} reached", best)
            gp = G[p]
            if active:
                GA = G[active]
                Mact = GA @ W[:, active]
                r = np.linalg.solve(Mact, GA @ W[:, p])
                z = -(W[:, p] - W[:, active] @ r)
            else:
                r = np.zeros(0)
                z = -W[:, p]
            curv = -gp @ z
            # z vanishes when gp lies in the span of the active rows
            primal_ok = curv > 1e-13 * max(gp @ W[:, p], 1e-300)

            t_dual, k_drop = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    tj = lam[active[j]] / rj
                    if tj < t_dual:
                        t_dual, k_drop = tj, j
            t_primal = (gp @ x - h[p]) / curv if primal_ok else np.inf

            if not primal_ok and not np.isfinite(t_dual):
                raise InfeasibleQP(f"constraint set is infeasible (row {kinds[p]})")
            t = min(t_dual, t_primal)
            if primal_ok:
                x = x + t * z
            for j, rj in enumerate(r):
                lam[active[j]] -= t * rj
            lam_p += t
            if primal_ok and t_primal <= t_dual:
                active.append(p)
                lam[p] = lam_p
                break
            dropped = active.pop(k_drop)
            lam[dropped] = 0.0

    # polish on the final active set
    if active:
        GA = G[active]
        k = len(active)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = GA.T
        K[n:, :n] = GA
        rhs = np.concatenate([-q, h[active]])
        try:
            sol = np.linalg.solve(K, rhs)
            x_pol, lam_pol = sol[:n], sol[n:]
            if np.all(lam_pol >= -1e-12 * max(1.0, np.abs(lam_pol).max())):
                lam_try = np.zeros(m)
                lam_try[active] = np.maximum(lam_pol, 0.0)
                if kkt_residual(H, q, x_pol, G, h, lam_try) <= kkt_residual(H, q, x, G, h, lam):
                    x, lam = x_pol, lam_try
        except np.linalg.LinAlgError:
            pass

    res = kkt_residual(H, q, x, G, h, lam)
    lam_lower, lam_upper, lam_rows = _split_multipliers(lam, kinds, n, m_rows)
    return QPSolution(x, lam_lower, lam_upper, lam_rows, res, iterations,
                      [kinds[i] for i in active])


def solve(problem):
    """Dispatch a DenseQP to the unconstrained or constrained solver."""
    has_bounds = any(
        v is not None and np.any(np.isfinite(v)) for v in (problem.lower, problem.upper)
    )
    if not has_bounds and problem.C is None:
        return solve_unconstrained(problem.H, problem.q)
    return solve_box(problem)


def solve_batch(problems):
    """Solve each problem independently, in order.

    Failures are returned in place (as the exception instance) so one bad
    problem does not abort the batch.
    """
    out = []
    for prob in problems:
        try:
            out.append(solve(prob))
        except (QPError, ValueError) as exc:
            out.append(exc)
    return out
