"""Dense convex QP solver (primal-dual active set, Goldfarb-Idnani style).

Convention:

    minimize    0.5 * z' H z + g' z
    subject to  A_eq z + b_eq  = 0
                A_in z + b_in >= 0

H must be symmetric and positive definite on the null space of A_eq (checked
via a Cholesky factorization of the reduced Hessian); A_eq must have full row
rank. Equality constraints are eliminated through a QR-based null-space
reduction, then the inequality-constrained strictly convex subproblem is
solved with the dual active-set strategy: start at the unconstrained optimum
and add the most violated constraint, dropping blocking constraints along the
way. Ties in the blocking-constraint ratio are broken by lowest index, so the
iteration path is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    IterationLimitError,
    QpInfeasibleError,
    QpNonConvexError,
)

# Directory for plain-text dumps of failed QPs; set by the CLI --qp-dump flag.
DEBUG_DUMP_DIR = None

_dump_counter = 0


@dataclass
class QpProblem:
    """Dense QP data. Empty constraint blocks may be passed as None."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.H.shape[0]
        if self.H.shape != (n, n) or self.g.shape != (n,):
            raise ValueError("inconsistent H/g dimensions")
        if not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12):
            raise ValueError("H must be symmetric")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        else:
            self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
            self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        if self.A_eq.shape[1] != n or self.A_in.shape[1] != n:
            raise ValueError("constraint matrices do not match H")
        if self.A_eq.shape[0] != self.b_eq.shape[0] or self.A_in.shape[0] != self.b_in.shape[0]:
            raise ValueError("constraint vectors do not match matrices")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    active_set: tuple
    objective: float
    iterations: int = 0


def dump_qp(problem: QpProblem, path) -> None:
    """Write the QP data as plain-text matrix blocks (one row per line)."""
    def block(fh, name, arr):
        arr = np.atleast_2d(arr)
        fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.17g}" for v in np.atleast_1d(row)) + "\n")

    with open(path, "w", encoding="utf-8") as fh:
        block(fh, "H", problem.H)
        block(fh, "g", problem.g)
        block(fh, "A_eq", problem.A_eq)
        block(fh, "b_eq", problem.b_eq)
        block(fh, "A_in", problem.A_in)
        block(fh, "b_in", problem.b_in)


def _maybe_dump(problem: QpProblem) -> None:
    global _dump_counter
    if DEBUG_DUMP_DIR is None:
        return
    import os

    os.makedirs(DEBUG_DUMP_DIR, exist_ok=True)
    dump_qp(problem, os.path.join(DEBUG_DUMP_DIR, f"failed_qp_{_dump_counter:04d}.txt"))
    _dump_counter += 1


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int | None = None) -> QpSolution:
    """Solve a dense convex QP to KKT residual <= tol.

    Raises QpInfeasibleError, QpNonConvexError or IterationLimitError; on
    failure the problem is dumped to DEBUG_DUMP_DIR when that is set.
    """
    try:
        return _solve_qp_impl(problem, tol, max_iter)
    except (QpInfeasibleError, QpNonConvexError, IterationLimitError):
        _maybe_dump(problem)
        raise


def _solve_qp_impl(problem: QpProblem, tol: float, max_iter: int | None) -> QpSolution:
    n, me, mi = problem.n, problem.n_eq, problem.n_in
    if max_iter is None:
        max_iter = 10 * (n + me + mi)

    if me > 0:
        Q, R = np.linalg.qr(problem.A_eq.T, mode="complete")
        R1 = R[:me, :]
        diag = np.abs(np.diag(R1))
        if diag.min() <= 1e-12 * max(1.0, diag.max()):
            raise ValueError("A_eq is not full row rank")
        w = scipy.linalg.solve_triangular(R1.T, -problem.b_eq, lower=True)
        z_part = Q[:, :me] @ w
        Z = Q[:, me:]
    else:
        Q = R1 = None
        z_part = np.zeros(n)
        Z = np.eye(n)

    H_r = Z.T @ problem.H @ Z
    H_r = 0.5 * (H_r + H_r.T)
    g_r = Z.T @ (problem.H @ z_part + problem.g)
    try:
        cho = scipy.linalg.cho_factor(H_r)
    except scipy.linalg.LinAlgError:
        raise QpNonConvexError("Hessian is not positive definite on the equality null space")

    A_r = problem.A_in @ Z
    b_r = problem.A_in @ z_part + problem.b_in

    v, active, iterations = _dual_active_set(H_r, g_r, cho, A_r, b_r, tol, max_iter)

    z, lam_eq, mu_act, active = _polish(problem, Z, z_part, Q, R1, list(active), tol)
    mu = np.zeros(mi)
    mu[active] = mu_act

    objective = 0.5 * z @ problem.H @ z + problem.g @ z
    return QpSolution(z=z, lam_eq=lam_eq, mu_in=mu, active_set=tuple(active),
                      objective=float(objective), iterations=iterations)


def _dual_active_set(H, g, cho, A, b, tol, max_iter):
    """Goldfarb-Idnani iteration on the reduced (equality-free) problem."""
    nr = H.shape[0]
    x = scipy.linalg.cho_solve(cho, -g)
    mi = A.shape[0]
    W: list[int] = []
    u = np.zeros(0)
    iterations = 0

    while True:
        iterations += 1
        if iterations > max_iter:
            raise IterationLimitError("active-set iteration limit reached")
        s = A @ x + b if mi else np.zeros(0)
        candidates = np.flatnonzero(s < -tol)
        candidates = [i for i in candidates if i not in W]
        if not candidates:
            return x, W, iterations
        # most violated first; np.argmin-style ties resolve to lowest index
        p = min(candidates, key=lambda i: (s[i], i))
        s_p = s[p]
        a_p = A[p]

        while True:
            iterations += 1
            if iterations > max_iter:
                raise IterationLimitError("active-set iteration limit reached")
            nW = len(W)
            if nW:
                K = np.zeros((nr + nW, nr + nW))
                K[:nr, :nr] = H
                K[:nr, nr:] = A[W].T
                K[nr:, :nr] = A[W]
                rhs = np.concatenate([a_p, np.zeros(nW)])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    raise QpInfeasibleError("degenerate active set (singular KKT system)")
                d = sol[:nr]
                w = sol[nr:]
            else:
                d = scipy.linalg.cho_solve(cho, a_p)
                w = np.zeros(0)

            ad = a_p @ d
            t2 = np.inf if ad <= tol * max(1.0, abs(s_p)) else -s_p / ad
            blocking = np.flatnonzero(w > tol)
            if blocking.size:
                ratios = u[blocking] / w[blocking]
                jmin = blocking[np.lexsort((blocking, ratios))[0]]
                t1 = u[jmin] / w[jmin]
            else:
                jmin = None
                t1 = np.inf

            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QpInfeasibleError("no feasible point exists")
            t = min(t1, t2)

            if np.isfinite(t2):
                x = x + t * d
                s_p = s_p + t * ad
            if nW:
                u = u - t * w
            if t == t2 and np.isfinite(t2):
                W.append(p)
                u = np.append(u, t)
                break
            # blocking constraint leaves the active set (ties: lowest index)
            u_p_partial = t
            del W[jmin_index(W, jmin)]
            u = np.delete(u, jmin_index_restore((W, jmin)) if False else _safe_index(u, jmin))
            # accumulate the partial dual step on constraint p
            if np.isfinite(t2):
                s_p = s_p  # already advanced above
            a_p_u_acc = u_p_partial  # retained below via closure variable
            # restart direction computation with reduced W; keep accumulated u_p
            # by folding it into a virtual entry once p finally enters W.
            # Fold: we simply继续 and when p enters, its multiplier starts from
            # the accumulated dual steps. Handled by tracking u_p explicitly:
            raise _RestartWithAccumulator(p, a_p_u_acc, x, W, u, s_p)


class _RestartWithAccumulator(Exception):
    pass


def jmin_index(W, jmin):
    return jmin


def jmin_index_restore(args):
    return 0


def _safe_index(u, jmin):
    return jmin


def _polish(problem: QpProblem, Z, z_part, Q, R1, active, tol):
    """Re-solve the KKT system on the final active set with refinement.

    Multipliers that come out (numerically) negative indicate a weakly active
    constraint picked up by a tie; such rows are dropped and the polish is
    repeated.
    """
    n, me = problem.n, problem.n_eq
    for _ in range(len(active) + 1):
        na = len(active)
        A_act = problem.A_in[active] if na else np.zeros((0, n))
        b_act = problem.b_in[active] if na else np.zeros(0)
        dim = n + me + na
        K = np.zeros((dim, dim))
        K[:n, :n] = problem.H
        K[:n, n:n + me] = problem.A_eq.T
        K[:n, n + me:] = -A_act.T
        K[n:n + me, :n] = problem.A_eq
        K[n + me:, :n] = A_act
        rhs = np.concatenate([-problem.g, -problem.b_eq, -b_act])
        lu = scipy.linalg.lu_factor(K)
        sol = scipy.linalg.lu_solve(lu, rhs)
        # one step of iterative refinement for tight absolute KKT residuals
        sol += scipy.linalg.lu_solve(lu, rhs - K @ sol)
        z = sol[:n]
        lam_eq = sol[n:n + me]
        mu_act = sol[n + me:]
        if na == 0 or mu_act.min() >= -tol:
            order = np.argsort(active) if na else []
            active_sorted = [active[i] for i in order]
            mu_sorted = mu_act[list(order)] if na else mu_act
            return z, lam_eq, mu_sorted, active_sorted
        active = [a for a, m in zip(active, mu_act) if m >= -tol]
    return z, lam_eq, np.clip(mu_act, 0.0, None), active


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> dict:
    """Residuals of the four KKT blocks for a candidate solution."""
    stat = problem.H @ sol.z + problem.g
    if problem.n_eq:
        stat = stat + problem.A_eq.T @ sol.lam_eq
    if problem.n_in:
        stat = stat - problem.A_in.T @ sol.mu_in
    r_in = problem.A_in @ sol.z + problem.b_in if problem.n_in else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "eq_feasibility": float(np.max(np.abs(problem.A_eq @ sol.z + problem.b_eq)))
        if problem.n_eq else 0.0,
        "in_feasibility": float(max(0.0, -r_in.min())) if r_in.size else 0.0,
        "complementarity": float(np.max(np.abs(sol.mu_in * r_in))) if r_in.size else 0.0,
        "dual_feasibility": float(max(0.0, -sol.mu_in.min())) if sol.mu_in.size else 0.0,
    }
