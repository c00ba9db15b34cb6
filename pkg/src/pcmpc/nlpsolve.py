"""Dense SQP solver for small smooth constrained problems.

Sequential quadratic programming with a damped BFGS Hessian, a dual
active-set solver for the inequality-constrained subproblems, and an L1
merit line search.  Sized for a few dozen decision variables; everything is
dense and re-factorized per iteration.
"""

from dataclasses import dataclass, field

import numpy as np

_QP_TOL = 1e-10


class QpInfeasibleError(RuntimeError):
    pass


@dataclass
class NlpProblem:
    """Inequality-constrained problem: min f(x) s.t. c(x) <= 0, lb <= x <= ub.

    `objective(x)` returns (value, gradient); `constraints(x)` returns
    (values, jacobian) or may be None for bound-only problems.  When value
    and gradient differ greatly in cost, `objective_value` and
    `constraints_value` may be supplied; the line search then only pays for
    values and full evaluations happen once per accepted step.
    """

    n: int
    objective: object
    constraints: object = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    objective_value: object = None
    constraints_value: object = None

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.full(self.n, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.n, np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")


@dataclass
class SolveOptions:
    max_iter: int = 200
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-8
    armijo: float = 0.1
    backtrack: float = 0.5
    min_step: float = 1e-12
    check_gradients: bool = False
    log: list = None


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    kkt_residual: float
    constraint_violation: float
    iterations: int
    status: str
    multipliers: np.ndarray = None


def solve_qp(H, g, A, b, max_iter=500):
    """Dual active-set solution of min 1/2 d'Hd + g'd s.t. A d <= b.

    H must be positive definite.  Starts from the unconstrained minimizer
    and adds violated constraints one at a time, keeping dual feasibility;
    ties break toward the smallest constraint index to avoid cycling.
    Raises QpInfeasibleError when no feasible point exists.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    A = np.zeros((0, n)) if A is None or len(A) == 0 else np.asarray(A, dtype=float)
    b = np.zeros(0) if A.shape[0] == 0 else np.asarray(b, dtype=float)
    m = A.shape[0]
    Hinv = np.linalg.inv(H)
    x = -Hinv @ g
    W = []
    lam_w = np.zeros(0)
    for _ in range(max_iter):
        s = A @ x - b if m else np.zeros(0)
        viol = np.where(s > _QP_TOL * (1.0 + np.abs(b)))[0]
        if viol.size == 0:
            lam = np.zeros(m)
            lam[W] = lam_w
            return x, lam
        p = int(viol[np.argmax(s[viol])])
        a_p = A[p]
        while True:
            if W:
                N = A[W].T  # (n, |W|)
                BN = Hinv @ N
                G = N.T @ BN
                try:
                    r = np.linalg.solve(G, BN.T @ a_p)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(G, BN.T @ a_p, rcond=None)[0]
                z = Hinv @ a_p - BN @ r
            else:
                r = np.zeros(0)
                z = Hinv @ a_p
            z_dot = a_p @ z
            # dual blocking step
            t1 = np.inf
            k_block = -1
            for i, k in enumerate(W):
                if r[i] > _QP_TOL:
                    tk = lam_w[i] / r[i]
                    if tk < t1 - _QP_TOL or (abs(tk - t1) <= _QP_TOL and k < k_block):
                        t1, k_block = tk, k
            t2 = (a_p @ x - b[p]) / z_dot if z_dot > _QP_TOL else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QpInfeasibleError("QP constraints are inconsistent")
            t = min(t1, t2)
            if np.isfinite(t2) and t2 <= t1:
                x = x - t2 * z
                lam_w = lam_w - t2 * r
                W.append(p)
                lam_w = np.append(lam_w, t2)
                break
            # drop the blocking constraint and retry adding p
            x = x - t1 * z
            lam_w = lam_w - t1 * r
            idx = W.index(k_block)
            W.pop(idx)
            lam_w = np.delete(lam_w, idx)
    raise QpInfeasibleError("active-set iteration limit reached")


def _assemble_rows(problem, x, c, J):
    """All inequality rows A d <= b at the current point (bounds included)."""
    n = problem.n
    rows, rhs, is_nl = [], [], []
    if c is not None and c.size:
        rows.append(J)
        rhs.append(-c)
        is_nl.append(np.ones(c.size, dtype=bool))
    fin_u = np.isfinite(problem.upper)
    if fin_u.any():
        rows.append(np.eye(n)[fin_u])
        rhs.append(problem.upper[fin_u] - x[fin_u])
        is_nl.append(np.zeros(int(fin_u.sum()), dtype=bool))
    fin_l = np.isfinite(problem.lower)
    if fin_l.any():
        rows.append(-np.eye(n)[fin_l])
        rhs.append(x[fin_l] - problem.lower[fin_l])
        is_nl.append(np.zeros(int(fin_l.sum()), dtype=bool))
    if not rows:
        return np.zeros((0, n)), np.zeros(0), np.zeros(0, dtype=bool)
    return np.vstack(rows), np.concatenate(rhs), np.concatenate(is_nl)


def _check_gradients(problem, x0):
    f0, g0 = problem.objective(x0)
    h = 1e-6
    for j in range(problem.n):
        e = np.zeros(problem.n)
        e[j] = h
        fp = problem.objective(x0 + e)[0]
        fm = problem.objective(x0 - e)[0]
        fd = (fp - fm) / (2 * h)
        if abs(fd - g0[j]) > 1e-4 * max(1.0, abs(fd)):
            raise AssertionError(
                f"objective gradient component {j}: callback {g0[j]:.6e} "
                f"vs finite difference {fd:.6e}"
            )
    if problem.constraints is not None:
        c0, J0 = problem.constraints(x0)
        for j in range(problem.n):
            e = np.zeros(problem.n)
            e[j] = h
            cp = problem.constraints(x0 + e)[0]
            cm = problem.constraints(x0 - e)[0]
            fd = (cp - cm) / (2 * h)
            bad = np.abs(fd - J0[:, j]) > 1e-4 * np.maximum(1.0, np.abs(fd))
            if bad.any():
                i = int(np.argmax(bad))
                raise AssertionError(
                    f"constraint {i} jacobian column {j}: callback "
                    f"{J0[i, j]:.6e} vs finite difference {fd[i]:.6e}"
                )


def solve(problem, x0, opts=None):
    """SQP iteration: damped BFGS, active-set QP steps, L1 merit line search."""
    opts = opts or SolveOptions()
    x = np.asarray(x0, dtype=float).copy()
    if np.any(x < problem.lower - 1e-12) or np.any(x > problem.upper + 1e-12):
        raise ValueError("starting point violates the bounds")
    x = np.clip(x, problem.lower, problem.upper)
    if opts.check_gradients:
        _check_gradients(problem, x)

    n = problem.n
    H = np.eye(n)
    mu = 1.0

    def evaluate(xx):
        f, gf = problem.objective(xx)
        if problem.constraints is not None:
            c, J = problem.constraints(xx)
            c = np.atleast_1d(np.asarray(c, dtype=float))
            J = np.atleast_2d(np.asarray(J, dtype=float))
        else:
            c, J = np.zeros(0), np.zeros((0, n))
        return float(f), np.asarray(gf, dtype=float), c, J

    def evaluate_values(xx):
        if problem.objective_value is not None:
            f = problem.objective_value(xx)
        else:
            f = problem.objective(xx)[0]
        if problem.constraints is None:
            return float(f), np.zeros(0)
        if problem.constraints_value is not None:
            c = problem.constraints_value(xx)
        else:
            c = problem.constraints(xx)[0]
        return float(f), np.atleast_1d(np.asarray(c, dtype=float))

    def merit(f, c):
        return f + mu * float(np.sum(np.maximum(c, 0.0)))

    f, gf, c, J = evaluate(x)
    lam_nl = np.zeros(c.shape[0])
    status = "max-iter"
    kkt = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        A, b, is_nl = _assemble_rows(problem, x, c, J)
        try:
            d, lam = solve_qp(H, gf, A, b)
        except QpInfeasibleError:
            relaxed = False
            for kappa in (0.9, 0.5, 0.0):
                b_rel = b.copy()
                neg = (b < 0) & is_nl
                b_rel[neg] = kappa * b[neg]
                try:
                    d, lam = solve_qp(H, gf, A, b_rel)
                    relaxed = True
                    break
                except QpInfeasibleError:
                    continue
            if not relaxed:
                status = "infeasible"
                break
        lam_nl = lam[: c.shape[0]] if c.size else np.zeros(0)
        viol = float(np.max(np.maximum(c, 0.0), initial=0.0))
        stat = float(np.max(np.abs(gf + A.T @ lam), initial=0.0)) if A.size else float(
            np.max(np.abs(gf), initial=0.0)
        )
        compl = float(np.max(lam_nl * np.abs(c), initial=0.0)) if c.size else 0.0
        kkt = max(stat, compl)
        if opts.log is not None:
            opts.log.append((it, f, kkt, viol, float(np.linalg.norm(d))))
        if kkt <= opts.kkt_tol and viol <= opts.feas_tol:
            status = "converged"
            break
        if np.linalg.norm(d) <= 1e-14:
            status = "converged" if viol <= opts.feas_tol else "infeasible"
            break

        mu = max(mu, 1.1 * float(np.max(np.abs(lam), initial=0.0)) + 1e-3)
        phi0 = merit(f, c)
        slope = min(float(gf @ d) - mu * float(np.sum(np.maximum(c, 0.0))), 0.0)
        alpha = 1.0
        accepted = False
        while alpha >= opts.min_step:
            x_try = x + alpha * d
            f_v, c_v = evaluate_values(x_try)
            if merit(f_v, c_v) <= phi0 + opts.armijo * alpha * slope + 1e-14:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            status = "line-search-failure"
            break
        f_t, gf_t, c_t, J_t = evaluate(x_try)

        # damped BFGS update on the Lagrangian gradient
        gl_old = gf + (J.T @ lam_nl if c.size else 0.0)
        gl_new = gf_t + (J_t.T @ lam_nl if c_t.size else 0.0)
        s = x_try - x
        yv = gl_new - gl_old
        Hs = H @ s
        sHs = float(s @ Hs)
        sy = float(s @ yv)
        if sHs > 1e-16:
            if sy < 0.2 * sHs:
                theta = 0.8 * sHs / (sHs - sy)
                yv = theta * yv + (1.0 - theta) * Hs
                sy = float(s @ yv)
            if sy > 1e-12 * sHs:
                H = H - np.outer(Hs, Hs) / sHs + np.outer(yv, yv) / sy
                H = 0.5 * (H + H.T)
        x, f, gf, c, J = x_try, f_t, gf_t, c_t, J_t

    viol = float(np.max(np.maximum(c, 0.0), initial=0.0))
    return SolveReport(
        x=x,
        objective=f,
        kkt_residual=kkt if it else np.inf,
        constraint_violation=viol,
        iterations=it,
        status=status,
        multipliers=lam_nl,
    )
