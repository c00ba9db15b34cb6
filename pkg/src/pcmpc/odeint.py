"""Adaptive integration of expanded coefficient dynamics and sensitivities.

Integration restarts at every input breakpoint, so the piecewise-constant
input is exact.  Forward sensitivities with respect to the input
parametrization are propagated simultaneously with the states, sharing the
analytic state Jacobian assembled by the projection; columns belonging to
intervals that have not started yet are known to be zero and are only
activated when their interval begins.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse import csr_matrix


class IntegrationError(RuntimeError):
    """Step-size failure; carries the last accepted time."""

    def __init__(self, message, t_last):
        super().__init__(f"{message} (last accepted time {t_last:g})")
        self.t_last = t_last


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = np.inf
    method: str = "RK45"  # embedded Runge-Kutta 4(5) with dense output

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Trajectory:
    t: np.ndarray  # (n_t,)
    y: np.ndarray  # (n_t, dim)
    nfev: int = 0

    def terminal(self):
        return self.y[-1]

    def to_csv(self, path, column_names=None):
        dim = self.y.shape[1]
        names = column_names or [f"y{i}" for i in range(dim)]
        header = ",".join(["t"] + list(names))
        np.savetxt(
            path,
            np.column_stack([self.t, self.y]),
            delimiter=",",
            header=header,
            comments="",
        )


@dataclass
class SensitivitySolution:
    t: np.ndarray
    y: np.ndarray  # (n_t, dim)
    sens: np.ndarray  # (n_t, dim, n_params)
    nfev: int = 0

    def terminal(self):
        return self.y[-1], self.sens[-1]


def _merge_record(a, b, t_record, span):
    pts = [b]
    if t_record is not None:
        inside = [float(t) for t in t_record if a < t <= b or (t == span[0] == a)]
        pts = sorted(set(inside) | {b})
    return pts


def _solve_segment(rhs, a, b, y0, cfg, t_eval):
    sol = solve_ivp(
        rhs,
        (a, b),
        y0,
        method=cfg.method,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        max_step=cfg.max_step,
        t_eval=t_eval,
    )
    if not sol.success:
        raise IntegrationError(sol.message, sol.t[-1] if sol.t.size else a)
    return sol


def integrate(ode, x0, controls, span, cfg=None, t_record=None):
    """Integrate `ode.rhs(t, x, u)` over `span` under piecewise-constant inputs.

    Returns the accepted-step trajectory, or the trajectory on `t_record`
    (plus all breakpoints) when given.  Breakpoints always restart the
    integrator so input discontinuities never straddle a step.
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = span
    if not (np.isfinite(t0) and np.isfinite(t1)) or t1 <= t0:
        raise ValueError("integration span must be non-degenerate")
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    ts, ys = [t0], [x0.copy()]
    nfev = 0
    y = x0
    for a, b, i in controls.segments(t0, t1):
        u = controls.values[i]
        t_eval = _merge_record(a, b, t_record, (t0, t1)) if t_record is not None else None
        sol = _solve_segment(lambda t, x: ode.rhs(t, x, u), a, b, y, cfg, t_eval)
        nfev += sol.nfev
        keep = sol.t > a
        ts.extend(sol.t[keep].tolist())
        ys.extend(sol.y[:, keep].T)
        y = sol.y[:, -1]
    return Trajectory(t=np.array(ts), y=np.vstack(ys), nfev=nfev)


def integrate_with_sensitivities(ode, x0, controls, span, cfg=None, t_record=None):
    """Propagate states and d x / d pi simultaneously.

    `ode` must expose ``rhs``, ``rhs_and_input_jac`` and ``jacobian_data``
    (the expanded systems do).  The sensitivity block shares the state
    Jacobian across all columns; the column of the interval currently active
    additionally receives the input derivative of the right-hand side.
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = span
    if t1 <= t0:
        raise ValueError("integration span must be non-degenerate")
    x0 = np.asarray(x0, dtype=float)
    dim = x0.shape[0]
    n_pi = controls.n_params
    n_u = controls.n_u

    ode.prepare_jacobian()
    active = []  # flat pi indices, in activation order
    S = np.zeros((dim, 0))
    x = x0.copy()
    ts, xs, ss = [t0], [x0.copy()], [np.zeros((dim, n_pi))]
    nfev = 0
    for a, b, i in controls.segments(t0, t1):
        u = controls.values[i]
        new_cols = [controls.param_index(i, c) for c in range(n_u)
                    if controls.param_index(i, c) not in active]
        if new_cols:
            S = np.hstack([S, np.zeros((dim, len(new_cols)))])
            active.extend(new_cols)
        cur = [(c, active.index(controls.param_index(i, c))) for c in range(n_u)]
        na = len(active)

        def aug_rhs(t, ya):
            xx = ya[:dim]
            SS = ya[dim:].reshape(dim, na)
            f, dfdu = ode.rhs_and_input_jac(t, xx, u)
            indptr, indices, data = ode.jacobian_data(xx, u)
            J = csr_matrix((data, indices, indptr), shape=(dim, dim))
            dS = J @ SS
            for c, pos in cur:
                dS[:, pos] += dfdu[:, c]
            return np.concatenate([f, dS.ravel()])

        y0 = np.concatenate([x, S.ravel()])
        t_eval = _merge_record(a, b, t_record, (t0, t1)) if t_record is not None else [b]
        sol = _solve_segment(aug_rhs, a, b, y0, cfg, t_eval)
        nfev += sol.nfev
        for k in range(sol.t.size):
            if sol.t[k] <= a:
                continue
            full = np.zeros((dim, n_pi))
            full[:, active] = sol.y[dim:, k].reshape(dim, na)
            ts.append(sol.t[k])
            xs.append(sol.y[:dim, k])
            ss.append(full)
        x = sol.y[:dim, -1]
        S = sol.y[dim:, -1].reshape(dim, na)
    return SensitivitySolution(
        t=np.array(ts), y=np.vstack(xs), sens=np.stack(ss), nfev=nfev
    )
