"""Stochastic optimal control assembly and closed-loop simulation.

Each horizon becomes a dense NLP over the piecewise-constant input values:
the objective is a moment-based cost of the terminal coefficients, the joint
chance constraint enters through the tightened level and the smooth
piecewise-CDF probability estimate (whose analytic gradient chains through
the forward sensitivities), and input bounds and rate limits are linear
rows.  Decision variables are scaled to the unit box before the solver sees
them.  The closed loop applies the first interval of every solution to the
unexpanded plant, perturbs the measured state with the declared noise, and
reprojects the initial conditions.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .basis import SampleMatrix
from .ccgrad import CcgradConfig, gradient, smooth_probability
from .chance import estimate_probability, feasibility_report, tighten
from .controls import ControlParam
from .nlpsolve import NlpProblem, SolveOptions, solve
from .odeint import IntegratorConfig, integrate, integrate_with_sensitivities


@dataclass
class OcpSpec:
    """One finite-horizon stochastic optimal control problem instance.

    `constraint_blocks` lists (state index, time) pairs; the coefficient
    block of each pair, in order, is what the ConstraintSet's terms
    reference.  A tightening of None switches to deterministic constraints
    on the mean-tracking coefficients (nominal control).
    """

    ode: object
    horizon: tuple
    controls: ControlParam
    objective: object
    x0: np.ndarray
    constraints: object = None
    constraint_blocks: tuple = ()
    tightening: object = None
    n_samples: int = 5000
    sample_seed: int = 20260811
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    ccgrad: CcgradConfig = field(default_factory=CcgradConfig)

    def __post_init__(self):
        t0, tf = self.horizon
        for _, t in self.constraint_blocks:
            if not (t0 <= t <= tf):
                raise ValueError(f"constraint time {t} outside horizon [{t0}, {tf}]")


class _Scaler:
    """Affine map between physical inputs and the solver's unit box."""

    def __init__(self, lower, upper):
        span = upper - lower
        ok = np.isfinite(span) & (span > 0)
        self.scale = np.where(ok, span, 1.0)
        self.offset = np.where(np.isfinite(lower), lower, 0.0)
        self.z_lower = np.where(ok, 0.0, -np.inf)
        self.z_upper = np.where(ok, 1.0, np.inf)

    def to_phys(self, z):
        return self.offset + self.scale * z

    def to_z(self, pi):
        return (pi - self.offset) / self.scale


class _OcpWorkspace:
    """Shared integrations and sample cache behind the NLP callbacks."""

    def __init__(self, spec):
        self.spec = spec
        self.record_times = sorted({t for _, t in spec.constraint_blocks}
                                   | {spec.horizon[1]})
        self.samples = (
            SampleMatrix.generate(spec.ode.basis, spec.n_samples, spec.sample_seed)
            if spec.tightening is not None
            else None
        )
        self._values = {}
        self._fulls = {}
        self.n_discarded = 0
        self.nfev_value = 0
        self.nfev_full = 0

    def _trim(self):
        for cache in (self._values, self._fulls):
            if len(cache) > 40:
                cache.clear()

    def value_data(self, pi_flat):
        key = pi_flat.tobytes()
        if key in self._fulls:
            d = self._fulls[key]
            return {"states": d["states"]}
        if key not in self._values:
            self._trim()
            ctrl = self.spec.controls.with_flat(pi_flat)
            traj = integrate(
                self.spec.ode, self.spec.x0, ctrl, self.spec.horizon,
                self.spec.integrator, t_record=self.record_times,
            )
            states = {
                t: traj.y[int(np.flatnonzero(np.isclose(traj.t, t))[0])]
                for t in self.record_times
            }
            self.nfev_value += traj.nfev
            self._values[key] = {"states": states}
        return self._values[key]

    def full_data(self, pi_flat):
        key = pi_flat.tobytes()
        if key not in self._fulls:
            self._trim()
            ctrl = self.spec.controls.with_flat(pi_flat)
            sol = integrate_with_sensitivities(
                self.spec.ode, self.spec.x0, ctrl, self.spec.horizon,
                self.spec.integrator, t_record=self.record_times,
            )
            states, sens = {}, {}
            for t in self.record_times:
                k = int(np.flatnonzero(np.isclose(sol.t, t))[0])
                states[t] = sol.y[k]
                sens[t] = sol.sens[k]
            self.nfev_full += sol.nfev
            self._fulls[key] = {"states": states, "sens": sens}
        return self._fulls[key]

    def blocks(self, states):
        nt = self.spec.ode.n_terms
        out = []
        for s, t in self.spec.constraint_blocks:
            out.append(states[t][s * nt : (s + 1) * nt])
        return out

    def block_sens(self, sens):
        nt = self.spec.ode.n_terms
        return {
            i: sens[t][s * nt : (s + 1) * nt, :]
            for i, (s, t) in enumerate(self.spec.constraint_blocks)
        }


def assemble(spec):
    """Build the scaled NlpProblem for one horizon; returns (problem, workspace)."""
    ws = _OcpWorkspace(spec)
    ctrl = spec.controls
    scaler = _Scaler(*ctrl.bounds())
    tf = spec.horizon[1]
    A_rate, b_rate = ctrl.rate_inequalities()
    if A_rate.size:
        A_rate_z = A_rate * scaler.scale
        b_rate_z = b_rate - A_rate @ scaler.offset
    else:
        A_rate_z, b_rate_z = np.zeros((0, ctrl.n_params)), np.zeros(0)
    n_chance = 0 if spec.constraints is None else (
        1 if spec.tightening is not None else spec.constraints.n_g
    )

    def objective(z):
        pi = scaler.to_phys(z)
        d = ws.full_data(pi)
        value, dv_dxT = spec.objective.value_and_grad(d["states"][tf], spec.x0)
        g_pi = dv_dxT @ d["sens"][tf]
        return -value, -(g_pi * scaler.scale)

    def objective_value(z):
        pi = scaler.to_phys(z)
        d = ws.value_data(pi)
        return -spec.objective.value_and_grad(d["states"][tf], spec.x0)[0]

    def constraints(z):
        pi = scaler.to_phys(z)
        lin = A_rate_z @ z - b_rate_z
        if n_chance == 0:
            return lin, A_rate_z
        d = ws.full_data(pi)
        blocks = ws.blocks(d["states"])
        bsens = ws.block_sens(d["sens"])
        if spec.tightening is not None:
            res = gradient(spec.constraints, blocks, ws.samples, sens=bsens,
                           cfg=spec.ccgrad)
            ws.n_discarded = res.n_discarded
            c = np.concatenate([lin, [spec.tightening.beta_cor - res.p_smooth]])
            J = np.vstack([A_rate_z, -(res.dp_dpi * scaler.scale)[None, :]])
            return c, J
        rows = spec.constraints.coeff_matrix(blocks)[:, 0]
        jac = np.zeros((spec.constraints.n_g, ctrl.n_params))
        for i, con in enumerate(spec.constraints.constraints):
            for b, scale_w in con.terms:
                jac[i] += scale_w * bsens[b][0, :]
        return (
            np.concatenate([lin, rows]),
            np.vstack([A_rate_z, jac * scaler.scale]),
        )

    def constraints_value(z):
        pi = scaler.to_phys(z)
        lin = A_rate_z @ z - b_rate_z
        if n_chance == 0:
            return lin
        d = ws.value_data(pi)
        blocks = ws.blocks(d["states"])
        if spec.tightening is not None:
            p = smooth_probability(spec.constraints, blocks, ws.samples,
                                   cfg=spec.ccgrad)
            return np.concatenate([lin, [spec.tightening.beta_cor - p]])
        return np.concatenate(
            [lin, spec.constraints.coeff_matrix(blocks)[:, 0]]
        )

    problem = NlpProblem(
        n=ctrl.n_params,
        objective=objective,
        constraints=constraints,
        lower=scaler.z_lower,
        upper=scaler.z_upper,
        objective_value=objective_value,
        constraints_value=constraints_value,
    )
    return problem, ws, scaler


@dataclass
class HorizonResult:
    controls: ControlParam
    report: object
    feasibility: object
    p_hat: float
    n_discarded: int
    solve_time: float


def solve_horizon(spec, opts=None):
    """Solve one horizon; attaches the sampled-feasibility statement."""
    t0, tf = spec.horizon
    if tf <= t0 or spec.controls.n_intervals == 0:
        empty = ControlParam(
            breakpoints=np.array([t0]),
            values=np.zeros((0, spec.controls.n_u)),
            lower=spec.controls.lower,
            upper=spec.controls.upper,
        )
        return HorizonResult(controls=empty, report=None, feasibility=None,
                             p_hat=np.nan, n_discarded=0, solve_time=0.0)
    started = time.time()
    problem, ws, scaler = assemble(spec)
    opts = opts or SolveOptions(max_iter=60)
    z0 = scaler.to_z(spec.controls.flat)
    report = solve(problem, np.clip(z0, scaler.z_lower, scaler.z_upper), opts)
    pi_star = scaler.to_phys(report.x)
    ctrl_star = spec.controls.with_flat(pi_star)
    feas, p_hat = None, np.nan
    if spec.tightening is not None:
        d = ws.value_data(pi_star)
        blocks = ws.blocks(d["states"])
        feas = feasibility_report(spec.constraints, blocks, spec.tightening,
                                  ws.samples)
        p_hat = feas.p_hat
    return HorizonResult(
        controls=ctrl_star,
        report=report,
        feasibility=feas,
        p_hat=p_hat,
        n_discarded=ws.n_discarded,
        solve_time=time.time() - started,
    )


@dataclass
class ClosedLoopTemplate:
    """Everything the closed loop needs about one benchmark problem."""

    ode: object
    basis: object
    objective: object
    constraints: object
    constraint_states: tuple
    t_final: float
    sampling_times: np.ndarray
    x_initial: np.ndarray
    u_init: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    rate_limits: dict
    plant_rhs: object
    draw_params: object
    initial_coeffs: object  # (means, stds or None) -> coefficient vector
    plant_dim: int
    terminal_violations: object = None  # x_final -> dict of named flags
    realized_profit: object = None  # (x_initial, x_final) -> float


@dataclass
class ClosedLoopConfig:
    mode: str = "shrinking"
    n_runs: int = 1
    master_seed: int = 0
    nominal: bool = False
    beta: float = 0.98
    alpha: float = 0.01
    n_samples: int = 5000
    sample_seed: int = 20260811
    noise_std_rel: float = 0.01
    exact_initial_state: bool = True
    horizon_length: float = None
    ocp_rel_tol: float = 1e-6
    ocp_abs_tol: float = 1e-8
    max_sqp_iter: int = 60
    n_workers: int = 1

    def __post_init__(self):
        if self.mode not in ("shrinking", "receding"):
            raise ValueError(f"unknown closed-loop mode {self.mode!r}")
        if self.mode == "receding" and not self.horizon_length:
            raise ValueError("receding mode needs a horizon length")


@dataclass
class HorizonRecord:
    t_k: float
    status: str
    iterations: int
    objective: float
    p_hat: float
    n_discarded: int
    solve_time: float
    applied_u: np.ndarray


@dataclass
class RunRecord:
    run_index: int
    t: np.ndarray
    plant_states: np.ndarray  # (n_t, plant_dim)
    horizons: list
    terminal_state: np.ndarray
    profit: float
    violations: dict
    violated: bool
    failed_horizons: int
    plant_params: np.ndarray


def _shift_and_hold(values):
    if values.shape[0] == 1:
        return values.copy()
    return np.vstack([values[1:], values[-1:]])


def run_closed_loop_single(template, cfg, run_index):
    """One closed-loop batch: solve, apply, measure, reproject, repeat."""
    ss = np.random.SeedSequence((cfg.master_seed, run_index))
    plant_rng, noise_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    params = template.draw_params(plant_rng)
    tight = None if cfg.nominal else tighten(cfg.beta, cfg.alpha, cfg.n_samples)
    ocp_cfg = IntegratorConfig(rel_tol=cfg.ocp_rel_tol, abs_tol=cfg.ocp_abs_tol)
    sampling = np.asarray(template.sampling_times, dtype=float)

    x_plant = template.x_initial.copy()
    if cfg.exact_initial_state:
        coeffs = template.initial_coeffs(x_plant, None)
    else:
        measured = x_plant * (1.0 + cfg.noise_std_rel
                              * noise_rng.standard_normal(template.plant_dim))
        coeffs = template.initial_coeffs(measured, cfg.noise_std_rel * np.abs(measured))

    ts = [0.0]
    states = [x_plant.copy()]
    horizons = []
    prev_solution = None
    prev_applied = None
    failed = 0

    for k, t_k in enumerate(sampling):
        t_next = sampling[k + 1] if k + 1 < len(sampling) else template.t_final
        bp_full = np.concatenate([sampling[sampling >= t_k], [template.t_final]])
        if cfg.mode == "shrinking":
            t_f = template.t_final
            bp = bp_full
        else:
            t_f = t_k + cfg.horizon_length
            bp = np.concatenate([bp_full[bp_full < t_f], [t_f]])
        n_int = len(bp) - 1
        if prev_solution is not None and prev_solution.shape[0] >= 1:
            init = _shift_and_hold(prev_solution)[:n_int]
            if init.shape[0] < n_int:
                init = np.vstack([init, np.tile(init[-1], (n_int - init.shape[0], 1))])
        else:
            init = np.tile(template.u_init, (n_int, 1))
        ctrl = ControlParam(
            breakpoints=bp, values=init, lower=template.u_lower,
            upper=template.u_upper, rate_limits=template.rate_limits,
            prev_values=prev_applied,
        )
        spec = OcpSpec(
            ode=template.ode,
            horizon=(t_k, t_f),
            controls=ctrl,
            objective=template.objective,
            x0=coeffs,
            constraints=template.constraints,
            constraint_blocks=tuple((s, t_f) for s in template.constraint_states),
            tightening=tight,
            n_samples=cfg.n_samples,
            sample_seed=cfg.sample_seed,
            integrator=ocp_cfg,
        )
        res = solve_horizon(spec, SolveOptions(max_iter=cfg.max_sqp_iter))
        ok = res.report is not None and res.report.status in ("converged", "max-iter")
        if ok:
            u_apply = res.controls.values[0].copy()
            prev_solution = res.controls.values
        else:
            failed += 1
            u_apply = init[0].copy()
            prev_solution = init
        horizons.append(
            HorizonRecord(
                t_k=t_k,
                status=res.report.status if res.report else "failed",
                iterations=res.report.iterations if res.report else 0,
                objective=-res.report.objective if res.report else np.nan,
                p_hat=res.p_hat,
                n_discarded=res.n_discarded,
                solve_time=res.solve_time,
                applied_u=u_apply,
            )
        )
        grid = np.linspace(t_k, t_next, 9)
        sol = solve_ivp(
            template.plant_rhs, (t_k, t_next), x_plant, args=(u_apply, params),
            method="RK45", rtol=1e-9, atol=1e-11, t_eval=grid[1:],
        )
        if not sol.success:
            raise RuntimeError(f"plant integration failed in run {run_index}")
        ts.extend(sol.t.tolist())
        states.extend(sol.y.T)
        x_plant = sol.y[:, -1].copy()
        prev_applied = u_apply

        if k + 1 < len(sampling):
            measured = x_plant * (
                1.0 + cfg.noise_std_rel * noise_rng.standard_normal(template.plant_dim)
            )
            measured = np.maximum(measured, 0.0)
            if cfg.nominal:
                coeffs = template.initial_coeffs(measured, None)
            else:
                coeffs = template.initial_coeffs(
                    measured, cfg.noise_std_rel * np.abs(measured)
                )

    terminal = x_plant
    violations = (
        template.terminal_violations(terminal) if template.terminal_violations else {}
    )
    profit = (
        template.realized_profit(states[0], terminal)
        if template.realized_profit
        else np.nan
    )
    return RunRecord(
        run_index=run_index,
        t=np.array(ts),
        plant_states=np.vstack(states),
        horizons=horizons,
        terminal_state=terminal,
        profit=profit,
        violations=violations,
        violated=any(violations.values()),
        failed_horizons=failed,
        plant_params=params,
    )


def _worker(args):
    factory_module, factory_name, factory_kwargs, cfg, idx = args
    import importlib

    mod = importlib.import_module(factory_module)
    template = getattr(mod, factory_name)(**factory_kwargs)
    return run_closed_loop_single(template, cfg, idx)


def closed_loop(template, cfg, template_factory=None):
    """Run the configured number of independent closed-loop batches.

    Runs are deterministic functions of (master seed, run index).  With
    `n_workers` > 1 and a picklable factory reference (module, name,
    kwargs), runs execute in parallel processes.
    """
    indices = list(range(cfg.n_runs))
    if cfg.n_workers > 1 and template_factory is not None:
        from concurrent.futures import ProcessPoolExecutor

        mod, name, kwargs = template_factory
        with ProcessPoolExecutor(max_workers=cfg.n_workers) as ex:
            return list(ex.map(_worker, [(mod, name, kwargs, cfg, i) for i in indices]))
    return [run_closed_loop_single(template, cfg, i) for i in indices]
