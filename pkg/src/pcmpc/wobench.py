"""Williams-Otto semi-batch reactor benchmark.

Three exothermic reactions A + B -> C, C + B -> P + E, P + C -> G in a fed
batch: reactant B enters with feed rate u1, the reactor temperature u2 is
manipulated directly, and the batch ends at 4000 s.  Dividing by the volume
makes the raw balance equations rational, so the reciprocal volume is added
as an eighth state, giving dynamics polynomial in the states with every term
separable in states, inputs and parameters.

Uncertain quantities (ten standard Gaussian variables): the three rate
constants, then the seven physical states at re-initialization.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .basis import OrthoBasis, PCExpansion, SampleMatrix, eval_basis
from .chance import ConstraintSet, PceConstraint
from .galerkin import (
    InputFunction,
    Monomial,
    PolynomialOde,
    build_tensors,
    project_dynamics,
    project_initial_conditions,
)
from .odeint import IntegrationError

CB_IN = 5.0
K_MEANS = np.array([1.6599e6, 7.2117e8, 2.6745e12])
# variances are ten percent of the means
K_STDS = np.sqrt(0.1 * K_MEANS)
ARRHENIUS_E = np.array([6666.7, 8333.3, 11111.0])
X0 = np.array([10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0])
T_FINAL = 4000.0
SAMPLING_TIMES = np.arange(0.0, T_FINAL, 250.0)
U_LOWER = np.array([0.0, 313.0])
U_UPPER = np.array([0.002, 363.0])
U2_RATE_LIMIT = 1.0
U_INIT = np.array([0.002, 318.0])
X6_MAX = 0.6
X7_MAX = 7.0
N_XI = 10
DEFAULT_ORDER = 3

STATE_NAMES = ["x1_A", "x2_B", "x3_C", "x4_P", "x5_E", "x6_G", "x7_V", "x8_invV"]


def _arr_fn(energy):
    def fn(u):
        return float(np.exp(-energy / u[1]))

    def grad(u):
        v = np.exp(-energy / u[1])
        return np.array([0.0, v * energy / (u[1] * u[1])])

    return InputFunction(fn=fn, grad=grad)


INPUTS = {
    "feed": InputFunction(fn=lambda u: float(u[0]),
                          grad=lambda u: np.array([1.0, 0.0])),
    "arr1": _arr_fn(ARRHENIUS_E[0]),
    "arr2": _arr_fn(ARRHENIUS_E[1]),
    "arr3": _arr_fn(ARRHENIUS_E[2]),
}


def standard_basis(order=DEFAULT_ORDER):
    """Ten standard Gaussian variables: three rate constants, seven states."""
    return OrthoBasis([("gaussian", 0.0, 1.0)] * N_XI, order)


def _e(*pairs):
    exp = [0] * 8
    for idx, g in pairs:
        exp[idx] = g
    return tuple(exp)


def build_model(order=DEFAULT_ORDER, k_stds=None):
    """Lifted polynomial reactor model and its uncertainty basis."""
    basis = standard_basis(order)
    if k_stds is None:
        k_stds = K_STDS
    params = {}
    for m in range(3):
        c = np.zeros(basis.n_terms)
        c[0] = K_MEANS[m]
        c[1 + m] = k_stds[m]
        params[f"k{m+1}"] = PCExpansion(basis, c)

    rho = [
        Monomial(coeff=1.0, exponents=_e((0, 1), (1, 1)), input_id="arr1", param_id="k1"),
        Monomial(coeff=1.0, exponents=_e((1, 1), (2, 1)), input_id="arr2", param_id="k2"),
        Monomial(coeff=1.0, exponents=_e((2, 1), (3, 1)), input_id="arr3", param_id="k3"),
    ]

    def neg(m):
        return Monomial(coeff=-m.coeff, exponents=m.exponents,
                        input_id=m.input_id, param_id=m.param_id)

    def dilution(state):
        return Monomial(coeff=-1.0, exponents=_e((state, 1), (7, 1)), input_id="feed")

    terms = [
        [neg(rho[0]), dilution(0)],
        [neg(rho[0]), neg(rho[1]),
         Monomial(coeff=CB_IN, exponents=_e((7, 1)), input_id="feed"), dilution(1)],
        [rho[0], neg(rho[1]), neg(rho[2]), dilution(2)],
        [rho[1], neg(rho[2]), dilution(3)],
        [rho[1], dilution(4)],
        [rho[2], dilution(5)],
        [Monomial(coeff=1.0, exponents=_e(), input_id="feed")],
        [Monomial(coeff=-1.0, exponents=_e((7, 2)), input_id="feed")],
    ]
    model = PolynomialOde(8, 2, terms, inputs=INPUTS, params=params,
                          state_names=STATE_NAMES, d_max=2)
    return model, basis


@lru_cache(maxsize=4)
def make_expanded(order=DEFAULT_ORDER, degenerate_params=False):
    """Projected coefficient dynamics (built once per order and cached)."""
    model, basis = build_model(order, np.zeros(3) if degenerate_params else None)
    tensors = build_tensors(basis, 3, first_slot_cap=1)
    ode = project_dynamics(model, basis, tensors)
    ode.prepare_jacobian()
    return ode, basis, tensors


def initial_conditions(basis, means, stds=None, fit_seed=0):
    """Coefficient vector for the eight lifted states.

    `means` are the seven physical states; `stds` per-state absolute
    standard deviations (None or zero entries give exact estimates).  The
    reciprocal volume is collocation-fitted from the volume distribution.
    """
    means = np.asarray(means, dtype=float)
    stds = np.zeros(7) if stds is None else np.asarray(stds, dtype=float)
    specs = []
    for i in range(7):
        if stds[i] > 0.0:
            specs.append(("gaussian", means[i], stds[i], 3 + i))
        else:
            specs.append(("dirac", means[i]))
    if stds[6] > 0.0:
        m7, s7 = means[6], stds[6]
        specs.append(("fit", lambda xi: 1.0 / (m7 + s7 * xi[:, 9]), None, fit_seed))
    else:
        specs.append(("dirac", 1.0 / means[6]))
    return project_initial_conditions(specs, basis)


def measurement_ics(measured, noise_std_rel, fit_seed=0):
    """Initial-condition stds from a relative measurement-noise model."""
    measured = np.asarray(measured, dtype=float)
    return measured, noise_std_rel * np.abs(measured), fit_seed


def plant_rhs(t, x, u, ks):
    """Raw seven-state balance model used as the true plant."""
    x1, x2, x3, x4, x5, x6, x7 = x
    a = np.exp(-ARRHENIUS_E / u[1])
    r1 = ks[0] * x1 * x2 * a[0]
    r2 = ks[1] * x2 * x3 * a[1]
    r3 = ks[2] * x3 * x4 * a[2]
    d = u[0] / x7
    return np.array(
        [
            -r1 - x1 * d,
            -r1 - r2 + CB_IN * d - x2 * d,
            r1 - r2 - r3 - x3 * d,
            r2 - r3 - x4 * d,
            r2 - x5 * d,
            r3 - x6 * d,
            u[0],
        ]
    )


def draw_plant_params(rng):
    return K_MEANS + K_STDS * rng.standard_normal(3)


def terminal_constraints(basis):
    """Joint chance constraints on the side product and the final volume."""
    return ConstraintSet(
        basis=basis,
        constraints=(
            PceConstraint(terms=((0, 1.0),), offset=-X6_MAX, name="side_product"),
            PceConstraint(terms=((1, 1.0),), offset=-X7_MAX, name="volume"),
        ),
        times=(T_FINAL,),
    )


CONSTRAINT_STATES = (5, 6)  # x6 and x7 blocks feed the constraint set


class BatchProfit:
    """Expected profit at the batch end, with its coefficient gradient.

    Revenue weights the product amounts x5*x7 and (twice) x4*x7, feed costs
    are half a unit per mole of B, and the product-amount variances are
    penalized with weight ten.  Product moments come from projecting the
    state products onto the basis.
    """

    FEED_PRICE = 0.5
    VARIANCE_WEIGHT = 10.0

    def __init__(self, basis, tensors):
        self.basis = basis
        self.n_terms = basis.n_terms
        from .galerkin import _ordered_entries

        a, b, o, v = _ordered_entries(*tensors.tables[2])
        self._pa, self._pb, self._po, self._pv = a, b, o, v
        self.norms = basis.norms

    def _product(self, ca, cb):
        z = np.zeros(self.n_terms)
        np.add.at(z, self._po, self._pv * ca[self._pa] * cb[self._pb])
        return z

    def _product_grad_left(self, w, cb):
        """d(w . z)/d ca for z the projected product of (ca, cb)."""
        g = np.zeros(self.n_terms)
        np.add.at(g, self._pa, self._pv * w[self._po] * cb[self._pb])
        return g

    def value_and_grad(self, xT, x0):
        nt = self.n_terms
        blocks = xT.reshape(8, nt)
        x4, x5, x7 = blocks[3], blocks[4], blocks[6]
        z45 = self._product(x4, x7)
        z57 = self._product(x5, x7)
        grad = np.zeros_like(blocks)

        feed = -self.FEED_PRICE * CB_IN * (x7[0] - x0.reshape(8, nt)[6, 0])
        grad[6][0] += -self.FEED_PRICE * CB_IN

        value = feed + z57[0] + 2.0 * z45[0]
        w_mean = np.zeros(nt)
        w_mean[0] = 1.0
        grad[4] += self._product_grad_left(w_mean, x7)
        grad[6] += self._product_grad_left(w_mean, x5)
        grad[3] += 2.0 * self._product_grad_left(w_mean, x7)
        grad[6] += 2.0 * self._product_grad_left(w_mean, x4)

        for z, ia in ((z57, 4), (z45, 3)):
            var = float(np.sum(z[1:] ** 2 * self.norms[1:]))
            value -= self.VARIANCE_WEIGHT * var
            w = 2.0 * z * self.norms
            w[0] = 0.0
            other = blocks[ia]
            grad[ia] -= self.VARIANCE_WEIGHT * self._product_grad_left(w, x7)
            grad[6] -= self.VARIANCE_WEIGHT * self._product_grad_left(w, other)
        return float(value), grad.ravel()

    def value(self, xT, x0):
        return self.value_and_grad(xT, x0)[0]


def realized_profit(x_initial, x_final):
    """Profit of one realized plant trajectory (no moments involved)."""
    return float(
        -BatchProfit.FEED_PRICE * CB_IN * (x_final[6] - x_initial[6])
        + x_final[4] * x_final[6]
        + 2.0 * x_final[3] * x_final[6]
    )


@dataclass
class McMoments:
    t: np.ndarray
    mean: np.ndarray  # (n_t, 7)
    variance: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray
    n_draws: int
    n_failed: int


def mc_reference(n_draws, seed, controls, ic_means=None, ic_stds=None,
                 t_grid=None, rel_tol=1e-8, abs_tol=1e-10):
    """Direct Monte-Carlo moments of the raw plant model.

    Draws rate constants and initial states, integrates every realization,
    and estimates mean, variance, skewness and kurtosis on the time grid.
    Failed integrations are excluded and counted.
    """
    from scipy.integrate import solve_ivp

    ic_means = X0 if ic_means is None else np.asarray(ic_means, dtype=float)
    ic_stds = np.zeros(7) if ic_stds is None else np.asarray(ic_stds, dtype=float)
    if t_grid is None:
        t_grid = np.linspace(0.0, T_FINAL, 126)
    t_grid = np.asarray(t_grid, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    vals = np.empty((n_draws, t_grid.size, 7))
    failed = 0
    kept = 0
    for _ in range(n_draws):
        ks = K_MEANS + K_STDS * rng.standard_normal(3)
        x0 = ic_means + ic_stds * rng.standard_normal(7)
        try:
            y = x0.copy()
            rows = np.empty((t_grid.size, 7))
            if t_grid[0] == 0.0:
                rows[0] = y
                start = 1
            else:
                start = 0
            pos = start
            for a, b, i in controls.segments(0.0, T_FINAL):
                inside = t_grid[(t_grid > a) & (t_grid <= b)]
                sol = solve_ivp(
                    plant_rhs, (a, b), y, args=(controls.values[i], ks),
                    method="RK45", rtol=rel_tol, atol=abs_tol,
                    t_eval=np.concatenate([inside, [b]])
                    if inside.size == 0 or inside[-1] < b else inside,
                )
                if not sol.success:
                    raise IntegrationError(sol.message, sol.t[-1] if sol.t.size else a)
                take = min(inside.size, sol.y.shape[1])
                rows[pos : pos + take] = sol.y[:, :take].T
                pos += take
                y = sol.y[:, -1]
            vals[kept] = rows
            kept += 1
        except IntegrationError:
            failed += 1
    vals = vals[:kept]
    mean = vals.mean(axis=0)
    centered = vals - mean
    var = np.mean(centered**2, axis=0)
    sd = np.sqrt(np.where(var > 0, var, 1.0))
    skew = np.where(var > 0, np.mean(centered**3, axis=0) / sd**3, 0.0)
    kurt = np.where(var > 0, np.mean(centered**4, axis=0) / sd**4, 0.0)
    return McMoments(t=t_grid, mean=mean, variance=var, skewness=skew,
                     kurtosis=kurt, n_draws=kept, n_failed=failed)


def terminal_violations(x_final):
    return {
        "side_product": bool(x_final[5] > X6_MAX),
        "volume": bool(x_final[6] > X7_MAX),
    }


def make_template(order=DEFAULT_ORDER, nominal=False):
    """Closed-loop wiring of the benchmark (controller model, plant, costs).

    The nominal variant runs the controller on the order-zero expansion, so
    its predictions are exactly the plant model at the parameter means.
    """
    from .snmpc import ClosedLoopTemplate

    eff_order = 0 if nominal else order
    ode, basis, tensors = make_expanded(eff_order)
    return ClosedLoopTemplate(
        ode=ode,
        basis=basis,
        objective=BatchProfit(basis, tensors),
        constraints=terminal_constraints(basis),
        constraint_states=CONSTRAINT_STATES,
        t_final=T_FINAL,
        sampling_times=SAMPLING_TIMES.copy(),
        x_initial=X0.copy(),
        u_init=U_INIT.copy(),
        u_lower=U_LOWER.copy(),
        u_upper=U_UPPER.copy(),
        rate_limits={1: U2_RATE_LIMIT},
        plant_rhs=plant_rhs,
        draw_params=draw_plant_params,
        initial_coeffs=lambda means, stds: initial_conditions(basis, means, stds),
        plant_dim=7,
        terminal_violations=terminal_violations,
        realized_profit=realized_profit,
    )


def expansion_moments(ode, traj, samples=None):
    """Moment trajectories of the seven physical states from coefficients.

    Mean and variance come straight from the coefficients; skewness and
    kurtosis are estimated by evaluating the expansion on a SampleMatrix.
    """
    nt = ode.n_terms
    n_t = traj.t.size
    mean = np.empty((n_t, 7))
    var = np.empty((n_t, 7))
    skew = np.zeros((n_t, 7))
    kurt = np.zeros((n_t, 7))
    psi = eval_basis(ode.basis, samples.samples) if samples is not None else None
    for k in range(n_t):
        blocks = traj.y[k].reshape(ode.n_x, nt)[:7]
        mean[k] = blocks[:, 0]
        var[k] = np.sum(blocks[:, 1:] ** 2 * ode.basis.norms[1:], axis=1)
        if psi is not None:
            vals = psi @ blocks.T  # (n_samples, 7)
            c = vals - vals.mean(axis=0)
            v = np.mean(c**2, axis=0)
            sd = np.sqrt(np.where(v > 0, v, 1.0))
            skew[k] = np.where(v > 0, np.mean(c**3, axis=0) / sd**3, 0.0)
            kurt[k] = np.where(v > 0, np.mean(c**4, axis=0) / sd**4, 0.0)
    return {"t": traj.t, "mean": mean, "variance": var,
            "skewness": skew, "kurtosis": kurt}
