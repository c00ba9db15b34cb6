import numpy as np
import pytest

from pcmpc.basis import GAUSSIAN, OrthoBasis
from pcmpc.controls import ControlParam
from pcmpc.galerkin import InputFunction, Monomial, PolynomialOde, build_tensors, project_dynamics
from pcmpc.odeint import (
    IntegrationError,
    IntegratorConfig,
    Trajectory,
    integrate,
    integrate_with_sensitivities,
)

U0 = InputFunction(fn=lambda u: float(u[0]), grad=lambda u: np.array([1.0]))


def expand_p0(terms, inputs=None):
    """Order-zero expansion: the expanded system is the nominal one."""
    basis = OrthoBasis([(GAUSSIAN, 0.0, 1.0)], 0)
    model = PolynomialOde(len(terms), 1, terms, inputs=inputs or {})
    return project_dynamics(model, basis, build_tensors(basis, 2))


def const_control(value, t0=0.0, t1=1.0):
    return ControlParam(breakpoints=np.array([t0, t1]), values=np.array([[value]]))


def test_exponential_decay():
    ode = expand_p0([[Monomial(coeff=-1.0, exponents=(1,))]])
    traj = integrate(ode, np.array([1.0]), const_control(0.0), (0.0, 1.0))
    assert traj.terminal()[0] == pytest.approx(0.3678794, abs=1e-6)


def test_piecewise_constant_input_integral():
    ode = expand_p0([[Monomial(coeff=1.0, exponents=(0,), input_id="u")]],
                    inputs={"u": U0})
    ctrl = ControlParam(breakpoints=np.array([0.0, 1.0, 2.0]),
                        values=np.array([[2.0], [0.5]]))
    traj = integrate(ode, np.array([0.0]), ctrl, (0.0, 2.0))
    assert traj.terminal()[0] == pytest.approx(2.5, abs=1e-9)
    mid = integrate(ode, np.array([0.0]), ctrl, (0.0, 1.0))
    assert mid.terminal()[0] == pytest.approx(2.0, abs=1e-9)


def test_record_grid_includes_breakpoints():
    ode = expand_p0([[Monomial(coeff=1.0, exponents=(0,), input_id="u")]],
                    inputs={"u": U0})
    ctrl = ControlParam(breakpoints=np.array([0.0, 1.0, 2.0]),
                        values=np.array([[1.0], [1.0]]))
    traj = integrate(ode, np.array([0.0]), ctrl, (0.0, 2.0), t_record=[0.4, 1.7])
    assert {0.4, 1.0, 1.7, 2.0} <= set(traj.t.tolist())


def test_restart_matches_continuous_run():
    ode = expand_p0([[Monomial(coeff=-1.0, exponents=(1,))]])
    cfg = IntegratorConfig(rel_tol=1e-12, abs_tol=1e-14)
    one = const_control(0.0, 0.0, 2.0)
    two = ControlParam(breakpoints=np.array([0.0, 1.0, 2.0]),
                       values=np.array([[0.0], [0.0]]))
    a = integrate(ode, np.array([1.0]), one, (0.0, 2.0), cfg)
    b = integrate(ode, np.array([1.0]), two, (0.0, 2.0), cfg)
    assert abs(a.terminal()[0] - b.terminal()[0]) <= 1e-12


def test_tolerance_halving_sanity():
    ode = expand_p0([[Monomial(coeff=-1.0, exponents=(1,))]])
    tight = IntegratorConfig(rel_tol=5e-9, abs_tol=5e-11)
    loose = IntegratorConfig(rel_tol=1e-8, abs_tol=1e-10)
    a = integrate(ode, np.array([1.0]), const_control(0.0), (0.0, 1.0), tight)
    b = integrate(ode, np.array([1.0]), const_control(0.0), (0.0, 1.0), loose)
    assert abs(a.terminal()[0] - b.terminal()[0]) < 10 * 5e-9


def test_blowup_raises_with_last_time():
    ode = expand_p0([[Monomial(coeff=1.0, exponents=(2,))]])
    with pytest.raises(IntegrationError) as err:
        integrate(ode, np.array([1.0]), const_control(0.0, 0.0, 2.0), (0.0, 2.0))
    assert err.value.t_last < 2.0


def test_sensitivity_constant_input():
    # x' = pi_1, so dx/dpi_1 = t
    ode = expand_p0([[Monomial(coeff=1.0, exponents=(0,), input_id="u")]],
                    inputs={"u": U0})
    sol = integrate_with_sensitivities(
        ode, np.array([0.0]), const_control(0.7, 0.0, 3.0), (0.0, 3.0),
        t_record=[1.5, 3.0],
    )
    k = sol.t.tolist().index(1.5)
    assert sol.sens[k][0, 0] == pytest.approx(1.5, abs=1e-8)
    assert sol.sens[-1][0, 0] == pytest.approx(3.0, abs=1e-8)


def test_sensitivity_linear_ode():
    # x' = -x + pi_1, x(0) = 0: dx/dpi_1 = 1 - exp(-t)
    ode = expand_p0(
        [[Monomial(coeff=-1.0, exponents=(1,)),
          Monomial(coeff=1.0, exponents=(0,), input_id="u")]],
        inputs={"u": U0},
    )
    sol = integrate_with_sensitivities(
        ode, np.array([0.0]), const_control(2.0, 0.0, 2.0), (0.0, 2.0)
    )
    assert sol.sens[-1][0, 0] == pytest.approx(1 - np.exp(-2.0), abs=1e-8)
    assert sol.y[-1][0] == pytest.approx(2.0 * (1 - np.exp(-2.0)), abs=1e-8)


def test_sensitivity_multi_interval_activation():
    # columns of later intervals stay zero until their interval starts
    ode = expand_p0(
        [[Monomial(coeff=-0.5, exponents=(1,)),
          Monomial(coeff=1.0, exponents=(0,), input_id="u")]],
        inputs={"u": U0},
    )
    ctrl = ControlParam(breakpoints=np.array([0.0, 1.0, 2.0]),
                        values=np.array([[1.0], [2.0]]))
    sol = integrate_with_sensitivities(ode, np.array([0.0]), ctrl, (0.0, 2.0))
    k = sol.t.tolist().index(1.0)
    assert sol.sens[k][0, 1] == 0.0
    assert sol.sens[k][0, 0] > 0.0
    # finite-difference oracle on the terminal state
    h = 1e-6
    base = ctrl.flat
    for j in range(2):
        dp = base.copy()
        dm = base.copy()
        dp[j] += h
        dm[j] -= h
        up = integrate(ode, np.array([0.0]), ctrl.with_flat(dp), (0.0, 2.0))
        dn = integrate(ode, np.array([0.0]), ctrl.with_flat(dm), (0.0, 2.0))
        fd = (up.terminal()[0] - dn.terminal()[0]) / (2 * h)
        assert sol.sens[-1][0, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_trajectory_csv(tmp_path):
    tr = Trajectory(t=np.array([0.0, 1.0]), y=np.array([[1.0, 2.0], [3.0, 4.0]]))
    p = tmp_path / "traj.csv"
    tr.to_csv(p, column_names=["a", "b"])
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "t,a,b"
    assert len(lines) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(rel_tol=0.0)
    ode = expand_p0([[Monomial(coeff=-1.0, exponents=(1,))]])
    with pytest.raises(ValueError):
        integrate(ode, np.array([1.0]), const_control(0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        integrate(ode, np.array([np.nan]), const_control(0.0), (0.0, 1.0))
