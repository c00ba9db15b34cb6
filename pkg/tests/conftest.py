import numpy as np
import pytest

from pcmpc import wobench
from pcmpc.controls import ControlParam


@pytest.fixture(scope="session")
def wo_expanded():
    return wobench.make_expanded(3)


@pytest.fixture(scope="session")
def wo_x0(wo_expanded):
    _, basis, _ = wo_expanded
    return wobench.initial_conditions(basis, wobench.X0)


@pytest.fixture()
def wo_controls():
    bp = np.concatenate([wobench.SAMPLING_TIMES, [wobench.T_FINAL]])
    return ControlParam(
        breakpoints=bp,
        values=np.tile(wobench.U_INIT, (len(bp) - 1, 1)),
        lower=wobench.U_LOWER,
        upper=wobench.U_UPPER,
        rate_limits={1: wobench.U2_RATE_LIMIT},
    )
