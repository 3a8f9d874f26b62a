import numpy as np
import pytest

from oracles import DenseTV, dense_matrix, difference_matrix, newton_minimize

from tvct.data import NoiseSpec, add_noise
from tvct.geometry import JosephProjector, make_geometry
from tvct.problem import TVProblem
from tvct.regularizer import TVConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


class OracleInstance:
    """4^3 TV problem with a dense system matrix and its Newton minimizer."""

    def __init__(self, alpha=0.01, tau=1e-3, n_views=9, seed=3):
        dims = (4, 4, 4)
        self.geometry = make_geometry(n_views, 6, 6)
        proj = JosephProjector(self.geometry, dims)
        r = np.random.default_rng(seed)
        x_true = 1.0 + 0.1 * r.random(64)
        x_true[:32] += 0.05
        self.M = dense_matrix(proj.forward, 64)
        b = add_noise(self.M @ x_true, NoiseSpec(0.01, seed))
        self.problem = TVProblem(self.geometry, b, dims, alpha, TVConfig(tau), projector=proj)
        self.D = difference_matrix(dims)
        self.dense = DenseTV(self.M, b, self.D, alpha, tau)
        self.x_star = newton_minimize(self.dense, x_true.copy())
        self.f_star = self.dense.value(self.x_star)
        self.L = float(np.linalg.eigvalsh(self.dense.hessian(self.x_star)).max())


@pytest.fixture(scope="session")
def oracle():
    return OracleInstance()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
