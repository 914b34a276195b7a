import sys
import warnings

import numpy as np
import pytest

from oseen_hho.assembly import Discretization
from oseen_hho.cases import Poly2, kovasznay_case, manufactured_case
from oseen_hho.mesh import KOVASZNAY_DOMAIN, generate_mesh


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture(scope="session")
def kovasznay_pe1():
    return kovasznay_case(1.0)


@pytest.fixture(scope="session")
def kovasznay_disc_k1(kovasznay_pe1):
    mesh = generate_mesh("triangular", 4, KOVASZNAY_DOMAIN)
    return Discretization.build(mesh, kovasznay_pe1.data, 1)


def stream_case(nu=0.1, mu=1.0, name="stream"):
    """Polynomial case with u in P^2 built from psi = x^2 y (1 - y)."""
    psi = Poly2.from_terms({(2, 1): 1.0, (2, 2): -1.0})
    u = (psi.dy(), -psi.dx())
    beta = (Poly2.from_terms({(0, 1): 1.0}), Poly2.from_terms({(1, 0): -1.0}))
    p = Poly2.from_terms({(1, 0): 1.0, (0, 1): -2.0, (1, 1): 1.0})
    return manufactured_case(u, p, beta, nu=nu, mu=mu, name=name)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
