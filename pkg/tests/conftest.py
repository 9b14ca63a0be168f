"""Shared coarse fixtures.

Everything here runs on h = 0.5 (Stokes, four time steps) or h = 0.25
(Navier-Stokes) so that the unit tests stay fast.
"""

import numpy as np
import pytest

from podocp import pod, rom
from podocp.truth import NavierStokesConfig, StokesConfig, make_truth


@pytest.fixture(scope="session")
def stokes_truth():
    return make_truth("stokes_td", StokesConfig(h=0.5, nt=4))


@pytest.fixture(scope="session")
def ns_truth():
    return make_truth("ns_steady", NavierStokesConfig(h=0.25))


@pytest.fixture(scope="session")
def stokes_snapshots(stokes_truth):
    mus = pod.sample_training_set("stokes_td", 5, seed=11)
    return pod.collect_snapshots(stokes_truth, mus)


@pytest.fixture(scope="session")
def ns_snapshots(ns_truth):
    mus = pod.sample_training_set("ns_steady", 5, seed=11)
    return pod.collect_snapshots(ns_truth, mus)


@pytest.fixture(scope="session")
def stokes_model(stokes_truth, stokes_snapshots):
    basis, _ = pod.build_reduced_basis(stokes_snapshots, stokes_truth, eps_tol=1e-14, n_max=5)
    return rom.project(basis, stokes_truth)


@pytest.fixture(scope="session")
def ns_model(ns_truth, ns_snapshots):
    basis, _ = pod.build_reduced_basis(ns_snapshots, ns_truth, eps_tol=1e-14, n_max=5)
    return rom.project(basis, ns_truth)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stokes_inner(stokes_truth):
    return {k: pod.space_time_inner_product(stokes_truth, k) for k in ("v", "p", "u")}


@pytest.fixture(scope="session")
def ns_inner(ns_truth):
    return {k: pod.space_time_inner_product(ns_truth, k) for k in ("v", "p", "u")}


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
