import numpy as np
import pytest

from podocp import fem
from podocp import geometry as geo
from podocp import truth as T
from podocp.errors import InvalidArgumentError, NonConvergenceError, SolverFailure

MU_S = (0.4, 1.6, 0.8)
MU_NS = (1.1,)


@pytest.fixture(scope="module")
def stokes_sol(stokes_truth):
    return stokes_truth.solve(MU_S)


@pytest.fixture(scope="module")
def ns_sol(ns_truth):
    return ns_truth.solve(MU_NS)


def _sym_error(A):
    return abs(A - A.T).max() / abs(A).max()


# -- Stokes ---------------------------------------------------------------------

def test_stokes_dimension(stokes_truth):
    L = stokes_truth.layout
    assert stokes_truth.dimension == stokes_truth.nt * L.kkt_dimension
    kkt = stokes_truth.assemble_kkt(MU_S)
    assert kkt.shape == (stokes_truth.dimension,) * 2


def test_stokes_kkt_symmetric(stokes_truth):
    assert _sym_error(stokes_truth.assemble_kkt(MU_S).matrix) <= 1e-14


def test_stokes_schur_matches_monolithic_lu(stokes_truth, stokes_sol):
    ref = stokes_truth.solve(MU_S, method="lu")
    a, b = stokes_truth.pack(stokes_sol), stokes_truth.pack(ref)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)
    assert stokes_sol.cost == pytest.approx(ref.cost, rel=1e-10)


def test_stokes_residual_recorded(stokes_sol):
    assert stokes_sol.diagnostics["residual"] <= 1e-9


def test_stokes_shapes_and_lift(stokes_truth, stokes_sol):
    L, nt = stokes_truth.layout, stokes_truth.nt
    assert stokes_sol.v.shape == (nt, L.n_velocity)
    assert stokes_sol.u.shape == (nt, L.n_control)
    d = L.dirichlet_dofs
    assert np.allclose(stokes_sol.v[:, d], stokes_sol.lift[:, d])
    assert np.all(stokes_sol.w[:, d] == 0.0)


def test_stokes_forward_reproduces_optimal_state(stokes_truth, stokes_sol):
    v, p = stokes_truth.forward(MU_S, stokes_sol.u)
    assert np.linalg.norm(v - stokes_sol.v) <= 1e-9 * np.linalg.norm(v)
    assert np.linalg.norm(p - stokes_sol.p) <= 1e-9 * np.linalg.norm(p)


def test_stokes_optimality(stokes_truth, stokes_sol, rng):
    def J(u):
        v, _ = stokes_truth.forward(MU_S, u)
        return stokes_truth.cost(v, u, MU_S)

    u = stokes_sol.u
    assert J(u) == pytest.approx(stokes_sol.cost, rel=1e-10)
    for _ in range(3):
        d = rng.standard_normal(u.shape)
        d *= np.linalg.norm(u) / np.linalg.norm(d)
        eps = 1e-3
        slope = (J(u + eps * d) - J(u - eps * d)) / (2 * eps)
        curvature = (J(u + eps * d) - 2 * J(u) + J(u - eps * d)) / eps**2
        assert abs(slope) <= 1e-6 * curvature
        assert curvature > 0


def test_stokes_control_beats_uncontrolled(stokes_truth, stokes_sol):
    v0, _ = stokes_truth.forward(MU_S)
    j0 = stokes_truth.cost(v0, np.zeros_like(stokes_sol.u), MU_S)
    assert stokes_sol.cost <= j0


def test_stokes_tolerance_violation_raises(stokes_truth):
    with pytest.raises(SolverFailure):
        stokes_truth.solve(MU_S, tol=1e-30)


def test_stokes_steady_initial_state(stokes_truth):
    disc = T.with_config(stokes_truth, initial_state="stokes")
    sol = disc.solve(MU_S)
    v0 = disc.initial_velocity(MU_S)
    assert np.linalg.norm(v0) > 0
    v, _ = disc.forward(MU_S, sol.u)
    assert np.allclose(v, sol.v, atol=1e-9 * np.abs(v).max())


def test_stokes_config_errors():
    with pytest.raises(InvalidArgumentError):
        T.StokesConfig(nt=0)
    with pytest.raises(InvalidArgumentError):
        T.StokesConfig(initial_state="rest")


def test_stokes_mu_arity(stokes_truth):
    with pytest.raises(InvalidArgumentError):
        stokes_truth.assemble_kkt((0.5, 1.5))


def test_stokes_affine_operators_reference(stokes_truth):
    op = stokes_truth.operators((1.0, 1.0, 1.0))
    K = fem.assemble_form(fem.VELOCITY_STIFFNESS, stokes_truth.layout)
    assert abs(op["stiffness"] - K).max() < 1e-13


# -- Navier-Stokes --------------------------------------------------------------

def test_ns_residual_vanishes_at_solution(ns_truth, ns_sol):
    x = ns_truth.pack(ns_sol)
    r = ns_truth.residual(x, MU_NS)
    assert np.linalg.norm(r) <= 1e-9 * ns_truth.residual_scale(MU_NS)
    assert ns_sol.diagnostics["newton_iterations"] >= 1


def test_ns_jacobian_symmetric(ns_truth, rng):
    x = rng.standard_normal(ns_truth.dimension)
    assert _sym_error(ns_truth.jacobian(x, MU_NS)) <= 1e-13


def test_ns_jacobian_finite_differences(ns_truth, rng):
    x = rng.standard_normal(ns_truth.dimension)
    J = ns_truth.jacobian(x, MU_NS)
    for _ in range(3):
        d = rng.standard_normal(ns_truth.dimension)
        eps = 1e-6
        fd = (ns_truth.residual(x + eps * d, MU_NS) - ns_truth.residual(x - eps * d, MU_NS))
        fd /= 2 * eps
        assert np.linalg.norm(fd - J @ d) <= 1e-7 * np.linalg.norm(J @ d)


def test_ns_forward_reproduces_optimal_state(ns_truth, ns_sol):
    v, p = ns_truth.forward(MU_NS, ns_sol.u)
    assert np.linalg.norm(v - ns_sol.v) <= 1e-8 * np.linalg.norm(v)
    assert np.linalg.norm(p - ns_sol.p) <= 1e-8 * np.linalg.norm(p)


def test_ns_optimality(ns_truth, ns_sol, rng):
    def J(u):
        v, _ = ns_truth.forward(MU_NS, u)
        return ns_truth.cost(v, u, MU_NS)

    u = ns_sol.u
    d = rng.standard_normal(u.shape)
    d *= np.linalg.norm(u) / np.linalg.norm(d)
    eps = 1e-3
    jp, jm, j0 = J(u + eps * d), J(u - eps * d), J(u)
    assert abs(jp - jm) / (2 * eps) <= 1e-5 * (jp - 2 * j0 + jm) / eps**2
    v0, _ = ns_truth.forward(MU_NS)
    assert ns_sol.cost <= ns_truth.cost(v0, np.zeros_like(u), MU_NS)


def test_ns_newton_cap(ns_truth):
    disc = T.with_config(ns_truth, max_iter=0)
    with pytest.raises(NonConvergenceError):
        disc.solve(MU_NS)


def test_ns_lift_scales_with_mu(ns_truth):
    assert np.allclose(ns_truth.lift((1.4,)), 2 * ns_truth.lift((0.7,)))


def test_ns_rejects_bad_iterate(ns_truth):
    with pytest.raises(InvalidArgumentError):
        ns_truth.residual(np.zeros(3), MU_NS)


def test_functional_interface(ns_truth, ns_sol):
    kkt = T.assemble_newton_step_ns(MU_NS, ns_sol, ns_truth)
    assert np.linalg.norm(kkt.rhs) <= 1e-9 * ns_truth.residual_scale(MU_NS)
    assert T.evaluate_cost(ns_sol, ns_truth) == pytest.approx(ns_sol.cost)
    with pytest.raises(InvalidArgumentError):
        T.make_truth("heat")


def test_stokes_dirichlet_reproduces_quadratic_flow():
    # Poiseuille-type flow is in the discrete space: exact up to round-off
    L = fem.build_layout(geo.build_rectangle_mesh(4, 4))

    def u(x):
        return np.stack([x[..., 1] * (1 - x[..., 1]), 0 * x[..., 0]], -1)

    def f(x):
        # -lap u = (2, 0) cancels grad p = (-2, 0) for p = -2 x
        return np.zeros(x.shape[:-1] + (2,))

    v, p = T.solve_stokes_dirichlet(L, f, u)
    assert np.allclose(v, L.interpolate_velocity(u), atol=1e-12)
    assert fem.pressure_l2_error(L, p, lambda x: -2 * x[..., 0]) < 1e-11
