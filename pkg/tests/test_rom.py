import dataclasses

import numpy as np
import pytest

from podocp import fem, pod, rom
from podocp import truth as T
from podocp.errors import InvalidArgumentError, SolverFailure
from podocp.truth import VARIABLES


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_dimension_is_13n(stokes_model, ns_model):
    assert stokes_model.dimension == 13 * stokes_model.n
    assert ns_model.dimension == 13 * ns_model.n


def test_stokes_reduced_system_is_congruent(stokes_truth, stokes_model):
    mu = (0.3, 1.4, 0.6)
    K, rhs, _ = rom.stokes_system(stokes_model, mu)
    kkt = stokes_truth.assemble_kkt(mu)
    assert _rel(K, rom.full_system_congruence(stokes_model, kkt.matrix)) <= 1e-12
    b = stokes_model.basis
    proj = np.concatenate([b.basis(k).T @ kkt.rhs[kkt.blocks[k]] for k in VARIABLES])
    assert _rel(rhs, proj) <= 1e-12
    assert np.allclose(K, K.T, atol=1e-14 * np.abs(K).max())


def test_stokes_reduced_cost_matches_truth_cost(stokes_truth, stokes_model, rng):
    mu = (0.3, 1.4, 0.6)
    x = rng.standard_normal(stokes_model.dimension)
    sol = rom.reconstruct(stokes_model, x, mu)
    assert rom.reduced_cost(stokes_model, mu, x) == pytest.approx(
        stokes_truth.cost(sol.v, sol.u, mu), rel=1e-10)


def test_ns_reduced_residual_is_galerkin_projection(ns_truth, ns_model, rng):
    mu = (0.9,)
    x = 0.1 * rng.standard_normal(ns_model.dimension)
    sol = rom.reconstruct(ns_model, x, mu)
    full = ns_truth.residual(ns_truth.pack(sol), mu)
    b = ns_model.basis
    proj = np.concatenate([b.basis(k).T @ full[ns_truth.blocks[k]] for k in VARIABLES])
    red = rom.reduced_residual(ns_model, mu, x)
    assert np.linalg.norm(red - proj) <= 1e-11 * np.linalg.norm(proj)
    assert rom.reduced_cost(ns_model, mu, x) == pytest.approx(
        ns_truth.cost(sol.v, sol.u, mu), rel=1e-11)


def test_ns_reduced_jacobian(ns_model, rng):
    P = rom._NsPieces(ns_model, (1.3,))
    x = rng.standard_normal(ns_model.dimension)
    J = P.jacobian(x)
    assert np.allclose(J, J.T, atol=1e-13 * np.abs(J).max())
    d = rng.standard_normal(ns_model.dimension)
    eps = 1e-6
    fd = (P.residual(x + eps * d) - P.residual(x - eps * d)) / (2 * eps)
    assert np.linalg.norm(fd - J @ d) <= 1e-8 * np.linalg.norm(J @ d)


def test_trilinear_tensor_entries(ns_truth, ns_model):
    T3 = ns_model.blocks["T"][2]
    Zv = ns_model.basis.velocity
    Zh = np.column_stack([ns_model.lift_unit, Zv])
    L = ns_truth.layout
    for a, b, t in [(0, 0, 0), (0, 3, 1), (2, 5, 7), (6, 1, 4)]:
        assert T3[a, b, t] == pytest.approx(fem.trilinear(Zh[:, a], Zh[:, b], Zv[:, t], L),
                                            rel=1e-10, abs=1e-14)


def test_reconstruct_zero_gives_lift(stokes_model, ns_model):
    s = rom.reconstruct(stokes_model, np.zeros(stokes_model.dimension), (0.5, 1.5, 1.0))
    assert np.array_equal(s.v, s.lift)
    assert not np.any(s.u)
    n = rom.reconstruct(ns_model, np.zeros(ns_model.dimension), (1.2,))
    assert np.allclose(n.v, 1.2 * ns_model.lift_unit)


def test_reconstruct_length_check(ns_model):
    with pytest.raises(InvalidArgumentError):
        rom.reconstruct(ns_model, np.zeros(3), (1.0,))


@pytest.mark.parametrize("which,mu_index", [("stokes", 2), ("ns", 1)])
def test_reproduction_on_training_point(which, mu_index, request):
    model = request.getfixturevalue(f"{which}_model")
    snaps = request.getfixturevalue(f"{which}_snapshots")
    mu = snaps.mus[mu_index]
    red = rom.solve_reduced(model, mu)
    sol = rom.reconstruct(model, red.coefficients, mu)
    for k in VARIABLES:
        ref = snaps.data[k][:, mu_index]
        assert np.linalg.norm(sol.snapshot(k) - ref) <= 1e-8 * np.linalg.norm(ref)
    assert red.cost == pytest.approx(snaps.records[mu_index]["cost"], rel=1e-8)


@pytest.mark.parametrize("which", ["stokes", "ns"])
def test_truncated_model_equals_projection_of_truncated_basis(which, request):
    truth = request.getfixturevalue(f"{which}_truth")
    model = request.getfixturevalue(f"{which}_model")
    cut = model.truncate(3)
    direct = rom.project(model.basis.truncate(3), truth)
    assert cut.dimension == direct.dimension == 39
    for name, (_, _, arr) in direct.blocks.items():
        assert np.allclose(cut.blocks[name][2], arr, rtol=0, atol=1e-13 * max(1, np.abs(arr).max()))


def test_model_roundtrip_and_online_independence(tmp_path, monkeypatch, ns_model):
    path = tmp_path / "m.bin"
    ns_model.save(path)
    light = rom.ReducedModel.load(path, with_basis=False)
    expected = rom.solve_reduced(ns_model, (1.1,))

    def forbidden(*args, **kwargs):
        raise AssertionError("full-order routine called online")

    for name in ("assemble_form", "assemble_convection", "convection_vector", "build_layout"):
        monkeypatch.setattr(fem, name, forbidden)
    monkeypatch.setattr(T.NavierStokesOCP, "residual", forbidden)
    monkeypatch.setattr(T.NavierStokesOCP, "jacobian", forbidden)
    got = rom.solve_reduced(light, (1.1,))
    assert np.allclose(got.coefficients, expected.coefficients, rtol=1e-12, atol=1e-14)
    assert got.cost == pytest.approx(expected.cost, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        light.truncate(2)
    with pytest.raises(InvalidArgumentError):
        rom.reconstruct(light, got.coefficients, (1.1,))


def test_stokes_roundtrip(tmp_path, stokes_model):
    stokes_model.save(tmp_path / "m.bin")
    back = rom.ReducedModel.load(tmp_path / "m.bin")
    mu = (0.2, 1.8, 0.4)
    a = rom.solve_reduced(stokes_model, mu)
    b = rom.solve_reduced(back, mu)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert back.truncate(2).dimension == 26


def test_singular_reduced_system_names_block(stokes_model):
    blocks = dict(stokes_model.blocks)
    for name, (key, axes, arr) in stokes_model.blocks.items():
        if name.startswith(("Huu", "Awu")):
            blocks[name] = (key, axes, np.zeros_like(arr))
    broken = dataclasses.replace(stokes_model, blocks=blocks)
    with pytest.raises(SolverFailure) as err:
        rom.solve_reduced(broken, (0.5, 1.5, 0.5))
    assert err.value.diagnostics["block"] == "uu"


def test_project_checks(stokes_truth, ns_truth, stokes_model):
    with pytest.raises(InvalidArgumentError):
        rom.project(stokes_model.basis, ns_truth)
    steady = T.with_config(stokes_truth, initial_state="stokes")
    with pytest.raises(InvalidArgumentError):
        rom.project(stokes_model.basis, steady)


def test_projection_coefficients_reproduce_snapshot(ns_model, ns_snapshots, ns_inner, ns_truth):
    sol = ns_truth.unpack(np.concatenate([ns_snapshots.data[k][:, 0] for k in VARIABLES]),
                          ns_snapshots.mus[0])
    c = rom.project_solution(ns_model, sol, ns_inner)
    back = rom.reconstruct(ns_model, c, ns_snapshots.mus[0])
    assert _rel(back.snapshot("v"), sol.snapshot("v")) <= 1e-8


def test_stokes_galerkin_error_within_constant_of_projection(stokes_truth, stokes_model,
                                                             stokes_inner):
    space = {"v": "v", "w": "v", "p": "p", "q": "p", "u": "u"}

    def dist2(a, b):
        total = 0.0
        for k in VARIABLES:
            d = a.snapshot(k) - b.snapshot(k)
            total += d @ (stokes_inner[space[k]] @ d)
        return total

    for mu in pod.sample_training_set("stokes_td", 10, seed=21):
        ref = stokes_truth.solve(mu)
        for n in (2, 4):
            sub = stokes_model.truncate(n)
            red = rom.reconstruct(sub, rom.solve_reduced(sub, mu).coefficients, mu)
            best = rom.reconstruct(sub, rom.project_solution(sub, ref, stokes_inner), mu)
            assert dist2(red, ref) <= 100**2 * dist2(best, ref)
