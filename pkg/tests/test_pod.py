import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from podocp import pod
from podocp.errors import InvalidArgumentError, SolverFailure
from podocp.problems import ParameterPoint
from podocp.truth import VARIABLES, OcpSolution


def _spd(n, rng):
    A = rng.standard_normal((n, n))
    return sp.csr_matrix(A @ A.T / n + np.eye(n))


def test_two_orthogonal_snapshots():
    S = np.array([[3.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
    spec, modes = pod.pod(S, "v", sp.identity(3), eps_tol=0.4)
    assert spec.n == 2
    assert np.allclose(spec.eigenvalues, [4.5, 4.5])
    assert np.allclose(np.abs(modes.T @ S), [[3, 0], [0, 3]]) or np.allclose(
        np.abs(modes.T @ S), [[0, 3], [3, 0]])


def test_energy_criterion_picks_smallest_count():
    S = np.diag([10.0, 1.0, 0.1])
    spec, _ = pod.pod(S, "v", sp.identity(3), eps_tol=0.05)
    # energies 100, 1, 0.01: one mode keeps 0.99
    assert spec.n == 1
    spec, _ = pod.pod(S, "v", sp.identity(3), eps_tol=1e-3)
    assert spec.n == 2


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_svd_oracle(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((40, 10)) @ np.diag(2.0 ** -np.arange(10))
    spec, modes = pod.pod(S, "v", sp.identity(40), eps_tol=1e-12, n=6)
    U, s, _ = np.linalg.svd(S, full_matrices=False)
    assert np.allclose(spec.eigenvalues, s**2 / 10, rtol=1e-10, atol=1e-14 * s[0] ** 2)
    assert np.allclose(np.abs(modes.T @ U[:, :6]), np.eye(6), atol=1e-8)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 7))
def test_best_approximation_identity(seed, n):
    rng = np.random.default_rng(seed)
    X = _spd(30, rng)
    S = rng.standard_normal((30, 8))
    spec, Z = pod.pod(S, "v", X, eps_tol=1e-12, n=n)
    assert np.allclose(Z.T @ X @ Z, np.eye(n), atol=1e-12)
    R = S - Z @ (Z.T @ (X @ S))
    err = np.einsum("ij,ij->", R, X @ R)
    assert err == pytest.approx(8 * spec.eigenvalues[n:].sum(), rel=1e-8, abs=1e-12)


def test_sign_convention(rng):
    S = rng.standard_normal((20, 4))
    _, Z = pod.pod(S, "v", sp.identity(20), n=4)
    idx = np.argmax(np.abs(Z), axis=0)
    assert np.all(Z[idx, np.arange(4)] > 0)


def test_single_snapshot_full_energy(rng):
    spec, Z = pod.pod(rng.standard_normal((12, 1)), "v", sp.identity(12))
    assert spec.cumulative_energy[0] == 1.0
    assert Z.shape == (12, 1)


def test_duplicates_are_rank_one(rng):
    s = rng.standard_normal(15)
    S = np.column_stack([s, s, 2 * s])
    spec = pod.pod_spectrum(S, "v", sp.identity(15))
    assert spec.eigenvalues[1] / spec.eigenvalues[0] <= 1e-12
    with pytest.warns(RuntimeWarning):
        Z = pod.pod_modes(S, spec, sp.identity(15), 3)
    assert Z.shape[1] == 1


def test_zero_snapshots_give_empty_basis():
    with pytest.warns(RuntimeWarning):
        spec, Z = pod.pod(np.zeros((5, 3)), "v", sp.identity(5))
    assert Z.shape == (5, 0)


def test_pod_argument_checks():
    with pytest.raises(InvalidArgumentError):
        pod.pod(np.ones((4, 2)), "v", sp.identity(4), eps_tol=1.0)
    with pytest.raises(InvalidArgumentError):
        pod.pod(np.ones((4, 0)), "v", sp.identity(4))


def test_training_set_deterministic_and_in_box():
    a = pod.sample_training_set("stokes_td", 20, seed=3)
    b = pod.sample_training_set("stokes_td", 20, seed=3)
    assert a == b
    for mu in a:
        assert not mu.extrapolated
    with pytest.raises(InvalidArgumentError):
        pod.sample_training_set("stokes_td", 0)


def test_snapshot_layout(stokes_truth, stokes_snapshots):
    L, nt = stokes_truth.layout, stokes_truth.nt
    assert stokes_snapshots.size == 5
    assert stokes_snapshots.data["v"].shape == (nt * L.n_velocity, 5)
    assert stokes_snapshots.data["u"].shape == (nt * L.n_control, 5)
    assert not stokes_snapshots.partial


def test_snapshot_roundtrip(tmp_path, ns_snapshots):
    path = tmp_path / "s.bin"
    ns_snapshots.save(path)
    back = pod.SnapshotSet.load(path)
    assert back.mus == ns_snapshots.mus
    for k in VARIABLES:
        assert np.array_equal(back.data[k], ns_snapshots.data[k])


class _Flaky:
    """Truth stand-in failing for large parameters."""

    problem = "ns_steady"

    def mu(self, v):
        return ParameterPoint("ns_steady", tuple(np.atleast_1d(v)))

    def solve(self, mu):
        if mu[0] > 1.0:
            raise SolverFailure("diverged")
        z = np.full(3, mu[0])
        return OcpSolution("ns_steady", mu, z, z[:2], z[:1], z, z[:2], 0 * z, cost=1.0)


def test_failed_snapshots_are_excluded():
    with pytest.warns(RuntimeWarning):
        s = pod.collect_snapshots(_Flaky(), [(0.8,), (1.2,), (0.9,)])
    assert s.size == 2 and s.partial
    assert s.failed[0][0] == (1.2,)
    with pytest.raises(SolverFailure), pytest.warns(RuntimeWarning):
        pod.collect_snapshots(_Flaky(), [(1.2,)])


def test_parallel_collection_matches_serial(ns_truth):
    mus = pod.sample_training_set("ns_steady", 2, seed=4)
    a = pod.collect_snapshots(ns_truth, mus, jobs=1)
    b = pod.collect_snapshots(ns_truth, mus, jobs=2)
    for k in VARIABLES:
        assert np.array_equal(a.data[k], b.data[k])


def test_supremizer_equation(ns_truth, ns_snapshots):
    L = ns_truth.layout
    X = pod.space_time_inner_product(ns_truth, "p")
    _, Q = pod.pod(ns_snapshots, "p", X, n=3)
    D = pod.reference_divergence(ns_truth)
    S = pod.compute_supremizers(Q, L, D)
    free = L.free_velocity_mask
    Xv = pod.space_time_inner_product(ns_truth, "v")
    res = (Xv @ S - D.T @ Q)[free]
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm((D.T @ Q)[free])
    assert np.all(S[~free] == 0.0)


def test_supremizers_per_time_slice(stokes_truth, stokes_snapshots):
    L, nt = stokes_truth.layout, stokes_truth.nt
    D = pod.reference_divergence(stokes_truth)
    q = stokes_snapshots.data["p"][:, :1]
    s = pod.compute_supremizers(q, L, D, nt)
    one = pod.compute_supremizers(q[L.n_pressure:2 * L.n_pressure], L, D)
    assert np.allclose(s[L.n_velocity:2 * L.n_velocity], one)
    with pytest.raises(InvalidArgumentError):
        pod.compute_supremizers(q[:-1], L, D, nt)


@pytest.mark.parametrize("which", ["stokes", "ns"])
def test_aggregated_dimension_and_orthonormality(which, request):
    truth = request.getfixturevalue(f"{which}_truth")
    snaps = request.getfixturevalue(f"{which}_snapshots")
    inner = request.getfixturevalue(f"{which}_inner")
    basis, spectra = pod.build_reduced_basis(snaps, truth, eps_tol=1e-14, n_max=4)
    assert basis.n == 4
    assert basis.dimension == 13 * 4
    assert basis.gram_error(inner) <= 1e-10
    plain, _ = pod.build_reduced_basis(snaps, truth, eps_tol=1e-14, n_max=4, supremizers=False)
    assert plain.dimension == 9 * 4


def test_nested_truncation_matches_reaggregation(ns_truth, ns_snapshots, ns_inner):
    big, _ = pod.build_reduced_basis(ns_snapshots, ns_truth, eps_tol=1e-14, n_max=4)
    small, _ = pod.build_reduced_basis(ns_snapshots, ns_truth, eps_tol=1e-14, n_max=2)
    cut = big.truncate(2)
    assert cut.dimension == small.dimension == 26
    for var, key in (("v", "v"), ("p", "p"), ("u", "u")):
        A, B, X = cut.basis(var), small.basis(var), ns_inner[key]
        # same span: projecting B onto span(A) loses nothing
        R = B - A @ (A.T @ (X @ B))
        assert np.sqrt(np.einsum("ij,ij->", R, X @ R)) <= 1e-8


def test_truncation_bounds(ns_model):
    with pytest.raises(InvalidArgumentError):
        ns_model.basis.truncate(0)
    with pytest.raises(InvalidArgumentError):
        ns_model.basis.truncate(ns_model.n + 1)


def test_aggregate_rejects_mismatched_counts(rng):
    a = rng.standard_normal((6, 2))
    with pytest.raises(InvalidArgumentError):
        pod.aggregate(a, a, a, a[:, :1], a, {k: sp.identity(6) for k in "vpu"})


def test_basis_roundtrip_and_determinism(tmp_path, ns_truth, ns_snapshots):
    b1, _ = pod.build_reduced_basis(ns_snapshots, ns_truth, eps_tol=1e-6, n_max=3)
    b2, _ = pod.build_reduced_basis(ns_snapshots, ns_truth, eps_tol=1e-6, n_max=3)
    b1.save(tmp_path / "a.bin")
    b2.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = pod.ReducedBasis.load(tmp_path / "a.bin")
    assert np.array_equal(back.velocity, b1.velocity)
    assert np.array_equal(back.velocity_labels, b1.velocity_labels)
    assert back.meta["supremizers"] is True
