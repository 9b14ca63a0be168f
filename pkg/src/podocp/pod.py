"""Offline stage: snapshots, POD, supremizers and aggregated reduced bases."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import fem
from . import io as pio
from .errors import InvalidArgumentError, PodOcpError, SolverFailure
from .problems import STOKES_TD, ParameterPoint, default_box
from .truth import VARIABLES, combine, stokes_theta

log = logging.getLogger(__name__)

DEFAULT_EPS_TOL = 1e-4
CLAMP = 1e-12
# group ids of the aggregated spaces
VELOCITY_GROUPS = ("v", "w", "supremizer_p", "supremizer_q")
PRESSURE_GROUPS = ("p", "q")
CONTROL_GROUPS = ("u",)


# -- training sets and snapshots ---------------------------------------------------

def sample_training_set(problem, size, seed=0, box=None):
    """``size`` points drawn uniformly from ``box`` (default: the problem box)."""
    if int(size) < 1:
        raise InvalidArgumentError(f"training set size must be >= 1, got {size}")
    box = tuple(tuple(b) for b in (box or default_box(problem)))
    lo, hi = np.array(box, dtype=float).T
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((int(size), len(lo)))
    return [ParameterPoint(problem, tuple(p), box) for p in pts]


def space_time_inner_product(truth, variable):
    """Gram matrix of ``variable`` on the snapshot vectors.

    For ``stokes_td`` the spatial product is summed over the time nodes
    with weight dt.
    """
    X = fem.inner_product(variable, truth.layout)
    if truth.problem == STOKES_TD:
        X = truth.dt * sp.kron(sp.identity(truth.nt), X)
    return sp.csr_matrix(X)


def reference_divergence(truth):
    """Divergence operator on the undeformed domain."""
    if truth.problem == STOKES_TD:
        return combine(truth.terms["divergence"], stokes_theta((1.0, 1.0, 1.0)))
    return truth.divergence


@dataclass
class SnapshotSet:
    """Truth solutions over a training set, one column per parameter."""

    problem: str
    mus: list
    data: dict
    nt: int = 1
    failed: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def __post_init__(self):
        m = len(self.mus)
        for k, a in self.data.items():
            if a.ndim != 2 or a.shape[1] != m:
                raise InvalidArgumentError(
                    f"snapshot block {k!r} has shape {a.shape}, expected (*, {m})")

    @property
    def size(self):
        return len(self.mus)

    @property
    def partial(self):
        return bool(self.failed)

    def save(self, path):
        meta = {"kind": "snapshots", "problem": self.problem, "nt": self.nt,
                "mus": [list(m.values) for m in self.mus],
                "box": [list(b) for b in self.mus[0].box] if self.mus else None,
                "failed": [[list(m), msg] for m, msg in self.failed],
                "records": self.records,
                "lifting": "state velocity stored with the mu-scaled Dirichlet lift removed"}
        pio.save_container(path, self.data, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = pio.load_container(path)
        if meta.get("kind") != "snapshots":
            raise InvalidArgumentError(f"{path} does not hold snapshots")
        box = tuple(tuple(b) for b in meta["box"]) if meta["box"] else None
        mus = [ParameterPoint(meta["problem"], tuple(m), box) for m in meta["mus"]]
        failed = [(tuple(m), msg) for m, msg in meta["failed"]]
        return cls(meta["problem"], mus, dict(arrays), meta["nt"], failed, meta["records"])


_WORKER = {}


def _init_worker(truth):
    _WORKER["truth"] = truth


def _solve_one(mu):
    truth = _WORKER["truth"]
    try:
        sol = truth.solve(mu)
    except (SolverFailure, np.linalg.LinAlgError) as exc:
        return mu, None, f"{type(exc).__name__}: {exc}"
    cols = {k: sol.snapshot(k) for k in VARIABLES}
    rec = {"mu": list(mu.values), "cost": sol.cost,
           "residual": sol.diagnostics.get("residual"),
           "solve_time": sol.diagnostics.get("solve_time")}
    return mu, (cols, rec), None


def collect_snapshots(truth, mus, jobs=1):
    """One truth solve per training parameter.

    Failed solves are reported with a warning and left out; the returned
    set is then marked partial.
    """
    mus = [truth.mu(m) for m in mus]
    if not mus:
        raise InvalidArgumentError("empty training set")
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(truth,)) as ex:
            results = list(ex.map(_solve_one, mus))
    else:
        _init_worker(truth)
        results = [_solve_one(m) for m in mus]
    cols = {k: [] for k in VARIABLES}
    kept, failed, records = [], [], []
    for mu, out, err in results:
        if out is None:
            warnings.warn(f"truth solve failed at mu={mu.values}: {err}; excluded", RuntimeWarning)
            failed.append((mu.values, err))
            continue
        kept.append(mu)
        records.append(out[1])
        for k in VARIABLES:
            cols[k].append(out[0][k])
    if not kept:
        raise SolverFailure("every training solve failed", {"failed": failed})
    data = {k: np.column_stack(v) for k, v in cols.items()}
    return SnapshotSet(truth.problem, kept, data, getattr(truth, "nt", 1), failed, records)


# -- POD -----------------------------------------------------------------------------

@dataclass
class PodSpectrum:
    variable: str
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n: int
    eps_tol: float

    @property
    def cumulative_energy(self):
        lam = self.eigenvalues
        total = lam.sum()
        if total <= 0:
            return np.ones_like(lam)
        return np.cumsum(lam) / total

    @property
    def retained_energy(self):
        if self.n == 0:
            return 0.0 if self.eigenvalues.sum() > 0 else 1.0
        return float(self.cumulative_energy[self.n - 1])

    def n_for(self, eps_tol):
        """Smallest count retaining ``1 - eps_tol`` of the energy."""
        ce = self.cumulative_energy
        return int(min(np.searchsorted(ce, 1.0 - eps_tol - 1e-15) + 1, len(ce)))


def _orthonormalize(cols, X, drop_tol=1e-8, abs_tol=0.0):
    """Gram-Schmidt with reorthogonalization in the ``X`` product.

    Columns are processed left to right; a column is dropped when its
    norm after projection falls below ``drop_tol`` times its original
    norm or below ``abs_tol``.  Returns the orthonormal columns and the
    indices of the input columns kept.
    """
    n_rows, m = cols.shape
    Q = np.zeros((n_rows, m))
    XQ = np.zeros((n_rows, m))
    kept = []
    for j in range(m):
        c = np.array(cols[:, j], dtype=float)
        norm0 = np.sqrt(max(c @ (X @ c), 0.0))
        if norm0 == 0.0:
            continue
        k = len(kept)
        for _ in range(2):
            c -= Q[:, :k] @ (XQ[:, :k].T @ c)
        xc = X @ c
        norm = np.sqrt(max(c @ xc, 0.0))
        if norm <= max(drop_tol * norm0, abs_tol):
            continue
        Q[:, k] = c / norm
        XQ[:, k] = xc / norm
        kept.append(j)
    return Q[:, :len(kept)].copy(), kept


def _matrix(snapshots, variable):
    S = snapshots.data[variable] if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots)
    if S.ndim != 2 or S.shape[1] < 1:
        raise InvalidArgumentError("pod needs at least one snapshot column")
    return S


def pod_spectrum(snapshots, variable, inner, eps_tol=DEFAULT_EPS_TOL):
    """Eigenpairs of the correlation matrix ``S^T X S / m``, descending.

    Negative round-off eigenvalues are clamped to zero.
    """
    if not 0.0 < eps_tol < 1.0:
        raise InvalidArgumentError(f"eps_tol must lie in (0, 1), got {eps_tol}")
    S = _matrix(snapshots, variable)
    C = (S.T @ (inner @ S)) / S.shape[1]
    lam, rho = la.eigh(0.5 * (C + C.T))
    lam, rho = lam[::-1].copy(), rho[:, ::-1].copy()
    lam[lam < 0.0] = 0.0
    spec = PodSpectrum(variable, lam, rho, 0, eps_tol)
    if lam[0] > 0.0:
        spec.n = spec.n_for(eps_tol)
    return spec


def pod_modes(snapshots, spectrum, inner, count):
    """First ``count`` orthonormal modes.

    The combinations ``S rho_n`` are orthonormalized in eigenvalue order;
    in exact arithmetic this only rescales them by ``sqrt(m lambda_n)``,
    numerically it keeps the directions of tiny eigenvalues accurate.
    Directions whose amplitude is below ``CLAMP`` times the dominant one
    (duplicate or dependent snapshots) are dropped with a warning.
    """
    S = _matrix(snapshots, spectrum.variable)
    lam, rho = spectrum.eigenvalues, spectrum.eigenvectors
    count = min(int(count), S.shape[1])
    scale = np.sqrt(S.shape[1] * lam[0])
    modes, kept = _orthonormalize(S @ rho[:, :count], inner, drop_tol=0.0,
                                  abs_tol=CLAMP * scale)
    if len(kept) < count:
        warnings.warn(f"{spectrum.variable}: snapshot rank {len(kept)} below the requested "
                      f"{count} modes", RuntimeWarning)
    return fix_signs(modes)


def pod(snapshots, variable, inner, eps_tol=DEFAULT_EPS_TOL, n_max=None, n=None):
    """Method of snapshots for one variable.

    Parameters
    ----------
    snapshots : SnapshotSet or ndarray
        Snapshot matrix (columns) or a set from which ``variable`` is taken.
    inner : sparse matrix
        Gram matrix of the variable's inner product.
    eps_tol : float
        Energy tolerance; the retained count is the smallest one whose
        relative energy reaches ``1 - eps_tol``, capped by ``n_max``.
    n : int, optional
        Explicit mode count overriding the energy criterion (still capped
        by the numerical rank).

    Returns
    -------
    spectrum : PodSpectrum
    modes : ndarray
        Orthonormal modes, one per column, sign fixed so that the entry of
        largest magnitude is positive.
    """
    spec = pod_spectrum(snapshots, variable, inner, eps_tol)
    if spec.eigenvalues[0] <= 0.0:
        warnings.warn(f"all {variable} snapshots vanish; empty basis", RuntimeWarning)
        return spec, np.zeros((_matrix(snapshots, variable).shape[0], 0))
    count = spec.n if n is None else int(n)
    if n_max is not None:
        count = min(count, int(n_max))
    modes = pod_modes(snapshots, spec, inner, count)
    spec.n = modes.shape[1]
    return spec, modes


def fix_signs(modes):
    if modes.size == 0:
        return modes
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


# -- supremizers ----------------------------------------------------------------

def compute_supremizers(pressure_modes, layout, divergence, nt=1):
    """Riesz representers of the pressure-velocity coupling.

    For every column ``q`` (``nt`` stacked time slices) and every slice,
    solve ``X_v s = D^T q`` on the free velocity dofs, ``s = 0`` on
    Dirichlet dofs, where ``X_v`` is the velocity inner product.
    """
    Q = np.asarray(pressure_modes, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    npr, nv = layout.n_pressure, layout.n_velocity
    if Q.shape[0] != nt * npr:
        raise InvalidArgumentError(
            f"pressure columns have length {Q.shape[0]}, expected {nt * npr}")
    free = layout.free_velocity_mask
    X = fem.inner_product("v", layout)
    try:
        lu = sp.linalg.splu(sp.csc_matrix(X[free][:, free]))
    except RuntimeError as exc:
        raise SolverFailure(f"velocity inner product is singular: {exc}") from exc
    k = Q.shape[1]
    slices = Q.reshape(nt, npr, k).transpose(1, 0, 2).reshape(npr, nt * k)
    rhs = (divergence.T @ slices)[free]
    s = np.zeros((nv, nt * k))
    s[free] = lu.solve(rhs)
    return s.reshape(nv, nt, k).transpose(1, 0, 2).reshape(nt * nv, k)


# -- aggregation ----------------------------------------------------------------

@dataclass
class ReducedBasis:
    """Aggregated orthonormal bases.

    ``velocity`` serves both state and adjoint velocity, ``pressure``
    both pressures.  ``*_labels`` hold ``(group, mode index)`` per column;
    columns are interleaved by mode index so that truncation to ``n``
    keeps a leading block.
    """

    problem: str
    n: int
    velocity: np.ndarray
    pressure: np.ndarray
    control: np.ndarray
    velocity_labels: np.ndarray
    pressure_labels: np.ndarray
    control_labels: np.ndarray
    nt: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self):
        kv, kp, ku = self.velocity.shape[1], self.pressure.shape[1], self.control.shape[1]
        return {"v": kv, "p": kp, "u": ku, "w": kv, "q": kp}

    @property
    def dimension(self):
        return sum(self.sizes.values())

    @property
    def supremizers(self):
        return bool(self.meta.get("supremizers", True))

    def basis(self, variable):
        return {"v": self.velocity, "w": self.velocity, "p": self.pressure,
                "q": self.pressure, "u": self.control}[variable]

    def leading(self, n):
        """Column counts of each space kept when truncating to ``n`` modes."""
        if not 1 <= n <= self.n:
            raise InvalidArgumentError(f"truncation size {n} outside [1, {self.n}]")
        return {k: int(np.count_nonzero(lab[:, 1] < n)) for k, lab in
                (("velocity", self.velocity_labels), ("pressure", self.pressure_labels),
                 ("control", self.control_labels))}

    def truncate(self, n):
        c = self.leading(n)
        return ReducedBasis(self.problem, n, self.velocity[:, :c["velocity"]],
                            self.pressure[:, :c["pressure"]], self.control[:, :c["control"]],
                            self.velocity_labels[:c["velocity"]],
                            self.pressure_labels[:c["pressure"]],
                            self.control_labels[:c["control"]], self.nt, dict(self.meta))

    def gram_error(self, inner):
        """Largest deviation from identity of the three Gram matrices."""
        err = 0.0
        for key, Z in (("v", self.velocity), ("p", self.pressure), ("u", self.control)):
            G = Z.T @ (inner[key] @ Z)
            err = max(err, float(np.abs(G - np.eye(G.shape[0])).max(initial=0.0)))
        return err

    def save(self, path):
        arrays = {"velocity": self.velocity, "pressure": self.pressure, "control": self.control,
                  "velocity_labels": self.velocity_labels,
                  "pressure_labels": self.pressure_labels,
                  "control_labels": self.control_labels}
        meta = dict(self.meta, kind="basis", problem=self.problem, n=self.n, nt=self.nt,
                    inner_products={"v": "H1", "p": "L2", "u": "H1(control boundary)"})
        pio.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path):
        a, meta = pio.load_container(path)
        if meta.get("kind") != "basis":
            raise InvalidArgumentError(f"{path} does not hold a reduced basis")
        meta = dict(meta)
        problem, n, nt = meta.pop("problem"), meta.pop("n"), meta.pop("nt")
        meta.pop("kind")
        return cls(problem, n, a["velocity"], a["pressure"], a["control"],
                   a["velocity_labels"], a["pressure_labels"], a["control_labels"], nt, meta)


def _interleave(groups):
    """Columns ordered by mode index, then group."""
    cols, labels = [], []
    depth = max((g.shape[1] for g in groups), default=0)
    for k in range(depth):
        for gi, g in enumerate(groups):
            if k < g.shape[1]:
                cols.append(g[:, k])
                labels.append((gi, k))
    n_rows = groups[0].shape[0]
    M = np.column_stack(cols) if cols else np.zeros((n_rows, 0))
    return M, np.array(labels, dtype=np.int64).reshape(-1, 2)


def _aggregate_space(groups, X, name, expected):
    cols, labels = _interleave(groups)
    Z, kept = _orthonormalize(cols, X)
    if len(kept) < cols.shape[1]:
        warnings.warn(f"{name} space: {cols.shape[1] - len(kept)} dependent column(s) dropped; "
                      f"dimension {len(kept)} instead of {expected}", RuntimeWarning)
    return Z, labels[kept]


def aggregate(state_v, adjoint_w, state_p, adjoint_q, control, inner,
              supremizers_p=None, supremizers_q=None, problem=None, nt=1):
    """Aggregated bases of total dimension ``13 N`` (``9 N`` without supremizers).

    ``inner`` maps ``"v"``, ``"p"``, ``"u"`` to Gram matrices.
    """
    n = state_v.shape[1]
    blocks = [state_v, adjoint_w, state_p, adjoint_q, control]
    with_sup = supremizers_p is not None
    if with_sup:
        blocks += [supremizers_p, supremizers_q]
    if any(b.shape[1] != n for b in blocks):
        raise InvalidArgumentError(
            f"all inputs must share N; got {[b.shape[1] for b in blocks]}")
    vel_groups = [state_v, adjoint_w] + ([supremizers_p, supremizers_q] if with_sup else [])
    Zv, lv = _aggregate_space(vel_groups, inner["v"], "velocity", len(vel_groups) * n)
    Zp, lp = _aggregate_space([state_p, adjoint_q], inner["p"], "pressure", 2 * n)
    Zu, lu = _aggregate_space([control], inner["u"], "control", n)
    basis = ReducedBasis(problem, n, Zv, Zp, Zu, lv, lp, lu, nt, {"supremizers": with_sup})
    expected = (13 if with_sup else 9) * n
    if basis.dimension != expected:
        log.warning("reduced dimension %d differs from %d", basis.dimension, expected)
    return basis


def build_reduced_basis(snapshots, truth, eps_tol=DEFAULT_EPS_TOL, n_max=None,
                        supremizers=True):
    """POD of every variable, supremizers, aggregation.

    A common ``N`` is used for all variables: the largest count required
    by the energy criterion over the variables, capped by ``n_max`` and by
    the smallest numerical rank.
    """
    inner = {k: space_time_inner_product(truth, k) for k in ("v", "p", "u")}
    Xof = {"v": inner["v"], "w": inner["v"], "p": inner["p"], "q": inner["p"], "u": inner["u"]}
    spectra = {k: pod_spectrum(snapshots, k, Xof[k], eps_tol) for k in VARIABLES}
    n = max(s.n for s in spectra.values())
    if n_max is not None:
        n = min(n, int(n_max))
    if any(s.eigenvalues[0] <= 0.0 for s in spectra.values()):
        raise PodOcpError("a variable has only vanishing snapshots")
    modes = {k: pod_modes(snapshots, spectra[k], Xof[k], n) for k in VARIABLES}
    rank = min(m.shape[1] for m in modes.values())
    if rank < n:
        warnings.warn(f"common N lowered from {n} to the smallest snapshot rank {rank}",
                      RuntimeWarning)
        n = rank
    modes = {k: m[:, :n] for k, m in modes.items()}
    for spec in spectra.values():
        spec.n = n
    sup_p = sup_q = None
    if supremizers:
        D = reference_divergence(truth)
        nt = getattr(truth, "nt", 1)
        sup_p = compute_supremizers(modes["p"], truth.layout, D, nt)
        sup_q = compute_supremizers(modes["q"], truth.layout, D, nt)
    basis = aggregate(modes["v"], modes["w"], modes["p"], modes["q"], modes["u"], inner,
                      sup_p, sup_q, problem=truth.problem, nt=getattr(truth, "nt", 1))
    basis.meta.update(eps_tol=eps_tol, n_max=n_max, training_size=snapshots.size)
    return basis, spectra
