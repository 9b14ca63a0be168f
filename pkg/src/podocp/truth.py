"""Full-order one-shot optimality systems for both benchmarks.

Unknowns are always ordered by variable: state velocity ``v`` (stored
homogenized, i.e. with the Dirichlet lift subtracted), state pressure ``p``,
control ``u``, adjoint velocity ``w`` and adjoint pressure ``q``.  For the
time-dependent problem each variable block stacks all time nodes.

The systems are the Lagrangian KKT conditions of the discrete problem, so
the linear-quadratic Stokes matrix and every Newton Jacobian of the
Navier-Stokes problem are symmetric.  Dirichlet velocity dofs of ``v`` and
``w`` are eliminated symmetrically: their rows and columns are zeroed and
a unit diagonal is inserted.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as scipy_linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from . import geometry as geo
from .errors import (InvalidArgumentError, LineSearchStagnation, NonConvergenceError,
                     SolverFailure)
from .problems import NS_BOX, NS_STEADY, STOKES_TD, make_mu

log = logging.getLogger(__name__)

VARIABLES = ("v", "p", "u", "w", "q")


@dataclass(frozen=True)
class StokesConfig:
    """Settings of the time-dependent Stokes benchmark."""

    h: float = 0.25
    nt: int = 20
    final_time: float = 1.0
    alpha1: float = 1e-3
    alpha2: float = 1e-4
    inflow_scale: float = 1.0
    # "lift": v(0) equals the Dirichlet lift; "stokes": uncontrolled steady flow
    initial_state: str = "lift"
    # accepted relative residual of the space-time system
    tol: float = 1e-9

    def __post_init__(self):
        if int(self.nt) < 1:
            raise InvalidArgumentError(f"Nt must be a positive integer, got {self.nt}")
        if self.initial_state not in ("lift", "stokes"):
            raise InvalidArgumentError(f"unknown initial state {self.initial_state!r}")

    @property
    def dt(self):
        return self.final_time / self.nt


@dataclass(frozen=True)
class NavierStokesConfig:
    """Settings of the steady Navier-Stokes benchmark."""

    h: float = 0.1
    eta: float = 1.0
    alpha: float = 1e-3
    tol: float = 1e-9
    max_iter: int = 25
    min_step: float = 2.0**-10
    box: tuple = NS_BOX
    inflow_scale: float = 1.0


@dataclass
class KktSystem:
    """Assembled (linearized) optimality system.

    ``blocks`` maps each variable to its slice of the unknown vector.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    blocks: dict
    problem: str
    nt: int = 1

    @property
    def shape(self):
        return self.matrix.shape

    def block(self, row, col):
        return self.matrix[self.blocks[row]][:, self.blocks[col]]

    def split(self, x):
        return {k: x[s] for k, s in self.blocks.items()}


@dataclass
class OcpSolution:
    """Optimal state, control and adjoint.

    For ``stokes_td`` every field has shape ``(nt, n_dofs)``; for
    ``ns_steady`` shape ``(n_dofs,)``.  ``v`` is the full state velocity
    (lift included).
    """

    problem: str
    mu: object
    v: np.ndarray
    p: np.ndarray
    u: np.ndarray
    w: np.ndarray
    q: np.ndarray
    lift: np.ndarray
    cost: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def fields(self):
        return {"v": self.v, "p": self.p, "u": self.u, "w": self.w, "q": self.q}

    def homogenized(self, variable):
        """Field of ``variable`` as stored in snapshots (lift removed from v)."""
        if variable == "v":
            return self.v - self.lift
        return self.fields[variable]

    def snapshot(self, variable):
        return np.ravel(self.homogenized(variable))


def _block_slices(sizes):
    out, start = {}, 0
    for name in VARIABLES:
        out[name] = slice(start, start + sizes[name])
        start += sizes[name]
    return out, start


def _lu(matrix, what):
    try:
        return spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:  # singular factor
        raise SolverFailure(f"sparse factorization of the {what} failed: {exc}",
                            {"shape": matrix.shape}) from exc


def _relative_residual(matrix, x, rhs):
    r = matrix @ x - rhs
    scale = max(np.linalg.norm(rhs), np.linalg.norm(matrix @ x), 1e-300)
    return float(np.linalg.norm(r) / scale), r


# -- affine operator pieces ---------------------------------------------------

def stokes_affine_terms(layout):
    """mu-independent blocks of the stretched-domain Stokes operators.

    Returns ``{"mass": [...], "stiffness": [...], "divergence": [...]}``,
    each a list of ``(coefficient name, sparse matrix)``.  The coefficient
    names refer to :func:`stokes_theta`.
    """
    ch = geo.CHANNEL
    br = (geo.UPPER_BRANCH, geo.LOWER_BRANCH)
    F = fem.assemble_form
    return {
        "mass": [
            ("mass_channel", F(fem.VELOCITY_MASS, layout, subdomains=ch)),
            ("one", F(fem.VELOCITY_MASS, layout, subdomains=br)),
        ],
        "stiffness": [
            ("stiffness_x_channel", F(fem.VELOCITY_STIFFNESS, layout, subdomains=ch, component=0)),
            ("stiffness_y_channel", F(fem.VELOCITY_STIFFNESS, layout, subdomains=ch, component=1)),
            ("viscosity", F(fem.VELOCITY_STIFFNESS, layout, subdomains=br)),
        ],
        "divergence": [
            ("divergence_x_channel", F(fem.PRESSURE_DIVERGENCE, layout, subdomains=ch, component=0)),
            ("divergence_y_channel", F(fem.PRESSURE_DIVERGENCE, layout, subdomains=ch, component=1)),
            ("one", F(fem.PRESSURE_DIVERGENCE, layout, subdomains=br)),
        ],
    }


def stokes_theta(mu):
    """Scalar coefficients of the affine Stokes terms at ``mu``."""
    mu = make_mu(STOKES_TD, mu)
    g = geo.affine_geometry_factors(mu[1])
    nu = mu[0]
    return {
        "one": 1.0,
        "viscosity": nu,
        "mass_channel": g["mass"],
        "stiffness_x_channel": nu * g["stiffness_x"],
        "stiffness_y_channel": nu * g["stiffness_y"],
        "divergence_x_channel": g["divergence_x"],
        "divergence_y_channel": g["divergence_y"],
        "target": mu[2],
    }


def combine(terms, theta):
    out = None
    for name, mat in terms:
        piece = theta[name] * mat
        out = piece if out is None else out + piece
    return out.tocsr()


# -- time-dependent Stokes ------------------------------------------------------

class StokesTD:
    """Space-time truth discretization of the Stokes boundary-control problem.

    Implicit Euler on ``nt`` uniform steps of [0, T]; the unknowns live on
    the nodes t_1, ..., t_nt and v(t_0) is prescribed.
    """

    problem = STOKES_TD

    def __init__(self, config=None, mesh=None):
        self.config = config or StokesConfig()
        self.mesh = mesh if mesh is not None else geo.build_bifurcation_mesh(self.config.h)
        self.layout = fem.build_layout(self.mesh)
        L = self.layout
        self.terms = stokes_affine_terms(L)
        self.obs_mass = fem.assemble_form(fem.OBS_MASS, L)
        self.control_mass = fem.assemble_form(fem.CONTROL_MASS, L)
        self.control_tangential = fem.assemble_form(fem.CONTROL_TANGENTIAL, L)
        self.coupling = fem.assemble_form(fem.CONTROL_COUPLING, L)
        c = self.config
        self.control_hessian = (c.alpha1 * self.control_mass
                                + c.alpha2 * self.control_tangential).tocsr()
        self._lift, _ = fem.lift_dirichlet(None, STOKES_TD, L, inflow_scale=c.inflow_scale)
        self._target_unit = fem.interpolate_target((0.0, 1.0, 1.0), STOKES_TD, L)
        sizes = {k: v * c.nt for k, v in L.sizes().items()}
        self.blocks, self.dimension = _block_slices(sizes)

    @property
    def nt(self):
        return self.config.nt

    @property
    def dt(self):
        return self.config.dt

    def mu(self, values):
        return make_mu(STOKES_TD, values)

    def lift(self, mu=None):
        return self._lift

    def target(self, mu):
        return self.mu(mu)[2] * self._target_unit

    def operators(self, mu):
        th = stokes_theta(mu)
        return {k: combine(v, th) for k, v in self.terms.items()}

    def _dirichlet_mask(self):
        L = self.layout
        mask = np.ones(self.dimension, dtype=bool)
        for var in ("v", "w"):
            start = self.blocks[var].start
            for n in range(self.nt):
                mask[start + n * L.n_velocity + L.dirichlet_dofs] = False
        return mask

    def initial_velocity(self, mu):
        """Homogenized v(t_0)."""
        if self.config.initial_state == "lift":
            return np.zeros(self.layout.n_velocity)
        op = self.operators(mu)
        v0, _ = _steady_stokes(self.layout, op["stiffness"], op["divergence"], self._lift)
        return v0

    def assemble_kkt(self, mu):
        mu = self.mu(mu)
        L, nt, dt = self.layout, self.nt, self.dt
        op = self.operators(mu)
        M, K, D = op["mass"], op["stiffness"], op["divergence"]
        eye = sp.identity(nt, format="csr")
        diff = (eye - sp.eye(nt, k=-1)).tocsr()

        A_wv = sp.kron(diff, M) + dt * sp.kron(eye, K)
        A_wp = dt * sp.kron(eye, D.T)
        A_wu = dt * sp.kron(eye, self.coupling)
        A_qv = dt * sp.kron(eye, D)
        H_vv = dt * sp.kron(eye, self.obs_mass)
        H_uu = dt * sp.kron(eye, self.control_hessian)

        K_full = sp.bmat([
            [H_vv, None, None, A_wv.T, A_qv.T],
            [None, None, None, A_wp.T, None],
            [None, None, H_uu, A_wu.T, None],
            [A_wv, A_wp, A_wu, None, None],
            [A_qv, None, None, None, None],
        ], format="csr")

        lift = self._lift
        vd = self.target(mu)
        ones = np.ones(nt)
        rhs = np.zeros(self.dimension)
        rhs[self.blocks["v"]] = dt * np.kron(ones, self.obs_mass @ (vd - lift))
        g_w = np.kron(ones, -dt * (K @ lift))
        g_w[: L.n_velocity] += M @ self.initial_velocity(mu)
        rhs[self.blocks["w"]] = g_w
        rhs[self.blocks["q"]] = np.kron(ones, -dt * (D @ lift))

        mask = self._dirichlet_mask()
        keep = sp.diags(mask.astype(float))
        K_full = (keep @ K_full @ keep + sp.diags((~mask).astype(float))).tocsr()
        rhs[~mask] = 0.0
        return KktSystem(K_full, rhs, dict(self.blocks), STOKES_TD, nt)

    def unpack(self, x, mu, diagnostics=None):
        L, nt = self.layout, self.nt
        parts = {k: x[s].reshape(nt, -1) for k, s in self.blocks.items()}
        lift = np.broadcast_to(self._lift, (nt, L.n_velocity)).copy()
        sol = OcpSolution(STOKES_TD, self.mu(mu), parts["v"] + lift, parts["p"], parts["u"],
                          parts["w"], parts["q"], lift, diagnostics=dict(diagnostics or {}))
        sol.cost = self.cost(sol.v, sol.u, mu)
        return sol

    def pack(self, sol):
        return np.concatenate([np.ravel(sol.homogenized(k)) for k in VARIABLES])

    def solve(self, mu, tol=None, method="schur", check=True):
        """Direct solve of the space-time optimality system.

        ``method="schur"`` eliminates states and adjoints step by step with
        one sparse factorization of the time-step operator and solves the
        dense control Schur complement; ``method="lu"`` factorizes the
        assembled monolithic matrix (exact too, far slower).  With
        ``check`` the result is verified against the assembled matrix.
        """
        mu = self.mu(mu)
        tol = self.config.tol if tol is None else tol
        t0 = time.perf_counter()
        if method == "lu":
            kkt = self.assemble_kkt(mu)
            x = _lu(kkt.matrix, "space-time KKT matrix").solve(kkt.rhs)
        elif method == "schur":
            kkt = None
            x = self._solve_schur(mu)
        else:
            raise InvalidArgumentError(f"unknown solve method {method!r}")
        t1 = time.perf_counter()
        diag = {"solve_time": t1 - t0, "method": method, "dimension": self.dimension}
        if not check:
            return self.unpack(x, mu, diag)
        kkt = kkt or self.assemble_kkt(mu)
        rel, r = _relative_residual(kkt.matrix, x, kkt.rhs)
        diag["residual"] = rel
        if not np.isfinite(rel) or rel > tol:
            diag["block_residuals"] = {k: float(np.linalg.norm(r[s]))
                                       for k, s in kkt.blocks.items()}
            raise SolverFailure(f"space-time KKT residual {rel:.3e} above {tol:.1e}", diag)
        return self.unpack(x, mu, diag)

    def _step_operators(self, mu):
        """Free-dof blocks of one implicit Euler step (time invariant)."""
        L, dt = self.layout, self.dt
        op = self.operators(mu)
        f = L.free_velocity_mask
        M = op["mass"][f][:, f]
        K = op["stiffness"]
        D = op["divergence"]
        Df = D[:, f]
        step = sp.bmat([[M + dt * K[f][:, f], dt * Df.T], [dt * Df, None]], format="csc")
        nf = int(f.sum())
        return {"op": op, "free": f, "nf": nf, "M": M, "step": step,
                "coupling": dt * self.coupling[f].toarray(),
                "obs": self.obs_mass[f][:, f].tocsr()}

    def _solve_schur(self, mu):
        L, nt, dt = self.layout, self.nt, self.dt
        s = self._step_operators(mu)
        f, nf, M = s["free"], s["nf"], s["M"]
        op = s["op"]
        lu = _lu(s["step"], "time-step operator")
        ns = s["step"].shape[0]
        nu = L.n_control
        Mobs = s["obs"]

        def shift(x):  # subdiagonal coupling applied to one step state
            out = np.zeros_like(x)
            out[:nf] = M @ x[:nf]
            return out

        def forward(b):
            x = np.empty_like(b)
            prev = np.zeros(b.shape[1:])
            for n in range(nt):
                prev = lu.solve(b[n] + shift(prev))
                x[n] = prev
            return x

        def backward(c):
            z = np.empty_like(c)
            nxt = np.zeros(c.shape[1:])
            for n in reversed(range(nt)):
                nxt = lu.solve(c[n] + shift(nxt), trans="T")
                z[n] = nxt
            return z

        def control_term(u):  # A_u u per step
            out = np.zeros((nt, ns))
            out[:, :nf] = u @ s["coupling"].T
            return out

        def hess_state(x):  # H_ss x per step
            out = np.zeros_like(x)
            out[:, :nf] = dt * (Mobs @ x[:, :nf].T).T
            return out

        lift = self._lift
        vd = self.target(mu)
        g = np.zeros((nt, ns))
        g[:, :nf] = (-dt * (op["stiffness"] @ lift))[f]
        g[:, nf:] = -dt * (op["divergence"] @ lift)
        g[0, :nf] += (op["mass"] @ self.initial_velocity(mu))[f]
        h_s = np.zeros((nt, ns))
        h_s[:, :nf] = dt * (self.obs_mass @ (vd - lift))[f]

        # impulse responses of the control, observed where H_ss acts
        obs_rows = np.unique(Mobs.nonzero()[0])
        resp = np.zeros((nt, ns, nu))
        b = np.zeros((ns, nu))
        b[:nf] = s["coupling"]
        x = lu.solve(b)
        resp[0] = x
        for k in range(1, nt):
            x = lu.solve(shift(x))
            resp[k] = x
        no = len(obs_rows)
        G = np.zeros((nt * no, nt * nu))
        for n in range(nt):
            for m in range(n + 1):
                G[n * no:(n + 1) * no, m * nu:(m + 1) * nu] = resp[n - m][obs_rows]
        W = dt * Mobs[obs_rows][:, obs_rows].toarray()
        WG = np.einsum("ij,njk->nik", W, G.reshape(nt, no, -1)).reshape(nt * no, -1)
        reduced = G.T @ WG + dt * np.kron(np.eye(nt), self.control_hessian.toarray())

        s_g = forward(g)
        y = backward(h_s - hess_state(s_g))
        r_u = -(y[:, :nf] @ s["coupling"]).ravel()
        u = scipy_linalg.solve(reduced, r_u, assume_a="pos").reshape(nt, nu)

        state = forward(g - control_term(u))
        adj = backward(h_s - hess_state(state))

        nv, npr = L.n_velocity, L.n_pressure
        v = np.zeros((nt, nv))
        w = np.zeros((nt, nv))
        v[:, f] = state[:, :nf]
        w[:, f] = adj[:, :nf]
        parts = {"v": v, "p": state[:, nf:], "u": u, "w": w, "q": adj[:, nf:]}
        return np.concatenate([parts[k].ravel() for k in VARIABLES])

    def cost(self, v, u, mu):
        """Discrete cost: rectangle rule in time on the nodes t_1..t_nt."""
        v = np.atleast_2d(v)
        u = np.atleast_2d(u)
        e = v - self.target(mu)
        misfit = np.einsum("ni,ni->", e, (self.obs_mass @ e.T).T)
        reg = np.einsum("ni,ni->", u, (self.control_hessian @ u.T).T)
        return float(0.5 * self.dt * (misfit + reg))

    def forward(self, mu, control=None):
        """Time-stepping state solve for a given control history.

        Independent of the monolithic optimality system; used as oracle for
        uncontrolled costs and gradient checks.  Returns full velocities and
        pressures, shapes ``(nt, N_v)`` and ``(nt, N_p)``.
        """
        mu = self.mu(mu)
        L, nt, dt = self.layout, self.nt, self.dt
        if control is None:
            control = np.zeros((nt, L.n_control))
        control = np.asarray(control, dtype=float).reshape(nt, L.n_control)
        op = self.operators(mu)
        M, K, D = op["mass"], op["stiffness"], op["divergence"]
        step = sp.bmat([[M + dt * K, dt * D.T], [dt * D, None]], format="csr")
        nv = L.n_velocity
        mask = np.ones(step.shape[0], dtype=bool)
        mask[L.dirichlet_dofs] = False
        keep = sp.diags(mask.astype(float))
        step = (keep @ step @ keep + sp.diags((~mask).astype(float))).tocsc()
        lu = _lu(step, "time-step matrix")
        lift = self._lift
        base_w = -dt * (K @ lift)
        base_q = -dt * (D @ lift)
        prev = self.initial_velocity(mu)
        vs, ps = [], []
        for n in range(nt):
            rhs = np.concatenate([M @ prev + base_w - dt * (self.coupling @ control[n]), base_q])
            rhs[~mask] = 0.0
            x = lu.solve(rhs)
            prev = x[:nv]
            vs.append(prev + lift)
            ps.append(x[nv:])
        return np.array(vs), np.array(ps)


def _steady_stokes(layout, K, D, lift, forcing=None, control_term=None):
    """Homogenized steady Stokes velocity and pressure with do-nothing outlets."""
    A = sp.bmat([[K, D.T], [D, None]], format="csr")
    nv = layout.n_velocity
    mask = np.ones(A.shape[0], dtype=bool)
    mask[layout.dirichlet_dofs] = False
    keep = sp.diags(mask.astype(float))
    A = keep @ A @ keep + sp.diags((~mask).astype(float))
    rhs = np.concatenate([-(K @ lift), -(D @ lift)])
    if forcing is not None:
        rhs[:nv] += forcing
    if control_term is not None:
        rhs[:nv] += control_term
    rhs[~mask] = 0.0
    x = _lu(A, "steady Stokes matrix").solve(rhs)
    return x[:nv], x[nv:]


def solve_stokes_dirichlet(layout, forcing, boundary_velocity, viscosity=1.0):
    """Steady Stokes with velocity prescribed on every Dirichlet node.

    ``forcing(x)`` and ``boundary_velocity(x)`` map points ``(..., 2)`` to
    vectors ``(..., 2)``.  On a fully enclosed domain the pressure is fixed
    by pinning its first dof; callers compare modulo constants.
    Returns the velocity and pressure coefficient vectors.
    """
    K = viscosity * fem.assemble_form(fem.VELOCITY_STIFFNESS, layout)
    D = fem.assemble_form(fem.PRESSURE_DIVERGENCE, layout)
    nodes = layout.dirichlet_nodes
    g = np.zeros(layout.n_velocity)
    vals = np.asarray(boundary_velocity(layout.node_coords[nodes]))
    g[nodes] = vals[:, 0]
    g[nodes + layout.n_nodes] = vals[:, 1]
    A = sp.bmat([[K, D.T], [D, None]], format="csr")
    nv = layout.n_velocity
    mask = np.ones(A.shape[0], dtype=bool)
    mask[layout.dirichlet_dofs] = False
    enclosed = not np.any(layout.mesh.boundary_tags == geo.CONTROL)
    if enclosed:
        mask[nv] = False
    rhs = np.concatenate([fem.load_vector(layout, forcing), np.zeros(layout.n_pressure)])
    rhs -= A @ np.concatenate([g, np.zeros(layout.n_pressure)])
    keep = sp.diags(mask.astype(float))
    A = keep @ A @ keep + sp.diags((~mask).astype(float))
    rhs[~mask] = 0.0
    x = _lu(A, "steady Stokes matrix").solve(rhs)
    return x[:nv] + g, x[nv:]


# -- steady Navier-Stokes --------------------------------------------------------

class NavierStokesOCP:
    """Steady Navier-Stokes boundary-control problem on the reference domain."""

    problem = NS_STEADY

    def __init__(self, config=None, mesh=None):
        self.config = config or NavierStokesConfig()
        self.mesh = mesh if mesh is not None else geo.build_bifurcation_mesh(self.config.h)
        self.layout = L = fem.build_layout(self.mesh)
        c = self.config
        self.mass = fem.assemble_form(fem.VELOCITY_MASS, L)
        self.stiffness = fem.assemble_form(fem.VELOCITY_STIFFNESS, L)
        self.divergence = fem.assemble_form(fem.PRESSURE_DIVERGENCE, L)
        self.obs_mass = fem.assemble_form(fem.OBS_MASS, L)
        self.control_mass = fem.assemble_form(fem.CONTROL_MASS, L)
        self.control_tangential = fem.assemble_form(fem.CONTROL_TANGENTIAL, L)
        self.coupling = fem.assemble_form(fem.CONTROL_COUPLING, L)
        self.control_hessian = (c.alpha * self.control_mass
                                + 0.1 * c.alpha * self.control_tangential).tocsr()
        self._lift_unit, _ = fem.lift_dirichlet((1.0,), NS_STEADY, L, inflow_scale=c.inflow_scale)
        self._target_unit = fem.interpolate_target((1.0,), NS_STEADY, L)
        self.blocks, self.dimension = _block_slices(L.sizes())
        self._free = L.free_velocity_mask.astype(float)

    def mu(self, values):
        return make_mu(NS_STEADY, values, self.config.box)

    def lift(self, mu):
        return self.mu(mu)[0] * self._lift_unit

    def target(self, mu):
        return self.mu(mu)[0] * self._target_unit

    def split(self, x):
        return {k: x[s] for k, s in self.blocks.items()}

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise InvalidArgumentError(
                f"iterate has shape {x.shape}, expected ({self.dimension},)")
        return x

    def residual(self, x, mu, convection=True):
        """Gradient of the discrete Lagrangian at ``x`` (Dirichlet rows hold values)."""
        x = self._check(x)
        mu = self.mu(mu)
        eta = self.config.eta
        P = self._free
        s = self.split(x)
        v0, w = P * s["v"], P * s["w"]
        v = self.lift(mu) + v0
        K, D = self.stiffness, self.divergence
        r_v = self.obs_mass @ (v - self.target(mu)) + eta * (K.T @ w) + D.T @ s["q"]
        r_w = eta * (K @ v) + D.T @ s["p"] + self.coupling @ s["u"]
        if convection:
            C, Cp = fem.assemble_convection(v, self.layout)
            r_v = r_v + (C + Cp).T @ w
            r_w = r_w + fem.convection_vector(v, v, self.layout)
        out = np.empty(self.dimension)
        out[self.blocks["v"]] = P * r_v + (1 - P) * s["v"]
        out[self.blocks["p"]] = D @ w
        out[self.blocks["u"]] = self.control_hessian @ s["u"] + self.coupling.T @ w
        out[self.blocks["w"]] = P * r_w + (1 - P) * s["w"]
        out[self.blocks["q"]] = D @ v
        return out

    def jacobian(self, x, mu, convection=True):
        x = self._check(x)
        mu = self.mu(mu)
        eta = self.config.eta
        P = sp.diags(self._free)
        I_P = sp.diags(1.0 - self._free)
        s = self.split(x)
        v = self.lift(mu) + self._free * s["v"]
        w = self._free * s["w"]
        A = eta * self.stiffness
        H = self.obs_mass
        if convection:
            C, Cp = fem.assemble_convection(v, self.layout)
            A = A + C + Cp
            H = H + fem.convection_hessian(w, self.layout)
        A = P @ A @ P
        D = self.divergence @ P
        Bc = P @ self.coupling
        return sp.bmat([
            [P @ H @ P + I_P, None, None, A.T, D.T],
            [None, None, None, D, None],
            [None, None, self.control_hessian, Bc.T, None],
            [A, D.T, Bc, I_P, None],
            [D, None, None, None, None],
        ], format="csr")

    def assemble_newton_step(self, x, mu, convection=True):
        """Jacobian and right-hand side (-residual) at the iterate ``x``."""
        return KktSystem(self.jacobian(x, mu, convection), -self.residual(x, mu, convection),
                         dict(self.blocks), NS_STEADY)

    def pack(self, sol):
        return np.concatenate([sol.homogenized(k) for k in VARIABLES])

    def unpack(self, x, mu, diagnostics=None):
        s = self.split(x)
        lift = self.lift(mu)
        sol = OcpSolution(NS_STEADY, self.mu(mu), s["v"] + lift, s["p"].copy(), s["u"].copy(),
                          s["w"].copy(), s["q"].copy(), lift,
                          diagnostics=dict(diagnostics or {}))
        sol.cost = self.cost(sol.v, sol.u, mu)
        return sol

    def stokes_guess(self, mu):
        """Optimal control of the Stokes problem (convection dropped)."""
        x0 = np.zeros(self.dimension)
        kkt = self.assemble_newton_step(x0, mu, convection=False)
        return _lu(kkt.matrix, "Stokes-OCP matrix").solve(kkt.rhs)

    def residual_scale(self, mu):
        return max(1.0, float(np.linalg.norm(self.residual(np.zeros(self.dimension), mu))))

    def solve(self, mu, x0=None):
        """Damped Newton on the optimality system from the Stokes-OCP guess.

        Converged when the residual norm drops below ``tol`` times the
        residual of the zero iterate (at least 1).  Armijo backtracking
        halves the step down to ``min_step``.
        """
        mu = self.mu(mu)
        c = self.config
        t0 = time.perf_counter()
        x = self.stokes_guess(mu) if x0 is None else np.array(x0, dtype=float)
        target = c.tol * self.residual_scale(mu)
        r = self.residual(x, mu)
        norm = float(np.linalg.norm(r))
        history, steps = [norm], []
        it = 0
        while norm > target:
            if it >= c.max_iter:
                raise NonConvergenceError(
                    f"Newton did not converge in {c.max_iter} iterations",
                    {"residual_history": history, "steps": steps})
            J = self.jacobian(x, mu)
            dx = _lu(J, "Newton Jacobian").solve(-r)
            t = 1.0
            while True:
                trial = x + t * dx
                r_trial = self.residual(trial, mu)
                n_trial = float(np.linalg.norm(r_trial))
                if n_trial <= (1.0 - 1e-4 * t) * norm:
                    break
                t *= 0.5
                if t < c.min_step:
                    raise LineSearchStagnation(
                        "line search stagnated", {"residual_history": history, "steps": steps})
            x, r, norm = trial, r_trial, n_trial
            history.append(norm)
            steps.append(t)
            it += 1
        diag = {"residual": norm, "residual_target": target, "residual_history": history,
                "steps": steps, "newton_iterations": it,
                "solve_time": time.perf_counter() - t0, "dimension": self.dimension}
        log.debug("ns_steady mu=%s converged in %d Newton steps", mu.values, it)
        return self.unpack(x, mu, diag)

    def cost(self, v, u, mu):
        e = np.asarray(v) - self.target(mu)
        u = np.asarray(u)
        return float(0.5 * e @ (self.obs_mass @ e) + 0.5 * u @ (self.control_hessian @ u))

    def forward(self, mu, control=None, tol=1e-11, max_iter=30):
        """Navier-Stokes state solve for a fixed control (Newton, no line search).

        Returns the full velocity and the pressure.
        """
        mu = self.mu(mu)
        L = self.layout
        if control is None:
            control = np.zeros(L.n_control)
        eta = self.config.eta
        K, D = self.stiffness, self.divergence
        lift = self.lift(mu)
        ctrl = -(self.coupling @ control)
        v0, p = _steady_stokes(L, eta * K, D, lift, control_term=ctrl)
        nv = L.n_velocity
        mask = np.ones(nv + L.n_pressure, dtype=bool)
        mask[L.dirichlet_dofs] = False
        keep = sp.diags(mask.astype(float))
        unit = sp.diags((~mask).astype(float))
        scale = None
        for _ in range(max_iter):
            v = lift + v0
            r = np.concatenate([eta * (K @ v) + D.T @ p + fem.convection_vector(v, v, L)
                                - ctrl, D @ v])
            r[~mask] = 0.0
            norm = np.linalg.norm(r)
            scale = scale or max(norm, 1.0)
            if norm <= tol * scale:
                return v, p
            C, Cp = fem.assemble_convection(v, L)
            J = sp.bmat([[eta * K + C + Cp, D.T], [D, None]], format="csr")
            J = keep @ J @ keep + unit
            dx = _lu(J, "forward Navier-Stokes Jacobian").solve(-r)
            v0 = v0 + dx[:nv]
            p = p + dx[nv:]
        raise NonConvergenceError("forward Navier-Stokes solve did not converge")


# -- functional interface ---------------------------------------------------------

def assemble_kkt_stokes_td(mu, disc):
    return disc.assemble_kkt(mu)


def solve_stokes_td(mu, disc):
    return disc.solve(mu)


def assemble_newton_step_ns(mu, current, disc):
    x = disc.pack(current) if isinstance(current, OcpSolution) else current
    return disc.assemble_newton_step(x, mu)


def solve_ns_ocp(mu, disc):
    return disc.solve(mu)


def evaluate_cost(sol, disc):
    return disc.cost(sol.v, sol.u, sol.mu)


def make_truth(problem, config=None, mesh=None):
    if problem == STOKES_TD:
        return StokesTD(config, mesh)
    if problem == NS_STEADY:
        return NavierStokesOCP(config, mesh)
    raise InvalidArgumentError(f"unknown problem id {problem!r}")


def with_config(disc, **changes):
    """Same mesh, modified configuration."""
    return type(disc)(replace(disc.config, **changes), disc.mesh)
