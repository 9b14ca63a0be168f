"""Taylor-Hood P2/P1 discretization on triangle meshes.

Degree-of-freedom conventions
-----------------------------
Scalar P2 nodes are the mesh vertices followed by the edge midpoints.
Velocity dof ``c * n_nodes + k`` is component ``c`` at node ``k``; pressure
dofs are the vertices.  The control lives on the P2 nodes lying on the
control boundary, component-major as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from . import geometry as geo
from .errors import InvalidArgumentError
from .problems import check_problem, inflow_profile, target_profile

VELOCITY_MASS = "velocity_mass_domain"
VELOCITY_STIFFNESS = "velocity_stiffness"
PRESSURE_DIVERGENCE = "pressure_divergence"
OBS_MASS = "obs_boundary_mass"
CONTROL_MASS = "control_mass_gc"
CONTROL_TANGENTIAL = "control_tangential_gradient_gc"
CONTROL_COUPLING = "control_state_coupling_gc"
PRESSURE_MASS = "pressure_mass"

FORM_KINDS = (VELOCITY_MASS, VELOCITY_STIFFNESS, PRESSURE_DIVERGENCE, OBS_MASS,
              CONTROL_MASS, CONTROL_TANGENTIAL, CONTROL_COUPLING, PRESSURE_MASS)


# -- quadrature --------------------------------------------------------------

def triangle_quadrature(degree):
    """Collapsed Gauss rule on the reference triangle (0,0), (1,0), (0,1).

    Exact for polynomials of total degree ``degree``; weights sum to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    x, wx = np.polynomial.legendre.leggauss(n)
    y, wy = roots_jacobi(n, 1.0, 0.0)
    X, Y = np.meshgrid(x, y, indexing="ij")
    W = np.outer(wx, wy) / 8.0
    xi = (1.0 + X) * (1.0 - Y) / 4.0
    eta = (1.0 + Y) / 2.0
    return np.stack([xi.ravel(), eta.ravel()], 1), W.ravel()


def line_quadrature(degree):
    """Gauss-Legendre rule on [0, 1]."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# -- reference bases ---------------------------------------------------------

def p2_basis(points):
    """Values (nq, 6) and reference gradients (nq, 6, 2) of the P2 basis.

    Local order: three vertices, then midpoints of edges (0,1), (1,2), (2,0).
    """
    xi, eta = points[:, 0], points[:, 1]
    l0, l1, l2 = 1.0 - xi - eta, xi, eta
    g0, g1, g2 = np.array([-1.0, -1.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    val = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                    4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], 1)
    grad = np.stack([
        (4 * l0 - 1)[:, None] * g0,
        (4 * l1 - 1)[:, None] * g1,
        (4 * l2 - 1)[:, None] * g2,
        4 * (l1[:, None] * g0 + l0[:, None] * g1),
        4 * (l2[:, None] * g1 + l1[:, None] * g2),
        4 * (l0[:, None] * g2 + l2[:, None] * g0),
    ], 1)
    return val, grad


def p1_basis(points):
    xi, eta = points[:, 0], points[:, 1]
    return np.stack([1.0 - xi - eta, xi, eta], 1)


def p2_line_basis(s):
    """1-D quadratic basis on [0, 1] ordered (start, end, midpoint)."""
    val = np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], 1)
    der = np.stack([4 * s - 3, 4 * s - 1, 4 - 8 * s], 1)
    return val, der


# -- layout ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DofLayout:
    """P2/P1 dof numbering plus cached element geometry for one mesh."""

    mesh: geo.Mesh
    quad_degree: int = 6

    @cached_property
    def n_nodes(self):
        return self.mesh.num_vertices + self.mesh.num_edges

    @property
    def n_velocity(self):
        return 2 * self.n_nodes

    @property
    def n_pressure(self):
        return self.mesh.num_vertices

    @property
    def n_control(self):
        return 2 * len(self.control_nodes)

    @property
    def kkt_dimension(self):
        """Size of the coupled (v, p, u, w, q) system for one time instant."""
        return 2 * self.n_velocity + 2 * self.n_pressure + self.n_control

    def sizes(self):
        return {"v": self.n_velocity, "p": self.n_pressure, "u": self.n_control,
                "w": self.n_velocity, "q": self.n_pressure}

    @cached_property
    def node_coords(self):
        m = self.mesh
        mids = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
        return np.concatenate([m.vertices, mids])

    @cached_property
    def element_nodes(self):
        m = self.mesh
        return np.concatenate([m.triangles, m.num_vertices + m.triangle_edges], axis=1)

    @cached_property
    def element_velocity_dofs(self):
        en = self.element_nodes
        return np.concatenate([en, en + self.n_nodes], axis=1)

    def edge_nodes(self, edges):
        """(start, end, midpoint) P2 nodes of the given edge indices."""
        e = self.mesh.edges[edges]
        return np.stack([e[:, 0], e[:, 1], self.mesh.num_vertices + np.asarray(edges)], 1)

    def _nodes_on(self, edges):
        return np.unique(self.edge_nodes(edges).ravel())

    @cached_property
    def dirichlet_nodes(self):
        m = self.mesh
        keep = (m.boundary_tags == geo.INLET) | (m.boundary_tags == geo.WALL)
        return self._nodes_on(m.boundary_edges[keep])

    @cached_property
    def wall_nodes(self):
        return self._nodes_on(self.mesh.tagged_edges(geo.WALL))

    @cached_property
    def inlet_nodes(self):
        """Inlet nodes that are not also wall nodes (walls win at corners)."""
        inlet = self._nodes_on(self.mesh.tagged_edges(geo.INLET))
        return np.setdiff1d(inlet, self.wall_nodes)

    @cached_property
    def dirichlet_dofs(self):
        d = self.dirichlet_nodes
        return np.concatenate([d, d + self.n_nodes])

    @cached_property
    def free_velocity_mask(self):
        mask = np.ones(self.n_velocity, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return mask

    @cached_property
    def control_nodes(self):
        return self._nodes_on(self.mesh.tagged_edges(geo.CONTROL))

    @cached_property
    def control_velocity_dofs(self):
        c = self.control_nodes
        return np.concatenate([c, c + self.n_nodes])

    # element geometry -----------------------------------------------------

    @cached_property
    def _quad(self):
        pts, w = triangle_quadrature(self.quad_degree)
        val, rgrad = p2_basis(pts)
        return pts, w, val, rgrad, p1_basis(pts)

    @cached_property
    def _geometry(self):
        v = self.mesh.vertices[self.mesh.triangles]
        jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # columns
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
        return v[:, 0], jac, det, inv_t

    @cached_property
    def quad_weights(self):
        """Physical quadrature weights, shape (nt, nq)."""
        _, w, _, _, _ = self._quad
        return self._geometry[2][:, None] * w[None, :]

    @cached_property
    def quad_points(self):
        pts = self._quad[0]
        x0, jac, _, _ = self._geometry
        return x0[:, None, :] + np.einsum("tij,qj->tqi", jac, pts)

    @property
    def values(self):
        return self._quad[2]

    @property
    def pressure_values(self):
        return self._quad[4]

    @cached_property
    def gradients(self):
        """Physical P2 gradients, shape (nt, nq, 6, 2)."""
        rgrad = self._quad[3]
        inv_t = self._geometry[3]
        return np.einsum("tij,qkj->tqki", inv_t, rgrad)

    def element_mask(self, subdomains=None):
        if subdomains is None:
            return np.ones(self.mesh.num_triangles, dtype=bool)
        return np.isin(self.mesh.subdomains, np.atleast_1d(subdomains))

    # field helpers --------------------------------------------------------

    def split_velocity(self, v):
        v = np.asarray(v)
        return v[: self.n_nodes], v[self.n_nodes:]

    def velocity_at_quad(self, v):
        """Velocity values (nt, nq, 2) and gradients (nt, nq, 2, 2) [comp, dir]."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_velocity,):
            raise InvalidArgumentError(
                f"velocity vector has shape {v.shape}, expected ({self.n_velocity},)")
        loc = v[self.element_velocity_dofs].reshape(-1, 2, 6)  # (nt, comp, 6)
        val = np.einsum("qk,tck->tqc", self.values, loc)
        grad = np.einsum("tqkd,tck->tqcd", self.gradients, loc)
        return val, grad

    def interpolate_velocity(self, fn):
        """Nodal P2 interpolant of ``fn(x) -> (n, 2)``."""
        vals = np.asarray(fn(self.node_coords), dtype=float)
        return np.concatenate([vals[:, 0], vals[:, 1]])

    def interpolate_pressure(self, fn):
        return np.asarray(fn(self.mesh.vertices), dtype=float)


def build_layout(mesh, quad_degree=6):
    """Taylor-Hood layout; ``quad_degree`` must be at least 5 for convection."""
    if quad_degree < 4:
        raise InvalidArgumentError("quadrature degree below 4 cannot integrate the forms")
    return DofLayout(mesh, quad_degree)


# -- assembly ----------------------------------------------------------------

def _scatter(local, rows, cols, shape):
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    mat = sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()
    mat.sum_duplicates()
    return mat


def _vector_block(scalar):
    return sp.block_diag([scalar, scalar], format="csr")


def scalar_mass(layout, subdomains=None):
    sel = layout.element_mask(subdomains)
    w = layout.quad_weights[sel]
    phi = layout.values
    loc = np.einsum("tq,qi,qj->tij", w, phi, phi)
    en = layout.element_nodes[sel]
    return _scatter(loc, en, en, (layout.n_nodes,) * 2)


def scalar_stiffness(layout, subdomains=None, directions=(0, 1)):
    sel = layout.element_mask(subdomains)
    w = layout.quad_weights[sel]
    g = layout.gradients[sel][..., list(directions)]
    loc = np.einsum("tq,tqid,tqjd->tij", w, g, g)
    en = layout.element_nodes[sel]
    return _scatter(loc, en, en, (layout.n_nodes,) * 2)


def pressure_divergence(layout, subdomains=None, directions=(0, 1)):
    """Matrix of -int q div(v): rows pressure, cols velocity."""
    sel = layout.element_mask(subdomains)
    w = layout.quad_weights[sel]
    psi = layout.pressure_values
    g = layout.gradients[sel]
    en = layout.element_nodes[sel]
    tri = layout.mesh.triangles[sel]
    blocks = []
    for d in (0, 1):
        if d in directions:
            loc = -np.einsum("tq,qi,tqj->tij", w, psi, g[..., d])
            blocks.append(_scatter(loc, tri, en, (layout.n_pressure, layout.n_nodes)))
        else:
            blocks.append(sp.csr_matrix((layout.n_pressure, layout.n_nodes)))
    return sp.hstack(blocks, format="csr")


def pressure_mass(layout, subdomains=None):
    sel = layout.element_mask(subdomains)
    w = layout.quad_weights[sel]
    psi = layout.pressure_values
    loc = np.einsum("tq,qi,qj->tij", w, psi, psi)
    tri = layout.mesh.triangles[sel]
    return _scatter(loc, tri, tri, (layout.n_pressure,) * 2)


def edge_matrices(layout, edges, degree=6):
    """Scalar P2 mass and arclength-derivative matrices on a set of edges."""
    edges = np.asarray(edges, dtype=np.int64)
    s, w = line_quadrature(degree)
    val, der = p2_line_basis(s)
    length = layout.mesh.edge_lengths(edges)
    nodes = layout.edge_nodes(edges)
    mloc = np.einsum("q,qi,qj->ij", w, val, val)[None] * length[:, None, None]
    kloc = np.einsum("q,qi,qj->ij", w, der, der)[None] / length[:, None, None]
    shape = (layout.n_nodes,) * 2
    return _scatter(mloc, nodes, nodes, shape), _scatter(kloc, nodes, nodes, shape)


def _restrict(mat, idx):
    return mat[idx][:, idx].tocsr()


def assemble_form(kind, layout, subdomains=None, component=None):
    """Sparse matrix of one bilinear form.

    ``subdomains`` restricts domain integrals to triangles with those labels
    and ``component`` selects one derivative direction (0 or 1) of the
    stiffness or divergence forms; both exist for affine decomposition.
    """
    directions = (0, 1) if component is None else (int(component),)
    if kind == VELOCITY_MASS:
        return _vector_block(scalar_mass(layout, subdomains))
    if kind == VELOCITY_STIFFNESS:
        return _vector_block(scalar_stiffness(layout, subdomains, directions))
    if kind == PRESSURE_DIVERGENCE:
        return pressure_divergence(layout, subdomains, directions)
    if kind == PRESSURE_MASS:
        return pressure_mass(layout, subdomains)
    if kind == OBS_MASS:
        m, _ = edge_matrices(layout, layout.mesh.observation_edges)
        return _vector_block(m)
    if kind in (CONTROL_MASS, CONTROL_TANGENTIAL, CONTROL_COUPLING):
        m, k = edge_matrices(layout, layout.mesh.tagged_edges(geo.CONTROL))
        if kind == CONTROL_MASS:
            return _vector_block(_restrict(m, layout.control_nodes))
        if kind == CONTROL_TANGENTIAL:
            return _vector_block(_restrict(k, layout.control_nodes))
        return -_vector_block(m)[:, layout.control_velocity_dofs].tocsr()
    raise InvalidArgumentError(f"unknown form kind {kind!r}")


def inner_product(variable, layout):
    """Gram matrix used for POD, supremizers and error norms.

    H1 (seminorm + L2) for velocities, L2 for pressures, H1 along the
    control boundary for the control.
    """
    if variable in ("v", "w"):
        return (assemble_form(VELOCITY_STIFFNESS, layout)
                + assemble_form(VELOCITY_MASS, layout)).tocsr()
    if variable in ("p", "q"):
        return assemble_form(PRESSURE_MASS, layout)
    if variable == "u":
        return (assemble_form(CONTROL_MASS, layout)
                + assemble_form(CONTROL_TANGENTIAL, layout)).tocsr()
    raise InvalidArgumentError(f"unknown variable {variable!r}")


# -- convection --------------------------------------------------------------

def _check_velocity(v, layout):
    v = np.asarray(v, dtype=float)
    if v.shape != (layout.n_velocity,):
        raise InvalidArgumentError(
            f"velocity field has length {v.size}, layout expects {layout.n_velocity}")
    return v


def assemble_convection(v, layout):
    """Linearizations of c(a, b, w) = int (a . grad) b . w around ``v``.

    Returns ``(C, Cp)`` with ``C @ b`` the vector of c(v, b, phi_i) and
    ``Cp @ a`` the vector of c(a, v, phi_i).  ``C + Cp`` is the Jacobian of
    c(v, v, .) with respect to v.
    """
    v = _check_velocity(v, layout)
    val, grad = layout.velocity_at_quad(v)
    w = layout.quad_weights
    phi = layout.values
    g = layout.gradients
    adv = np.einsum("tqd,tqjd->tqj", val, g)  # v . grad(phi_j)
    s = np.einsum("tq,qi,tqj->tij", w, phi, adv)
    nt = len(w)
    loc = np.zeros((nt, 12, 12))
    loc[:, :6, :6] = s
    loc[:, 6:, 6:] = s
    dofs = layout.element_velocity_dofs
    shape = (layout.n_velocity,) * 2
    C = _scatter(loc, dofs, dofs, shape)

    mm = np.einsum("tq,qi,qj->tqij", w, phi, phi)
    loc = np.einsum("tqij,tqcd->tcidj", mm, grad).reshape(nt, 12, 12)
    Cp = _scatter(loc, dofs, dofs, shape)
    return C, Cp


def convection_vector(a, b, layout):
    """Vector of c(a, b, phi_i) over all velocity test functions."""
    a = _check_velocity(a, layout)
    b = _check_velocity(b, layout)
    va, _ = layout.velocity_at_quad(a)
    _, gb = layout.velocity_at_quad(b)
    conv = np.einsum("tqd,tqcd->tqc", va, gb)
    loc = np.einsum("tq,qi,tqc->tci", layout.quad_weights, layout.values, conv)
    out = np.zeros(layout.n_velocity)
    np.add.at(out, layout.element_velocity_dofs.ravel(), loc.reshape(-1))
    return out


def trilinear(a, b, w, layout):
    """Scalar c(a, b, w)."""
    return float(convection_vector(a, b, layout) @ np.asarray(w))


def convection_hessian(w, layout):
    """Matrix H with H[i, k] = c(phi_i, phi_k, w) + c(phi_k, phi_i, w)."""
    w_vec = _check_velocity(w, layout)
    val, _ = layout.velocity_at_quad(w_vec)
    qw = layout.quad_weights
    phi = layout.values
    g = layout.gradients
    nt = len(qw)
    # M[(c1, i), (c2, k)] = int phi_i d_{c1} phi_k w_{c2}
    loc = np.einsum("tq,qi,tqkc,tqe->tciek", qw, phi, g, val).reshape(nt, 12, 12)
    dofs = layout.element_velocity_dofs
    M = _scatter(loc, dofs, dofs, (layout.n_velocity,) * 2)
    return (M + M.T).tocsr()


# -- data --------------------------------------------------------------------

def lift_dirichlet(mu, problem, layout, operator=None, inflow_scale=1.0):
    """Discrete lifting of the inlet profile and its right-hand-side correction.

    The lift carries the inflow values on inlet nodes and zero everywhere
    else (walls included).  With ``operator`` given, the correction is
    ``-(operator @ lift)`` with Dirichlet rows zeroed; otherwise ``None``.
    """
    check_problem(problem)
    lift = np.zeros(layout.n_velocity)
    nodes = layout.inlet_nodes
    lift[nodes] = inflow_profile(problem, mu, layout.node_coords[nodes, 1], inflow_scale)
    correction = None
    if operator is not None:
        correction = -(operator @ lift)
        correction[layout.dirichlet_dofs] = 0.0
    return lift, correction


def interpolate_target(mu, problem, layout):
    """Nodal interpolant of the desired velocity (second component zero)."""
    check_problem(problem)
    out = np.zeros(layout.n_velocity)
    out[: layout.n_nodes] = target_profile(problem, mu, layout.node_coords[:, 1])
    return out


def load_vector(layout, f):
    """int f . phi_i for a callable ``f(x) -> (..., 2)`` at physical points."""
    fx = np.asarray(f(layout.quad_points), dtype=float)
    loc = np.einsum("tq,qi,tqc->tci", layout.quad_weights, layout.values, fx)
    out = np.zeros(layout.n_velocity)
    np.add.at(out, layout.element_velocity_dofs.ravel(), loc.reshape(-1))
    return out


# -- error norms -------------------------------------------------------------

def _error_quadrature(layout, degree):
    pts, w = triangle_quadrature(degree)
    val, rgrad = p2_basis(pts)
    x0, jac, det, inv_t = layout._geometry
    xq = x0[:, None, :] + np.einsum("tij,qj->tqi", jac, pts)
    grads = np.einsum("tij,qkj->tqki", inv_t, rgrad)
    return xq, det[:, None] * w[None], val, grads, p1_basis(pts)


def velocity_h1_error(layout, v, grad_exact, degree=10):
    """|v_h - v|_{H1} for ``grad_exact(x) -> (..., 2, 2)`` [component, direction]."""
    xq, wq, _, grads, _ = _error_quadrature(layout, degree)
    loc = np.asarray(v)[layout.element_velocity_dofs].reshape(-1, 2, 6)
    gh = np.einsum("tqkd,tck->tqcd", grads, loc)
    diff = gh - grad_exact(xq)
    return float(np.sqrt(np.einsum("tq,tqcd->", wq, diff**2)))


def pressure_l2_error(layout, p, p_exact, degree=10, zero_mean=True):
    """||p_h - p||_{L2}; with ``zero_mean`` both are shifted to zero mean."""
    xq, wq, _, _, psi = _error_quadrature(layout, degree)
    ph = np.einsum("qi,ti->tq", psi, np.asarray(p)[layout.mesh.triangles])
    pe = p_exact(xq)
    diff = ph - pe
    if zero_mean:
        diff = diff - np.sum(wq * diff) / np.sum(wq)
    return float(np.sqrt(np.sum(wq * diff**2)))
