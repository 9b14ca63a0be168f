"""Bifurcation template mesh and its piecewise-affine stretch.

Template coordinates (reference domain, mu2 = 1)::

    channel        [0, 4] x [0, 2]                      subdomain 0
    upper branch   parallelogram spanned from the base (4, 1)-(4, 2)
                   along (1, 1)/sqrt(2), length 3       subdomain 1
    lower branch   parallelogram spanned from the base (4, 0)-(4, 1)
                   along (1, -1)/sqrt(2), length 3      subdomain 2

The inlet is the segment x1 = 0, the two control outlets are the vertical
branch ends at x1 = 4 + 3/sqrt(2), the observation line is the interior
segment x1 = 2.  Every other boundary edge is a wall.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, MeshResolutionError, OutOfRangeWarning

INLET = 1
WALL = 2
CONTROL = 3
TAG_NAMES = {INLET: "inlet", WALL: "wall", CONTROL: "control"}

CHANNEL = 0
UPPER_BRANCH = 1
LOWER_BRANCH = 2

CHANNEL_LENGTH = 4.0
CHANNEL_HEIGHT = 2.0
BRANCH_WIDTH = 1.0
BRANCH_LENGTH = 3.0
OBSERVATION_X = CHANNEL_LENGTH / 2
OUTLET_X = CHANNEL_LENGTH + BRANCH_LENGTH / math.sqrt(2.0)

_COORD_TOL = 1e-9


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Conforming, positively oriented triangulation with tagged facets.

    ``edges`` holds every mesh edge as a sorted vertex pair and
    ``triangle_edges[t, k]`` is the edge joining local vertices ``k`` and
    ``(k + 1) % 3`` of triangle ``t``.  Boundary
    edges are listed in ``boundary_edges`` with their tag in
    ``boundary_tags``; ``observation_edges`` are interior edges on the
    observation line.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    subdomains: np.ndarray
    edges: np.ndarray
    triangle_edges: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    observation_edges: np.ndarray
    h: float
    name: str = "mesh"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def edge_lengths(self, edges=None):
        e = self.edges if edges is None else self.edges[edges]
        d = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def tagged_edges(self, tag):
        return self.boundary_edges[self.boundary_tags == tag]

    def tag_measure(self, tag):
        """Total length of the boundary edges carrying ``tag``."""
        return float(self.edge_lengths(self.tagged_edges(tag)).sum())

    def observation_length(self):
        return float(self.edge_lengths(self.observation_edges).sum())

    def area(self):
        return float(self.signed_areas().sum())

    def min_angle(self):
        """Smallest interior angle over all triangles, in degrees."""
        p = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            c = (u * v).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
        return float(np.min(angles))

    def with_vertices(self, vertices, name=None):
        """Same topology and tags on moved vertices."""
        vertices = np.asarray(vertices, dtype=float)
        tmp = _build_topology(vertices, self.triangles)
        return Mesh(
            vertices=_frozen(vertices, float),
            triangles=self.triangles,
            subdomains=self.subdomains,
            edges=self.edges,
            triangle_edges=self.triangle_edges,
            boundary_edges=self.boundary_edges,
            boundary_tags=self.boundary_tags,
            observation_edges=self.observation_edges,
            h=float(tmp["lengths"].max()),
            name=name or self.name,
            meta=dict(self.meta),
        )


def _build_topology(vertices, triangles):
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(triangles[:, local].reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(all_edges, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    return {
        "edges": edges,
        "triangle_edges": inverse.reshape(-1, 3),
        "counts": counts,
        "lengths": np.hypot(d[:, 0], d[:, 1]),
    }


def _assemble_mesh(vertices, triangles, subdomains, tagger, observation, name):
    """Merge duplicate vertices, orient, build edges and tags."""
    key = np.round(vertices / _COORD_TOL).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep vertex order by first appearance for determinism
    order = np.argsort(first)
    renumber = np.empty_like(order)
    renumber[order] = np.arange(len(order))
    vertices = vertices[first[order]]
    triangles = renumber[inverse[triangles]]

    p = vertices[triangles]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    area2 = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    flip = area2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    topo = _build_topology(vertices, triangles)
    counts = topo["counts"]
    if np.any(counts > 2):
        raise InvalidArgumentError("non-manifold triangulation")
    boundary = np.flatnonzero(counts == 1)
    mids = 0.5 * (vertices[topo["edges"][boundary, 0]] + vertices[topo["edges"][boundary, 1]])
    ends = vertices[topo["edges"][boundary]]
    tags = np.array([tagger(m, e) for m, e in zip(mids, ends)], dtype=np.int64)

    interior = np.flatnonzero(counts == 2)
    if observation is None:
        obs = np.zeros(0, dtype=np.int64)
    else:
        ev = vertices[topo["edges"][interior]]
        obs = interior[observation(ev)]

    return Mesh(
        vertices=_frozen(vertices, float),
        triangles=_frozen(triangles, np.int64),
        subdomains=_frozen(subdomains, np.int64),
        edges=_frozen(topo["edges"], np.int64),
        triangle_edges=_frozen(topo["triangle_edges"], np.int64),
        boundary_edges=_frozen(boundary, np.int64),
        boundary_tags=_frozen(tags, np.int64),
        observation_edges=_frozen(obs, np.int64),
        h=float(topo["lengths"].max()),
        name=name,
    )


def _quad_grid(origin, du, dv, nu, nv, short_diagonal_from_origin):
    """Structured triangulation of the parallelogram origin + s*du + t*dv."""
    i, j = np.meshgrid(np.arange(nu + 1), np.arange(nv + 1), indexing="ij")
    pts = origin + i[..., None] * du + j[..., None] * dv
    pts = pts.reshape(-1, 2)
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    p00 = idx[:-1, :-1].ravel()
    p10 = idx[1:, :-1].ravel()
    p11 = idx[1:, 1:].ravel()
    p01 = idx[:-1, 1:].ravel()
    if short_diagonal_from_origin:
        tris = np.concatenate([np.stack([p00, p10, p11], 1), np.stack([p00, p11, p01], 1)])
    else:
        tris = np.concatenate([np.stack([p00, p10, p01], 1), np.stack([p10, p11, p01], 1)])
    return pts, tris


def cells_per_unit(h):
    """Cells across a unit-width feature for target size ``h``."""
    if not h > 0:
        raise InvalidArgumentError(f"mesh size must be positive, got {h!r}")
    if BRANCH_WIDTH < 2.0 * h - 1e-12:
        raise MeshResolutionError(
            f"h = {h} leaves fewer than 2 elements across the unit branch width"
        )
    return int(math.ceil(1.0 / h - 1e-9))


def build_bifurcation_mesh(h):
    """Structured triangulation of the bifurcation template.

    ``h`` is the target leg length of the structured cells: a unit width is
    split into ``ceil(1/h)`` cells.  Halving ``h`` refines every cell into
    four.

    Raises
    ------
    InvalidArgumentError
        If ``h <= 0``.
    MeshResolutionError
        If the branch width would hold fewer than two cells (``h > 0.5``).
    """
    m = cells_per_unit(h)
    s = 1.0 / m
    r2 = 1.0 / math.sqrt(2.0)
    nb = int(round(BRANCH_LENGTH * m))

    pc, tc = _quad_grid(np.zeros(2), np.array([s, 0.0]), np.array([0.0, s]),
                        int(round(CHANNEL_LENGTH * m)), int(round(CHANNEL_HEIGHT * m)), True)
    step = BRANCH_LENGTH / nb
    pu, tu = _quad_grid(np.array([CHANNEL_LENGTH, 1.0]), step * np.array([r2, r2]),
                        np.array([0.0, s]), nb, m, False)
    pl, tl = _quad_grid(np.array([CHANNEL_LENGTH, 0.0]), step * np.array([r2, -r2]),
                        np.array([0.0, s]), nb, m, True)

    vertices = np.concatenate([pc, pu, pl])
    off_u = len(pc)
    off_l = off_u + len(pu)
    triangles = np.concatenate([tc, tu + off_u, tl + off_l])
    subdomains = np.concatenate([
        np.full(len(tc), CHANNEL), np.full(len(tu), UPPER_BRANCH), np.full(len(tl), LOWER_BRANCH)
    ])

    def tagger(mid, ends):
        if np.all(np.abs(ends[:, 0]) < _COORD_TOL):
            return INLET
        if np.all(np.abs(ends[:, 0] - OUTLET_X) < _COORD_TOL):
            return CONTROL
        return WALL

    def observation(ev):
        return np.all(np.abs(ev[:, :, 0] - OBSERVATION_X) < _COORD_TOL, axis=1)

    mesh = _assemble_mesh(vertices, triangles, subdomains, tagger, observation, "bifurcation")
    mesh.meta.update({"h_target": float(h), "cells_per_unit": m})
    return mesh


def build_rectangle_mesh(nx, ny, x0=0.0, x1=1.0, y0=0.0, y1=1.0):
    """Structured rectangle mesh; every boundary edge is tagged WALL.

    Used for fixtures and convergence studies, not for the benchmarks.
    """
    p, t = _quad_grid(np.array([x0, y0]), np.array([(x1 - x0) / nx, 0.0]),
                      np.array([0.0, (y1 - y0) / ny]), nx, ny, True)
    mesh = _assemble_mesh(p, t, np.zeros(len(t), dtype=np.int64),
                          lambda mid, ends: WALL, None, "rectangle")
    return mesh


def build_single_triangle_mesh(vertices=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))):
    p = np.asarray(vertices, dtype=float)
    return _assemble_mesh(p, np.array([[0, 1, 2]]), np.zeros(1, dtype=np.int64),
                          lambda mid, ends: WALL, None, "triangle")


@dataclass(frozen=True)
class GeometricMap:
    """Piecewise-affine map x -> A_k x + b_k, one (A_k, b_k) per subdomain."""

    mu2: float
    linear: dict
    translation: dict

    def jacobian_det(self, subdomain):
        return float(np.linalg.det(self.linear[subdomain]))

    def inverse_transpose(self, subdomain):
        return np.linalg.inv(self.linear[subdomain]).T

    def apply(self, points, subdomain):
        points = np.asarray(points, dtype=float)
        return points @ self.linear[subdomain].T + self.translation[subdomain]

    def deform(self, mesh):
        """Physical mesh Omega(mu2): move vertices subdomain by subdomain."""
        out = mesh.vertices.copy()
        for k in self.linear:
            verts = np.unique(mesh.triangles[mesh.subdomains == k])
            out[verts] = self.apply(mesh.vertices[verts], k)
        return mesh.with_vertices(out, name=f"{mesh.name}[mu2={self.mu2:g}]")


def _check_mu2(mu2):
    mu2 = float(mu2)
    if not (1.0 <= mu2 <= 2.0):
        warnings.warn(f"mu2 = {mu2} outside [1, 2]; extrapolating", OutOfRangeWarning,
                      stacklevel=3)
    if mu2 <= 0:
        raise InvalidArgumentError("stretch factor must be positive")
    return mu2


def stretch_map(mu2):
    """Stretch the channel along x1 by ``mu2``; translate the branches rigidly."""
    mu2 = _check_mu2(mu2)
    eye = np.eye(2)
    shift = np.array([(mu2 - 1.0) * CHANNEL_LENGTH, 0.0])
    return GeometricMap(
        mu2=mu2,
        linear={CHANNEL: np.diag([mu2, 1.0]), UPPER_BRANCH: eye, LOWER_BRANCH: eye},
        translation={CHANNEL: np.zeros(2), UPPER_BRANCH: shift, LOWER_BRANCH: shift},
    )


# Names of the mu2-dependent pull-back coefficients.  Forms on the branches
# (and every boundary form) carry coefficient 1.
GEOMETRY_TERMS = ("mass", "stiffness_x", "stiffness_y", "divergence_x", "divergence_y")


def affine_geometry_factors(mu2):
    """Pull-back coefficients of the channel subdomain at stretch ``mu2``.

    Returns a dict keyed by :data:`GEOMETRY_TERMS`:

    - ``mass``: det J
    - ``stiffness_x`` / ``stiffness_y``: diagonal of det J * J^-1 J^-T
    - ``divergence_x`` / ``divergence_y``: diagonal of det J * J^-T
    """
    gmap = stretch_map(mu2)
    a = gmap.linear[CHANNEL]
    det = np.linalg.det(a)
    ainv = np.linalg.inv(a)
    diff = det * ainv @ ainv.T
    div = det * ainv.T
    return {
        "mass": float(det),
        "stiffness_x": float(diff[0, 0]),
        "stiffness_y": float(diff[1, 1]),
        "divergence_x": float(div[0, 0]),
        "divergence_y": float(div[1, 1]),
    }
