"""Online stage: projected operators, reduced optimality systems, reconstruction.

A :class:`ReducedModel` stores only dense arrays.  Every block is tagged
with the spaces its axes live in (``"v"`` aggregated velocity, ``"p"``
aggregated pressure, ``"u"`` control, ``"V"`` velocity with the unit lift
prepended as column 0) so that truncation to a smaller ``N`` is a slice.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import fem
from . import io as pio
from .errors import (InvalidArgumentError, LineSearchStagnation, NonConvergenceError,
                     SolverFailure)
from .pod import ReducedBasis
from .problems import NS_STEADY, STOKES_TD, make_mu
from .truth import VARIABLES, OcpSolution, stokes_theta

ORDER = VARIABLES  # (v, p, u, w, q)
_SPACE_OF = {"v": "v", "w": "v", "p": "p", "q": "p", "u": "u"}


def theta(mu, problem, eta=1.0):
    """Coefficients multiplying the stored blocks at ``mu``."""
    mu = make_mu(problem, mu)
    if problem == STOKES_TD:
        th = stokes_theta(mu)
        th["target_sq"] = mu[2] ** 2
        return th
    return {"one": 1.0, "eta": float(eta), "lift": mu[0], "target": mu[0]}


# -- space-time helpers ------------------------------------------------------------

def _kron_apply(A, Z, nt):
    """``kron(I_nt, A) @ Z`` without forming the Kronecker product."""
    m, n = A.shape
    k = Z.shape[1]
    Y = A @ Z.reshape(nt, n, k).transpose(1, 0, 2).reshape(n, nt * k)
    return np.asarray(Y).reshape(m, nt, k).transpose(1, 0, 2).reshape(nt * m, k)


def _shift_down(Y, nt):
    """Block ``t`` receives block ``t - 1`` (first block zero)."""
    out = np.zeros_like(Y)
    n = Y.shape[0] // nt
    out[n:] = Y[:-n]
    return out


def _time_sum(vec, nt):
    """``kron(ones(nt), vec)``."""
    return np.tile(vec, nt)


# -- model ---------------------------------------------------------------------------

@dataclass
class ReducedModel:
    """Projected operators of one problem.

    ``blocks`` maps a name to ``(theta key, axes, array)``; ``axes`` is a
    string of space letters (see module docstring).  Which blocks exist
    and how they combine is problem specific (see ``project``).
    """

    problem: str
    n: int
    counts: dict
    blocks: dict
    settings: dict
    basis: ReducedBasis | None = None
    lift_unit: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self):
        c = self.counts
        return {"v": c["v"], "p": c["p"], "u": c["u"], "w": c["v"], "q": c["p"]}

    @property
    def dimension(self):
        return sum(self.sizes.values())

    @property
    def slices(self):
        out, start = {}, 0
        for k in ORDER:
            out[k] = slice(start, start + self.sizes[k])
            start += self.sizes[k]
        return out

    def truncate(self, n):
        """Model on the leading ``n`` modes (nested spaces)."""
        if self.basis is None:
            raise InvalidArgumentError("truncation needs the basis labels")
        basis = self.basis.truncate(n)
        lead = basis.leading(n)
        counts = {"v": lead["velocity"], "p": lead["pressure"], "u": lead["control"]}
        lens = dict(counts, V=counts["v"] + 1)
        blocks = {}
        for name, (key, axes, arr) in self.blocks.items():
            idx = tuple(slice(0, lens[a]) for a in axes)
            blocks[name] = (key, axes, arr[idx].copy())
        return ReducedModel(self.problem, n, counts, blocks, dict(self.settings), basis,
                            self.lift_unit, dict(self.meta))

    def theta(self, mu):
        return theta(mu, self.problem, self.settings.get("eta", 1.0))

    def combined(self, prefix, th):
        """Sum over the blocks whose name starts with ``prefix``."""
        out = None
        for name, (key, _, arr) in self.blocks.items():
            if name.split(":")[0] != prefix:
                continue
            piece = th[key] * arr
            out = piece if out is None else out + piece
        return out

    # -- persistence
    def save(self, path):
        arrays, spec = {}, {}
        for name, (key, axes, arr) in self.blocks.items():
            arrays[f"block/{name}"] = arr
            spec[name] = [key, axes]
        if self.basis is not None:
            b = self.basis
            arrays.update({"basis/velocity": b.velocity, "basis/pressure": b.pressure,
                           "basis/control": b.control,
                           "basis/velocity_labels": b.velocity_labels,
                           "basis/pressure_labels": b.pressure_labels,
                           "basis/control_labels": b.control_labels})
        if self.lift_unit is not None:
            arrays["lift_unit"] = self.lift_unit
        meta = {"kind": "reduced_model", "problem": self.problem, "n": self.n,
                "counts": self.counts, "blocks": spec, "settings": self.settings,
                "basis_meta": self.basis.meta if self.basis is not None else None,
                "basis_nt": self.basis.nt if self.basis is not None else None,
                "meta": self.meta}
        pio.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path, with_basis=True):
        arrays, meta = pio.load_container(path)
        if meta.get("kind") != "reduced_model":
            raise InvalidArgumentError(f"{path} does not hold a reduced model")
        blocks = {name: (key, axes, arrays[f"block/{name}"])
                  for name, (key, axes) in meta["blocks"].items()}
        basis = None
        if with_basis and "basis/velocity" in arrays:
            g = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("basis/")}
            basis = ReducedBasis(meta["problem"], meta["n"], g["velocity"], g["pressure"],
                                 g["control"], g["velocity_labels"], g["pressure_labels"],
                                 g["control_labels"], meta["basis_nt"], meta["basis_meta"])
        lift = arrays.get("lift_unit") if with_basis else None
        return cls(meta["problem"], meta["n"], meta["counts"], blocks, meta["settings"],
                   basis, lift, meta["meta"])


@dataclass
class ReducedSolution:
    problem: str
    mu: object
    coefficients: np.ndarray
    cost: float
    online_time: float
    diagnostics: dict = field(default_factory=dict)

    def split(self, model):
        return {k: self.coefficients[s] for k, s in model.slices.items()}


# -- projection ----------------------------------------------------------------

def project(basis, truth):
    """Precompute every mu-independent reduced block for ``basis``.

    Afterwards, online solves only touch the returned model.
    """
    if basis.problem != truth.problem:
        raise InvalidArgumentError(
            f"basis built for {basis.problem!r}, truth solver is {truth.problem!r}")
    L = truth.layout
    nt = getattr(truth, "nt", 1)
    for name, Z, size in (("velocity", basis.velocity, L.n_velocity),
                          ("pressure", basis.pressure, L.n_pressure),
                          ("control", basis.control, L.n_control)):
        if Z.shape[0] != nt * size:
            raise InvalidArgumentError(
                f"{name} basis has {Z.shape[0]} rows, layout expects {nt * size}")
    counts = {"v": basis.velocity.shape[1], "p": basis.pressure.shape[1],
              "u": basis.control.shape[1]}
    if truth.problem == STOKES_TD:
        return _project_stokes(basis, truth, counts)
    return _project_ns(basis, truth, counts)


def _project_stokes(basis, truth, counts):
    if truth.config.initial_state != "lift":
        raise InvalidArgumentError(
            "the reduced model needs initial_state='lift' (a Stokes initial state "
            "is not affine in the parameters)")
    nt, dt = truth.nt, truth.dt
    Zv, Zp, Zu = basis.velocity, basis.pressure, basis.control
    lift = truth.lift()
    vd = truth.target((1.0, 1.0, 1.0))
    blocks = {}

    def add(name, key, axes, arr):
        blocks[name] = (key, axes, np.array(arr, dtype=float, order="C"))

    for key, M in truth.terms["mass"]:
        MZ = _kron_apply(M, Zv, nt)
        add(f"Awv:mass:{key}", key, "vv", Zv.T @ (MZ - _shift_down(MZ, nt)))
    for key, K in truth.terms["stiffness"]:
        add(f"Awv:stiffness:{key}", key, "vv", dt * (Zv.T @ _kron_apply(K, Zv, nt)))
        add(f"gw:{key}", key, "v", -dt * (Zv.T @ _time_sum(K @ lift, nt)))
    for key, D in truth.terms["divergence"]:
        add(f"Aqv:{key}", key, "pv", dt * (Zp.T @ _kron_apply(D, Zv, nt)))
        add(f"gq:{key}", key, "p", -dt * (Zp.T @ _time_sum(D @ lift, nt)))
    Mobs = truth.obs_mass
    add("Hvv:one", "one", "vv", dt * (Zv.T @ _kron_apply(Mobs, Zv, nt)))
    add("Huu:one", "one", "uu", dt * (Zu.T @ _kron_apply(truth.control_hessian, Zu, nt)))
    add("Awu:one", "one", "vu", dt * (Zv.T @ _kron_apply(truth.coupling, Zu, nt)))
    add("hv:target", "target", "v", dt * (Zv.T @ _time_sum(Mobs @ vd, nt)))
    add("hv:one", "one", "v", -dt * (Zv.T @ _time_sum(Mobs @ lift, nt)))
    # cost constants: 0.5 dt nt (lift - mu3 vd)^T Mobs (lift - mu3 vd)
    c = 0.5 * dt * nt
    add("c:one", "one", "", np.array(c * (lift @ (Mobs @ lift))))
    add("c:target", "target", "", np.array(-2.0 * c * (lift @ (Mobs @ vd))))
    add("c:target_sq", "target_sq", "", np.array(c * (vd @ (Mobs @ vd))))
    settings = {"nt": nt, "dt": dt, "alpha1": truth.config.alpha1,
                "alpha2": truth.config.alpha2}
    return ReducedModel(STOKES_TD, basis.n, counts, blocks, settings, basis, lift.copy())


def _project_ns(basis, truth, counts):
    L = truth.layout
    Zv, Zp, Zu = basis.velocity, basis.pressure, basis.control
    lift = truth.lift((1.0,))
    vd = truth.target((1.0,))
    Zh = np.column_stack([lift, Zv])
    blocks = {}

    def add(name, key, axes, arr):
        blocks[name] = (key, axes, np.array(arr, dtype=float, order="C"))

    Mobs = truth.obs_mass
    add("Mo", "one", "VV", Zh.T @ (Mobs @ Zh))
    add("mo", "one", "V", Zh.T @ (Mobs @ vd))
    add("vdvd", "one", "", np.array(vd @ (Mobs @ vd)))
    add("K", "one", "vV", Zv.T @ (truth.stiffness @ Zh))
    add("D", "one", "pV", Zp.T @ (truth.divergence @ Zh))
    add("Cc", "one", "vu", Zv.T @ (truth.coupling @ Zu))
    add("Hu", "one", "uu", Zu.T @ (truth.control_hessian @ Zu))
    # T[a, b, t] = c(Zh_a, Zh_b, Zv_t)
    T = np.empty((Zh.shape[1], Zh.shape[1], Zv.shape[1]))
    for a in range(Zh.shape[1]):
        C, _ = fem.assemble_convection(Zh[:, a], L)
        T[a] = (Zv.T @ (C @ Zh)).T
    add("T", "one", "VVv", T)
    c = truth.config
    settings = {"eta": c.eta, "alpha": c.alpha, "tol": c.tol, "max_iter": c.max_iter,
                "min_step": c.min_step}
    return ReducedModel(NS_STEADY, basis.n, counts, blocks, settings, basis, lift.copy())


# -- reduced systems -------------------------------------------------------------------

def stokes_system(model, mu):
    """Reduced KKT matrix, right-hand side and cost pieces at ``mu``."""
    th = model.theta(mu)
    s = model.slices
    A_wv = model.combined("Awv", th)
    A_qv = model.combined("Aqv", th)
    H_vv = model.combined("Hvv", th)
    H_uu = model.combined("Huu", th)
    A_wu = model.combined("Awu", th)
    K = np.zeros((model.dimension,) * 2)
    K[s["v"], s["v"]] = H_vv
    K[s["v"], s["w"]] = A_wv.T
    K[s["v"], s["q"]] = A_qv.T
    K[s["p"], s["w"]] = A_qv
    K[s["u"], s["u"]] = H_uu
    K[s["u"], s["w"]] = A_wu.T
    K[s["w"], s["v"]] = A_wv
    K[s["w"], s["p"]] = A_qv.T
    K[s["w"], s["u"]] = A_wu
    K[s["q"], s["v"]] = A_qv
    rhs = np.zeros(model.dimension)
    rhs[s["v"]] = model.combined("hv", th)
    rhs[s["w"]] = model.combined("gw", th)
    rhs[s["q"]] = model.combined("gq", th)
    const = float(model.combined("c", th))
    return K, rhs, const


def _stokes_cost(model, mu, x, rhs=None, const=None):
    s = model.slices
    th = model.theta(mu)
    if rhs is None:
        _, rhs, const = stokes_system(model, mu)
    xv, xu = x[s["v"]], x[s["u"]]
    quad = xv @ (model.combined("Hvv", th) @ xv) + xu @ (model.combined("Huu", th) @ xu)
    return float(0.5 * quad - xv @ rhs[s["v"]] + const)


def _name_deficient_block(K, s):
    worst, name = np.inf, None
    for a, b in (("v", "v"), ("u", "u"), ("w", "v"), ("q", "v"), ("w", "u")):
        blk = K[s[a], s[b]]
        if blk.size == 0:
            continue
        sv = la.svdvals(blk)
        val = sv[-1] / max(sv[0], 1e-300) if blk.shape[0] <= blk.shape[1] else 1.0
        if val < worst:
            worst, name = val, f"{a}{b}"
    return name, worst


def _solve_stokes(model, mu, tol=1e-10):
    t0 = time.perf_counter()
    K, rhs, const = stokes_system(model, mu)
    with warnings.catch_warnings():
        warnings.simplefilter("error", la.LinAlgWarning)
        try:
            x = la.solve(K, rhs, assume_a="sym", check_finite=False)
        except (la.LinAlgError, la.LinAlgWarning) as exc:
            block, val = _name_deficient_block(K, model.slices)
            raise SolverFailure(f"reduced KKT system singular (weakest block {block}, "
                                f"relative singular value {val:.2e}): {exc}",
                                {"block": block}) from exc
    elapsed = time.perf_counter() - t0
    r = K @ x - rhs
    rel = float(np.linalg.norm(r) / max(np.linalg.norm(rhs), np.linalg.norm(K @ x), 1e-300))
    J = _stokes_cost(model, mu, x, rhs, const)
    return ReducedSolution(STOKES_TD, make_mu(STOKES_TD, mu), x, J, elapsed,
                           {"residual": rel, "dimension": model.dimension})


class _NsPieces:
    """Blocks of the reduced Navier-Stokes system at one parameter."""

    def __init__(self, model, mu):
        g = {name: arr for name, (_, _, arr) in model.blocks.items()}
        self.s = model.slices
        self.n = model.dimension
        self.mu1 = make_mu(NS_STEADY, mu)[0]
        self.eta = model.settings["eta"]
        self.Mo, self.mo, self.vdvd = g["Mo"], g["mo"], float(g["vdvd"])
        self.K, self.D, self.Cc, self.Hu, self.T = g["K"], g["D"], g["Cc"], g["Hu"], g["T"]
        self.Ts = self.T[1:] + self.T[:, 1:].transpose(1, 0, 2)  # [i, a, t]

    def split(self, x):
        return {k: x[s] for k, s in self.s.items()}

    def residual(self, x):
        c = self.split(x)
        ah = np.concatenate([[self.mu1], c["v"]])
        w = c["w"]
        out = np.empty(self.n)
        out[self.s["v"]] = (self.Mo[1:] @ ah - self.mu1 * self.mo[1:]
                            + self.eta * (self.K[:, 1:].T @ w) + self.D[:, 1:].T @ c["q"]
                            + np.einsum("iat,a,t->i", self.Ts, ah, w))
        out[self.s["p"]] = self.D[:, 1:] @ w
        out[self.s["u"]] = self.Hu @ c["u"] + self.Cc.T @ w
        out[self.s["w"]] = (self.eta * (self.K @ ah) + self.D[:, 1:].T @ c["p"]
                            + self.Cc @ c["u"] + np.einsum("abt,a,b->t", self.T, ah, ah))
        out[self.s["q"]] = self.D @ ah
        return out

    def jacobian(self, x):
        c = self.split(x)
        s = self.s
        ah = np.concatenate([[self.mu1], c["v"]])
        N = np.einsum("iat,a->it", self.Ts, ah)
        Hw = np.einsum("iat,t->ia", self.Ts[:, 1:], c["w"])
        A = self.eta * self.K[:, 1:] + N
        Dv = self.D[:, 1:]
        J = np.zeros((self.n, self.n))
        J[s["v"], s["v"]] = self.Mo[1:, 1:] + Hw
        J[s["v"], s["w"]] = A
        J[s["v"], s["q"]] = Dv.T
        J[s["p"], s["w"]] = Dv
        J[s["u"], s["u"]] = self.Hu
        J[s["u"], s["w"]] = self.Cc.T
        J[s["w"], s["v"]] = A.T
        J[s["w"], s["p"]] = Dv.T
        J[s["w"], s["u"]] = self.Cc
        J[s["q"], s["v"]] = Dv
        return J

    def cost(self, x):
        c = self.split(x)
        ah = np.concatenate([[self.mu1], c["v"]])
        return float(0.5 * ah @ (self.Mo @ ah) - self.mu1 * ah @ self.mo
                     + 0.5 * self.mu1 ** 2 * self.vdvd + 0.5 * c["u"] @ (self.Hu @ c["u"]))


def _solve_ns(model, mu, x0=None):
    t0 = time.perf_counter()
    st = model.settings
    P = _NsPieces(model, mu)
    x = np.zeros(P.n) if x0 is None else np.array(x0, dtype=float)
    r = P.residual(x)
    target = st["tol"] * max(1.0, float(np.linalg.norm(P.residual(np.zeros(P.n)))))
    norm = float(np.linalg.norm(r))
    history, steps = [norm], []
    while norm > target:
        if len(steps) >= st["max_iter"]:
            raise NonConvergenceError("reduced Newton did not converge",
                                      {"residual_history": history, "steps": steps})
        try:
            dx = la.solve(P.jacobian(x), -r, assume_a="sym", check_finite=False)
        except la.LinAlgError as exc:
            raise SolverFailure(f"reduced Jacobian singular: {exc}",
                                {"residual_history": history}) from exc
        t = 1.0
        while True:
            trial = x + t * dx
            r_trial = P.residual(trial)
            n_trial = float(np.linalg.norm(r_trial))
            if n_trial <= (1.0 - 1e-4 * t) * norm:
                break
            t *= 0.5
            if t < st["min_step"]:
                raise LineSearchStagnation("reduced line search stagnated",
                                           {"residual_history": history, "steps": steps})
        x, r, norm = trial, r_trial, n_trial
        history.append(norm)
        steps.append(t)
    elapsed = time.perf_counter() - t0
    return ReducedSolution(NS_STEADY, make_mu(NS_STEADY, mu), x, P.cost(x), elapsed,
                           {"residual": norm, "residual_target": target,
                            "residual_history": history, "steps": steps,
                            "newton_iterations": len(steps), "dimension": P.n})


def solve_reduced(model, mu):
    """Reduced optimality system at ``mu``; uses only arrays held by ``model``."""
    if model.problem == STOKES_TD:
        return _solve_stokes(model, mu)
    return _solve_ns(model, mu)


def reduced_residual(model, mu, x):
    if model.problem == STOKES_TD:
        K, rhs, _ = stokes_system(model, mu)
        return K @ x - rhs
    return _NsPieces(model, mu).residual(x)


def reduced_cost(model, mu, x):
    if model.problem == STOKES_TD:
        return _stokes_cost(model, mu, x)
    return _NsPieces(model, mu).cost(x)


def reconstruct(model, coeffs, mu):
    """Full-order fields ``Z @ coeffs`` with the lift added to the state velocity.

    Returns an :class:`~podocp.truth.OcpSolution` (cost left as NaN).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (model.dimension,):
        raise InvalidArgumentError(
            f"coefficient vector has length {coeffs.size}, expected {model.dimension}")
    if model.basis is None or model.lift_unit is None:
        raise InvalidArgumentError("model was loaded without its basis")
    b = model.basis
    mu = make_mu(model.problem, mu)
    c = {k: coeffs[s] for k, s in model.slices.items()}
    f = {k: b.basis(k) @ c[k] for k in ORDER}
    lift = model.lift_unit * (mu[0] if model.problem == NS_STEADY else 1.0)
    if model.problem == STOKES_TD:
        nt = model.settings["nt"]
        f = {k: v.reshape(nt, -1) for k, v in f.items()}
        lift = np.broadcast_to(lift, f["v"].shape).copy()
    return OcpSolution(model.problem, mu, f["v"] + lift, f["p"], f["u"], f["w"], f["q"], lift)


def project_solution(model, sol, inner):
    """Coefficients of the orthogonal projection of a truth solution.

    ``inner`` maps ``"v"``, ``"p"``, ``"u"`` to the snapshot Gram matrices
    in which the basis is orthonormal.
    """
    if model.basis is None:
        raise InvalidArgumentError("model was loaded without its basis")
    out = [model.basis.basis(k).T @ (inner[_SPACE_OF[k]] @ sol.snapshot(k)) for k in ORDER]
    return np.concatenate(out)


def full_system_congruence(model, matrix):
    """``Phi^T A Phi`` for a full (space-time) KKT matrix ``A``."""
    b = model.basis
    Phi = sp.block_diag([sp.csr_matrix(b.basis(k)) for k in ORDER], format="csr")
    return np.asarray((Phi.T @ (matrix @ Phi)).todense())
