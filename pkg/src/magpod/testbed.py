"""Parametric 2D magnetostatic testbed on a fixed-topology mesh.

Solves the scalar vector-potential problem on the square [-L, L]^2 with
homogeneous Dirichlet boundary: find A_z with

    div(nu grad A_z) = -J_z - div(nu B_rem_perp)

discretized with bilinear quadrilaterals and 2x2 Gauss quadrature. A
permanent-magnet footprint (fixed in reference coordinates) carries the
remanence source; an optional iron collar around it can follow the
exponential Brauer reluctivity law nu(B^2) = k1 exp(k2 B^2) + k3, making
the system nonlinear; a fixed go/return coil pair carries the source
current density. The magnet's size, position, and tilt follow a parameter
point through the closed-form geometry map in :mod:`magpod.geometry`, so
node count, connectivity, and the Dirichlet set are identical for every
feasible parameter combination.

State vectors hold the free (non-Dirichlet) nodal coefficients only.
Parametric sensitivities of the state solve the tangent systems

    K_T(p, u) du/dp_i = -d r(p, u)/dp_i |_u

with the parametric residual derivative assembled analytically from the
geometry map's nodal velocities (a central finite-difference fallback sits
behind a config flag for cross-checking). The scalar output is the field
energy per unit depth, W = 1/2 u^T A(p, u) u, with its parameter gradient
obtained from one adjoint solve against the same tangent matrix.

All operations are pure functions of (parameter point, config); nothing
mutates shared state, so callers may parallelize freely.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .exceptions import (
    DegenerateElementError,
    NewtonDivergenceError,
    NotPositiveDefiniteError,
    SingularTangentError,
)
from .linalg import spd_factorize_jittered, spd_solve

__all__ = [
    "NU0",
    "DEFAULT_BOUNDS",
    "BRAUER_DEFAULTS",
    "ParamPoint",
    "TestbedConfig",
    "FieldSolution",
    "KpiSample",
    "assemble",
    "solve",
    "solve_sensitivities",
    "compute_kpi",
    "is_feasible",
    "build_mesh",
]

NU0 = 1.0e7 / (4.0 * math.pi)  # vacuum reluctivity, m/H

# Parameter box: magnet height, width, offset datum (mm), tilt datum (deg).
DEFAULT_BOUNDS = ((2.0, 12.0), (8.0, 22.0), (5.0, 15.0), (15.0, 23.0))

# Soft-iron exponential reluctivity fit (k1 [m/H], k2 [1/T^2], k3 [m/H]).
BRAUER_DEFAULTS = (0.3774, 2.970, 388.33)

# Feasibility: mapped Gauss Jacobians must keep this fraction of their
# reference value, and the magnet rectangle must clear the boundary by one
# element.
JACOBIAN_RATIO_MIN = 0.05

_GAUSS = 1.0 / math.sqrt(3.0)
_GAUSS_POINTS = ((-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS))
_LOCAL_NODES = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))

_MM = 1.0e-3  # geometry is specified in mm, assembly runs in meters
_A_PER_MM2 = 1.0e6  # source current density is specified in A/mm^2


@dataclass(frozen=True)
class ParamPoint:
    """A point in design space with its per-component box bounds."""

    values: tuple
    bounds: tuple = None

    def __post_init__(self):
        values = tuple(float(v) for v in np.atleast_1d(self.values))
        if not 1 <= len(values) <= 8:
            raise ValueError(f"parameter count must be in [1, 8], got {len(values)}")
        bounds = self.bounds
        if bounds is None:
            if len(values) > len(DEFAULT_BOUNDS):
                raise ValueError("bounds are required for more than 4 parameters")
            bounds = DEFAULT_BOUNDS[: len(values)]
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        if len(bounds) != len(values):
            raise ValueError(
                f"{len(values)} values but {len(bounds)} bound pairs"
            )
        for v, (lo, hi) in zip(values, bounds):
            if not (math.isfinite(v) and math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("parameter values and bounds must be finite")
            if lo > hi:
                raise ValueError(f"bound ({lo}, {hi}) has lower > upper")
            if not lo <= v <= hi:
                raise ValueError(f"value {v} outside bounds ({lo}, {hi})")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def midpoint(cls, bounds=DEFAULT_BOUNDS):
        return cls(tuple(0.5 * (lo + hi) for lo, hi in bounds), tuple(bounds))

    @property
    def array(self):
        return np.array(self.values)

    @property
    def ranges(self):
        return np.array([hi - lo for lo, hi in self.bounds])

    @property
    def n_params(self):
        return len(self.values)

    def frozen_mask(self):
        """True where a component's bounds are collapsed (lo == hi)."""
        return np.array([lo == hi for lo, hi in self.bounds])

    def shifted(self, index, delta):
        """Copy with one component shifted, widening its bounds if needed."""
        vals = list(self.values)
        vals[index] += delta
        bnds = list(self.bounds)
        lo, hi = bnds[index]
        bnds[index] = (min(lo, vals[index]), max(hi, vals[index]))
        return ParamPoint(tuple(vals), tuple(bnds))


@dataclass(frozen=True)
class TestbedConfig:
    """Mesh, material, and solver settings for the testbed."""

    __test__ = False  # name starts with "Test"; keep pytest collection away

    resolution: int = 24
    half_width_mm: float = 50.0
    material: str = "linear"
    brauer: tuple = BRAUER_DEFAULTS
    remanence: float = 1.0
    source_current_density: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    use_fd_parametric: bool = False
    fd_parametric_step: float = 1e-7

    def __post_init__(self):
        if self.resolution < 4:
            raise ValueError("resolution must be at least 4 elements per side")
        if self.resolution % 2 != 0:
            raise ValueError("resolution must be even (mirror-symmetric mesh)")
        # Boundary nodes must sit outside the deformation collar so the
        # Dirichlet set never moves.
        if self.half_width_mm < 40.0:
            raise ValueError("half_width_mm must be at least 40 mm")
        if self.material not in ("linear", "brauer"):
            raise ValueError(f"unknown material law {self.material!r}")
        if len(self.brauer) != 3 or any(k < 0 for k in self.brauer):
            raise ValueError("brauer constants must be three non-negative values")
        object.__setattr__(self, "brauer", tuple(float(k) for k in self.brauer))

    def to_dict(self):
        return {
            "resolution": self.resolution,
            "half_width_mm": self.half_width_mm,
            "material": self.material,
            "brauer": list(self.brauer),
            "remanence": self.remanence,
            "source_current_density": self.source_current_density,
            "newton_tol": self.newton_tol,
            "newton_max_iter": self.newton_max_iter,
            "use_fd_parametric": self.use_fd_parametric,
            "fd_parametric_step": self.fd_parametric_step,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["brauer"] = tuple(d["brauer"])
        return cls(**d)


@dataclass
class FieldSolution:
    """Converged state, its parametric sensitivities, and solver diagnostics."""

    u: np.ndarray
    sensitivities: np.ndarray
    newton_iterations: int
    residual_norm: float
    residual_history: list = field(default_factory=list)


@dataclass
class KpiSample:
    """Field energy per unit depth (J/m) and its parameter gradient."""

    value: float
    gradient: np.ndarray


@dataclass
class Mesh:
    """Fixed reference mesh with precomputed quadrature and material data."""

    resolution: int
    half_width_mm: float
    nodes_mm: np.ndarray
    quads: np.ndarray
    free: np.ndarray
    n_free: int
    blend: np.ndarray
    dshape: np.ndarray  # (4 gauss, 4 nodes, 2)
    shape: np.ndarray  # (4 gauss, 4 nodes)
    magnet: np.ndarray  # (E, 4) bool per gauss point
    ring: np.ndarray  # (E, 4) bool
    coil_sign: np.ndarray  # (E, 4) in {-1, 0, +1}
    ref_det: np.ndarray  # (E, 4) reference Jacobian determinants (m^2)

    @property
    def n_nodes(self):
        return self.nodes_mm.shape[0]

    @property
    def n_elements(self):
        return self.quads.shape[0]

    @property
    def element_size_mm(self):
        return 2.0 * self.half_width_mm / self.resolution


_MESH_CACHE = {}


def build_mesh(cfg):
    """Build (or fetch) the reference mesh for a config's resolution and size."""
    key = (cfg.resolution, cfg.half_width_mm)
    mesh = _MESH_CACHE.get(key)
    if mesh is not None:
        return mesh

    res = cfg.resolution
    L = cfg.half_width_mm
    ticks = np.linspace(-L, L, res + 1)
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    quads = np.empty((res * res, 4), dtype=np.intp)
    e = 0
    for iy in range(res):
        base = iy * (res + 1)
        for ix in range(res):
            n00 = base + ix
            quads[e] = (n00, n00 + 1, n00 + res + 2, n00 + res + 1)
            e += 1

    on_boundary = (
        (np.abs(nodes[:, 0]) >= L - 1e-12) | (np.abs(nodes[:, 1]) >= L - 1e-12)
    )
    free = np.flatnonzero(~on_boundary)

    dshape = np.empty((4, 4, 2))
    shape = np.empty((4, 4))
    for g, (xi, eta) in enumerate(_GAUSS_POINTS):
        for a, (xa, ya) in enumerate(_LOCAL_NODES):
            shape[g, a] = 0.25 * (1.0 + xi * xa) * (1.0 + eta * ya)
            dshape[g, a, 0] = 0.25 * xa * (1.0 + eta * ya)
            dshape[g, a, 1] = 0.25 * ya * (1.0 + xi * xa)

    # Reference Gauss-point positions (identity map) drive the fixed
    # material layout; the sets never change with the parameters.
    gauss_mm = np.einsum("ga,eai->egi", shape, nodes[quads])
    gx, gy = gauss_mm[..., 0], gauss_mm[..., 1]
    magnet = (np.abs(gx) <= geometry.REF_HALF_WIDTH) & (
        np.abs(gy) <= geometry.REF_HALF_HEIGHT
    )
    rho = geometry.scaled_distance(gauss_mm)
    ring = (rho >= geometry.RING_INNER) & (rho <= geometry.RING_OUTER)
    coil = np.zeros(gx.shape)
    in_y = (gy >= geometry.COIL_Y[0]) & (gy <= geometry.COIL_Y[1])
    coil[(gx >= geometry.COIL_X[0]) & (gx <= geometry.COIL_X[1]) & in_y] = 1.0
    coil[(gx <= -geometry.COIL_X[0]) & (gx >= -geometry.COIL_X[1]) & in_y] = -1.0

    blend = geometry.blend_weight(nodes)

    X_ref = nodes[quads] * _MM
    ref_det = np.empty((quads.shape[0], 4))
    for g in range(4):
        J = np.einsum("eai,aj->eij", X_ref, dshape[g])
        ref_det[:, g] = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    mesh = Mesh(
        resolution=res,
        half_width_mm=L,
        nodes_mm=nodes,
        quads=quads,
        free=free,
        n_free=free.size,
        blend=blend,
        dshape=dshape,
        shape=shape,
        magnet=magnet,
        ring=ring,
        coil_sign=coil,
        ref_det=ref_det,
    )
    _MESH_CACHE[key] = mesh
    return mesh


def _mapped_nodes_m(mesh, p):
    return geometry.map_nodes(mesh.nodes_mm, mesh.blend, p) * _MM


def _remanence_vector(cfg, p):
    """Remanent flux density vector (T); magnitude fixed, rotates with tilt."""
    roles = geometry.role_values(p)
    th = np.deg2rad(roles[3] - geometry.TILT_DATUM)
    return cfg.remanence * np.array([np.cos(th), np.sin(th)])


def _remanence_velocity(cfg, p, role_index):
    if role_index != 3:
        return np.zeros(2)
    roles = geometry.role_values(p)
    th = np.deg2rad(roles[3] - geometry.TILT_DATUM)
    return cfg.remanence * np.array([-np.sin(th), np.cos(th)]) * (np.pi / 180.0)


class _GaussState:
    """Per-Gauss-point geometry and state factors at one (p, u) pair."""

    __slots__ = ("det", "inv", "grads", "gu", "s", "nu", "dnu", "ue")

    def __init__(self, det, inv, grads, gu, s, nu, dnu, ue):
        self.det = det
        self.inv = inv
        self.grads = grads
        self.gu = gu
        self.s = s
        self.nu = nu
        self.dnu = dnu
        self.ue = ue


def _gauss_states(mesh, cfg, p, u_free, nu_override=None):
    X = _mapped_nodes_m(mesh, p)
    Xe = X[mesh.quads]
    u_full = np.zeros(mesh.n_nodes)
    u_full[mesh.free] = u_free
    ue = u_full[mesh.quads]

    states = []
    for g in range(4):
        J = np.einsum("eai,aj->eij", Xe, mesh.dshape[g])
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0.0):
            bad = int(np.argmax(det <= 0.0))
            raise DegenerateElementError(
                f"non-positive Jacobian in element {bad} at Gauss point {g}"
            )
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / det
        inv[:, 0, 1] = -J[:, 0, 1] / det
        inv[:, 1, 0] = -J[:, 1, 0] / det
        inv[:, 1, 1] = J[:, 0, 0] / det
        grads = np.einsum("eji,aj->eai", inv, mesh.dshape[g])
        gu = np.einsum("ea,eai->ei", ue, grads)
        s = np.einsum("ei,ei->e", gu, gu)

        if nu_override is not None:
            nu = np.full(mesh.n_elements, float(nu_override))
            dnu = np.zeros(mesh.n_elements)
        else:
            nu = np.full(mesh.n_elements, NU0)
            dnu = np.zeros(mesh.n_elements)
            if cfg.material == "brauer":
                k1, k2, k3 = cfg.brauer
                m = mesh.ring[:, g]
                ex = np.exp(k2 * s[m])
                nu[m] = k1 * ex + k3
                dnu[m] = k1 * k2 * ex
        states.append(_GaussState(det, inv, grads, gu, s, nu, dnu, ue))
    return states


def _scatter_matrix(mesh, Ke):
    nn = mesh.n_nodes
    rows = np.repeat(mesh.quads, 4, axis=1)
    cols = np.tile(mesh.quads, (1, 4))
    flat = rows.ravel() * nn + cols.ravel()
    K = np.bincount(flat, weights=Ke.reshape(-1), minlength=nn * nn)
    return K.reshape(nn, nn)


def _scatter_vector(mesh, be):
    return np.bincount(
        mesh.quads.ravel(), weights=be.ravel(), minlength=mesh.n_nodes
    )


def _system(mesh, cfg, p, states, need_tangent):
    """Assemble stiffness K(u), load b, and optionally the Newton tangent."""
    E = mesh.n_elements
    Ke = np.zeros((E, 4, 4))
    Te = np.zeros((E, 4, 4)) if need_tangent else None
    tangent_used = False
    be = np.zeros((E, 4))
    brem = _remanence_vector(cfg, p)
    js = cfg.source_current_density * _A_PER_MM2

    for g, st in enumerate(states):
        coef = st.det * st.nu
        Ke += coef[:, None, None] * np.einsum("eai,ebi->eab", st.grads, st.grads)
        if need_tangent and np.any(st.dnu != 0.0):
            gv = np.einsum("eai,ei->ea", st.grads, st.gu)
            Te += (2.0 * st.det * st.dnu)[:, None, None] * np.einsum(
                "ea,eb->eab", gv, gv
            )
            tangent_used = True
        if cfg.remanence != 0.0:
            rotB = brem[0] * st.grads[:, :, 1] - brem[1] * st.grads[:, :, 0]
            be += (st.det * NU0 * mesh.magnet[:, g])[:, None] * rotB
        if js != 0.0:
            be += (st.det * js * mesh.coil_sign[:, g])[:, None] * mesh.shape[g][None, :]

    K = _scatter_matrix(mesh, Ke)
    b = _scatter_vector(mesh, be)
    ix = np.ix_(mesh.free, mesh.free)
    Kf = K[ix]
    bf = b[mesh.free]
    if need_tangent:
        Tf = Kf + _scatter_matrix(mesh, Te)[ix] if tangent_used else Kf
        return Kf, bf, Tf
    return Kf, bf, None


def assemble(p, u_current, cfg, nu_override=None):
    """Assemble the (free-node) system matrix and load vector at a state.

    The matrix is the secant stiffness A(p, u): symmetric, and SPD for the
    linear law; the residual of the discrete problem is ``A @ u - b``.
    """
    mesh = build_mesh(cfg)
    u_current = np.zeros(mesh.n_free) if u_current is None else np.asarray(
        u_current, dtype=float
    )
    if u_current.shape != (mesh.n_free,):
        raise ValueError(
            f"state length {u_current.shape} does not match {mesh.n_free} free nodes"
        )
    states = _gauss_states(mesh, cfg, p, u_current, nu_override=nu_override)
    K, b, _ = _system(mesh, cfg, p, states, need_tangent=False)
    return K, b


def _parametric_derivatives(mesh, cfg, p, states, want_kpi):
    """Analytic parameter derivatives of the residual (at fixed state).

    Returns (dr, energy, dW_du, dW_dp) where dr has shape (n_active, n_free)
    and the energy terms are None unless requested.
    """
    n_active = p.n_params
    vel = geometry.node_velocities(mesh.nodes_mm, mesh.blend, p) * _MM
    brem = _remanence_vector(cfg, p)
    js = cfg.source_current_density * _A_PER_MM2

    dr = np.zeros((n_active, mesh.n_free))
    energy = 0.0
    dW_du_full = np.zeros(mesh.n_nodes) if want_kpi else None
    dW_dp = np.zeros(n_active) if want_kpi else None

    for g, st in enumerate(states):
        gv = np.einsum("eai,ei->ea", st.grads, st.gu)
        if want_kpi:
            energy += 0.5 * float(np.dot(st.det, st.nu * st.s))
            coef = st.det * (st.nu + st.dnu * st.s)
            dW_du_full += _scatter_vector(mesh, coef[:, None] * gv)
        mag = mesh.magnet[:, g]
        rotG = None
        if cfg.remanence != 0.0:
            rotG = brem[0] * st.grads[:, :, 1] - brem[1] * st.grads[:, :, 0]

        for i in range(n_active):
            Ve = vel[i][mesh.quads]
            dJ = np.einsum("eai,aj->eij", Ve, mesh.dshape[g])
            ddet = st.det * np.einsum("eij,eji->e", st.inv, dJ)
            # d(grad N_a) = -J^-T dJ^T grad N_a
            M = np.einsum("eji,ekj->eik", st.inv, dJ)
            dG = -np.einsum("eik,eak->eai", M, st.grads)
            dgu = np.einsum("ea,eai->ei", st.ue, dG)
            ds = 2.0 * np.einsum("ei,ei->e", st.gu, dgu)
            dnu_s = st.dnu * ds

            term = (
                ddet * st.nu + st.det * dnu_s
            )[:, None] * gv + (st.det * st.nu)[:, None] * (
                np.einsum("eai,ei->ea", st.grads, dgu)
                + np.einsum("eai,ei->ea", dG, st.gu)
            )
            if cfg.remanence != 0.0:
                dB = _remanence_velocity(cfg, p, i)
                rot_dG = brem[0] * dG[:, :, 1] - brem[1] * dG[:, :, 0]
                rot_dB = dB[0] * st.grads[:, :, 1] - dB[1] * st.grads[:, :, 0]
                term -= (NU0 * mag)[:, None] * (
                    ddet[:, None] * rotG + st.det[:, None] * (rot_dG + rot_dB)
                )
            if js != 0.0:
                term -= (ddet * js * mesh.coil_sign[:, g])[:, None] * mesh.shape[g][
                    None, :
                ]
            dr[i] += _scatter_vector(mesh, term)[mesh.free]

            if want_kpi:
                dW_dp[i] += 0.5 * float(
                    np.dot(ddet, st.nu * st.s) + np.dot(st.det, dnu_s * st.s + st.nu * ds)
                )

    dW_du = dW_du_full[mesh.free] if want_kpi else None
    return dr, (energy if want_kpi else None), dW_du, dW_dp


def _fd_residual_derivatives(mesh, cfg, p, u_free):
    """Central finite-difference fallback for the parametric residual derivative."""
    n_active = p.n_params
    dr = np.zeros((n_active, mesh.n_free))
    frozen = p.frozen_mask()
    for i in range(n_active):
        if frozen[i]:
            continue
        delta = cfg.fd_parametric_step * (p.bounds[i][1] - p.bounds[i][0])
        K_p, b_p = assemble(p.shifted(i, delta), u_free, cfg)
        K_m, b_m = assemble(p.shifted(i, -delta), u_free, cfg)
        dr[i] = ((K_p @ u_free - b_p) - (K_m @ u_free - b_m)) / (2.0 * delta)
    return dr


def _fd_energy_derivatives(mesh, cfg, p, u_free):
    n_active = p.n_params
    dW = np.zeros(n_active)
    frozen = p.frozen_mask()
    for i in range(n_active):
        if frozen[i]:
            continue
        delta = cfg.fd_parametric_step * (p.bounds[i][1] - p.bounds[i][0])
        vals = []
        for sign in (1.0, -1.0):
            q = p.shifted(i, sign * delta)
            states = _gauss_states(mesh, cfg, q, u_free)
            w = sum(0.5 * float(np.dot(st.det, st.nu * st.s)) for st in states)
            vals.append(w)
        dW[i] = (vals[0] - vals[1]) / (2.0 * delta)
    return dW


def _tangent_factorization(mesh, cfg, p, u_free):
    states = _gauss_states(mesh, cfg, p, u_free)
    K, b, T = _system(mesh, cfg, p, states, need_tangent=True)
    try:
        F = spd_factorize_jittered(T)
    except NotPositiveDefiniteError as exc:
        raise SingularTangentError(str(exc)) from exc
    return states, K, b, T, F


def _sensitivities(mesh, cfg, p, u_free, F, states):
    if cfg.use_fd_parametric:
        dr = _fd_residual_derivatives(mesh, cfg, p, u_free)
    else:
        dr, _, _, _ = _parametric_derivatives(mesh, cfg, p, states, want_kpi=False)
    sens = -spd_solve(F, dr.T)
    sens[:, p.frozen_mask()] = 0.0
    return sens


def solve(p, cfg):
    """Solve the state problem at p and populate parametric sensitivities.

    The linear law needs a single factorization; the Brauer law runs damped
    Newton to a relative residual of ``cfg.newton_tol``.
    """
    mesh = build_mesh(cfg)
    n = mesh.n_free
    u = np.zeros(n)
    states = _gauss_states(mesh, cfg, p, u)
    K, b, T = _system(mesh, cfg, p, states, need_tangent=True)

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        sens = np.zeros((n, p.n_params))
        return FieldSolution(u, sens, 0, 0.0, [0.0])

    history = []
    if cfg.material == "linear":
        F = spd_factorize_jittered(K)
        u = spd_solve(F, b)
        res = float(np.linalg.norm(K @ u - b)) / b_norm
        history.append(res)
        iterations = 1
        states = _gauss_states(mesh, cfg, p, u)
    else:
        res = 1.0  # residual at u = 0 is -b
        history.append(res)
        stall = 0
        iterations = 0
        F = None
        for iterations in range(1, cfg.newton_max_iter + 1):
            try:
                F = spd_factorize_jittered(T)
            except NotPositiveDefiniteError as exc:
                raise NewtonDivergenceError(
                    f"tangent factorization failed at iteration {iterations}: {exc}"
                ) from exc
            step = spd_solve(F, b - K @ u)
            alpha = 1.0
            best = None
            for _ in range(30):
                u_try = u + alpha * step
                states_try = _gauss_states(mesh, cfg, p, u_try)
                K_try, _, T_try = _system(mesh, cfg, p, states_try, need_tangent=True)
                res_try = float(np.linalg.norm(K_try @ u_try - b)) / b_norm
                if best is None or res_try < best[0]:
                    best = (res_try, u_try, K_try, T_try, states_try)
                if res_try < res:
                    break
                alpha *= 0.5
            res_new, u, K, T, states = best
            stall = stall + 1 if res_new >= res else 0
            res = res_new
            history.append(res)
            if stall >= 5:
                raise NewtonDivergenceError(
                    f"residual non-decreasing for {stall} damped steps"
                )
            if res <= cfg.newton_tol:
                break
        else:
            raise NewtonDivergenceError(
                f"no convergence in {cfg.newton_max_iter} iterations "
                f"(relative residual {res:.3e})"
            )
        # Tangent at the converged state for the sensitivity systems.
        try:
            F = spd_factorize_jittered(T)
        except NotPositiveDefiniteError as exc:
            raise SingularTangentError(str(exc)) from exc

    sens = _sensitivities(mesh, cfg, p, u, F, states)
    return FieldSolution(u, sens, iterations, res, history)


def solve_sensitivities(p, u, cfg):
    """Tangent sensitivities d(state)/d(parameter) at a converged state."""
    mesh = build_mesh(cfg)
    u = np.asarray(u, dtype=float)
    states, K, b, T, F = _tangent_factorization(mesh, cfg, p, u)
    b_norm = float(np.linalg.norm(b))
    res = float(np.linalg.norm(K @ u - b)) / max(b_norm, 1e-300)
    if b_norm > 0.0 and res > 100.0 * cfg.newton_tol:
        raise ValueError(
            f"state does not satisfy the discrete problem (residual {res:.3e})"
        )
    return _sensitivities(mesh, cfg, p, u, F, states)


def compute_kpi(p, sol, cfg):
    """Field energy per unit depth and its parameter gradient (adjoint)."""
    mesh = build_mesh(cfg)
    u = np.asarray(sol.u, dtype=float)
    states, K, b, T, F = _tangent_factorization(mesh, cfg, p, u)
    dr, energy, dW_du, dW_dp = _parametric_derivatives(
        mesh, cfg, p, states, want_kpi=True
    )
    if cfg.use_fd_parametric:
        dr = _fd_residual_derivatives(mesh, cfg, p, u)
        dW_dp = _fd_energy_derivatives(mesh, cfg, p, u)
    lam = spd_solve(F, dW_du)
    grad = dW_dp - dr @ lam
    grad[p.frozen_mask()] = 0.0
    return KpiSample(value=float(energy), gradient=grad)


def is_feasible(p, cfg):
    """Geometric feasibility: magnet clears the boundary by one element and
    mapped Gauss Jacobians keep at least 5% of their reference value."""
    mesh = build_mesh(cfg)
    L = cfg.half_width_mm
    margin = mesh.element_size_mm
    corners = geometry.magnet_corners(p)
    if np.any(np.abs(corners) > L - margin):
        return False

    X = geometry.map_nodes(mesh.nodes_mm, mesh.blend, p) * _MM
    Xe = X[mesh.quads]
    for g in range(4):
        J = np.einsum("eai,aj->eij", Xe, mesh.dshape[g])
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= JACOBIAN_RATIO_MIN * mesh.ref_det[:, g]):
            return False
    return True
