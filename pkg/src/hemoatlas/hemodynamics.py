"""Arterial flow: boundary pulse, viscosity, Leray filter, pressure and velocity steps.

Vector fields are ``(n, 3)`` arrays of nodal coefficients; block operators act
on the stacked layout ``[u^1; u^2; u^3]`` (``u.ravel(order="F")``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.optimize import minimize_scalar
from scipy.sparse import linalg as spla

from .fem import FESpace, SparseOperator, SolverError, assemble_boundary_mass, DEFAULT_RTOL

logger = logging.getLogger(__name__)

MMHG = 133.322  # Pa
ML_PER_MIN = 1e-6 / 60.0  # m^3/s

_BH = (0.35875, 0.48829, 0.14128, 0.01168)


class NumericalAbort(RuntimeError):
    """A non-finite value appeared during time stepping."""

    def __init__(self, step: int, field_name: str, detail: str = ""):
        self.step = step
        self.field = field_name
        msg = f"non-finite {field_name} at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def check_finite(values, step: int, name: str):
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NumericalAbort(step, name, f"{bad} entries")


# -- boundary pulse -----------------------------------------------------------


def blackman_harris(t):
    """Four-term Blackman-Harris window on (0, 1), extended with period one."""
    x = np.mod(np.asarray(t, dtype=float), 1.0)
    a0, a1, a2, a3 = _BH
    tau = 2 * np.pi * x
    return a0 - a1 * np.cos(tau) + a2 * np.cos(2 * tau) - a3 * np.cos(3 * tau)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class PulseSpec:
    """Three-component (percussion, tidal, dicrotic) boundary pulse.

    Each component is one window of duration ``L`` (cycle fraction) starting
    at cycle phase ``t_start``; the sum is scaled by an amplitude chosen so the
    peak-to-trough swing over a cycle equals ``pulse_pressure``.
    """

    weights: tuple[float, float, float] = (0.50, 0.30, 0.25)
    durations: tuple[float, float, float] = (0.55, 0.55, 0.60)
    starts: tuple[float, float, float] = (0.05, 0.20, 0.38)
    cycle: float = 1.0  # s
    pulse_pressure: float = 50 * MMHG  # Pa
    spheres: tuple[Sphere, ...] = ()

    def __post_init__(self):
        if any(w <= 0 for w in self.weights) or any(d <= 0 for d in self.durations):
            raise ValueError("pulse weights and durations must be positive")
        if any(d > 1 for d in self.durations):
            raise ValueError("pulse durations must not exceed one cycle")
        if any(not 0 <= s < 1 for s in self.starts):
            raise ValueError("pulse start times must lie in [0, 1)")
        if not self.cycle > 0:
            raise ValueError("cycle length must be positive")
        if self.pulse_pressure < 0:
            raise ValueError("pulse pressure must be non-negative")
        for s in self.spheres:
            if not s.radius > 0:
                raise ValueError("support sphere radius must be positive")

    @classmethod
    def from_bpm(cls, bpm: float, **kw) -> "PulseSpec":
        return cls(cycle=60.0 / bpm, **kw)

    def shape(self, phase):
        """Unscaled waveform as a function of cycle phase."""
        ph = np.mod(np.asarray(phase, dtype=float), 1.0)
        out = np.zeros_like(ph)
        for a, L, t0 in zip(self.weights, self.durations, self.starts):
            x = np.mod(ph - t0, 1.0)
            on = x < L
            out = out + a * np.where(on, blackman_harris(x / L), 0.0)
        return out

    @cached_property
    def _extrema(self):
        grid = np.linspace(0.0, 1.0, 20001)
        vals = self.shape(grid)
        step = grid[1] - grid[0]
        out = []
        for sgn, k in ((1.0, int(np.argmax(vals))), (-1.0, int(np.argmin(vals)))):
            res = minimize_scalar(
                lambda s: -sgn * float(self.shape(s)),
                bounds=(grid[k] - step, grid[k] + step),
                method="bounded",
                options={"xatol": 1e-13},
            )
            best = max(sgn * vals[k], -res.fun)
            out.append(sgn * best)
        return tuple(out)

    @property
    def amplitude(self) -> float:
        hi, lo = self._extrema
        return self.pulse_pressure / (hi - lo) if hi > lo else 0.0

    @property
    def trough(self) -> float:
        """Minimum of the scaled waveform over a cycle (Pa)."""
        return self.amplitude * self._extrema[1]

    def temporal(self, t):
        """Scaled waveform at time ``t`` (s), ignoring the spatial support."""
        return self.amplitude * self.shape(np.asarray(t, float) / self.cycle)

    def support(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        mask = np.zeros(len(x), bool)
        for s in self.spheres:
            mask |= np.linalg.norm(x - np.asarray(s.center), axis=1) <= s.radius
        return mask


def pulse_pressure(x, t: float, spec: PulseSpec):
    """Boundary pulse at points ``x`` and time ``t``; zero outside every sphere."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    val = np.where(spec.support(x), float(spec.temporal(t)), 0.0)
    return float(val[0]) if single else val


# -- rheology ----------------------------------------------------------------


@dataclass(frozen=True)
class ViscosityParams:
    mu0: float = 56e-3  # Pa s
    mu_inf: float = 3.45e-3  # Pa s
    relaxation: float = 1.902  # s
    n: float = 0.22
    a: float = 1.25

    def __post_init__(self):
        if not self.mu0 > self.mu_inf > 0:
            raise ValueError("viscosities must satisfy mu0 > mu_inf > 0")
        if not self.relaxation > 0:
            raise ValueError("relaxation time must be positive")
        if not 0 < self.n < 1:
            raise ValueError("power-law index must lie in (0, 1)")
        if not self.a > 0:
            raise ValueError("transition parameter must be positive")


def carreau_yasuda(gamma, params: ViscosityParams = ViscosityParams()):
    g = np.abs(np.asarray(gamma, dtype=float))
    p = params
    return p.mu_inf + (p.mu0 - p.mu_inf) * (1.0 + (p.relaxation * g) ** p.a) ** ((p.n - 1.0) / p.a)


def velocity_gradients(space: FESpace, u: np.ndarray) -> np.ndarray:
    """Per-tet Jacobian ``J[e, a, b] = d u^a / d x_b``."""
    return np.einsum("eia,eib->eab", _rel(u, space.tets), space.grads)


def _rel(values, tets):
    # element values minus the first vertex: gradients of constants vanish exactly
    v = np.asarray(values, float)[tets]
    return v - v[:, :1]


def scalar_gradients(space: FESpace, f) -> np.ndarray:
    """Per-tet gradient of a nodal scalar field, (M, 3)."""
    return np.einsum("ei,eia->ea", _rel(f, space.tets), space.grads)


def shear_rate(space: FESpace, u: np.ndarray) -> np.ndarray:
    """Nodal shear rate sqrt(S:S / 2), S = grad u + grad u^T, volume-averaged from tets."""
    J = velocity_gradients(space, u)
    S = J + np.transpose(J, (0, 2, 1))
    g = np.sqrt(0.5 * np.einsum("eab,eab->e", S, S))
    w = np.repeat(space.vols, 4)
    num = np.bincount(space.tets.ravel(), weights=w * np.repeat(g, 4), minlength=space.n)
    den = np.bincount(space.tets.ravel(), weights=w, minlength=space.n)
    return num / den


class HelmholtzFilter:
    """Solve (M + l^2 K) x~ = M x; the identity when ``l == 0``."""

    def __init__(self, space: FESpace, length: float):
        if length < 0:
            raise ValueError("filter length must be non-negative")
        self.length = float(length)
        self.M = space.mass().matrix
        self.A = SparseOperator((self.M + length**2 * space.stiffness().matrix).tocsr())

    def __call__(self, x):
        if self.length == 0:
            return np.array(x, dtype=float, copy=True)
        x = np.asarray(x, float)
        if x.ndim == 1:
            return self.A.solve(self.M @ x)
        return np.stack([self.A.solve(self.M @ x[:, k]) for k in range(x.shape[1])], axis=1)


def helmholtz_smooth(space: FESpace, x, length: float):
    return HelmholtzFilter(space, length)(x)


# -- flow parameters and boundary coefficients -------------------------------


@dataclass(frozen=True)
class FlowParams:
    rho: float = 1050.0  # kg/m^3
    mu: float = 4e-3  # Pa s, reference viscosity
    flow: float = 750 * ML_PER_MIN  # m^3/s
    pressure: float = 87 * MMHG  # Pa, mean arterial pressure
    arteriole_area: float = np.pi * (5e-6) ** 2  # m^2
    beta_dist: float = 0.2
    volume: float = 1e-4  # m^3, overall volume of changes
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)  # m/s^2
    eps_leray: float = 0.03
    eps_visc: float = 0.01
    dt: float = 2e-3  # s

    def __post_init__(self):
        for name in ("rho", "mu", "flow", "pressure", "arteriole_area", "beta_dist", "volume", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.eps_leray < 0 or self.eps_visc < 0:
            raise ValueError("smoothing lengths must be non-negative")


def compute_zeta(params: FlowParams, area: float) -> float:
    """Outflow coefficient 8 pi mu Q / (|dOmega| A_a p), in 1/m."""
    den = area * params.arteriole_area * params.pressure
    if not den > 0:
        raise ValueError("boundary area, arteriole area and pressure must be positive")
    return 8 * np.pi * params.mu * params.flow / den


def compute_nu_bar(params: FlowParams, area: float) -> float:
    """(1 + b^2) |dOmega| A_a p / (8 pi mu b^2 V), in m/s."""
    b2 = params.beta_dist**2
    den = 8 * np.pi * params.mu * b2 * params.volume
    if not den > 0:
        raise ValueError("zero denominator in nu_bar")
    return (1 + b2) * area * params.arteriole_area * params.pressure / den


def boundary_coefficient(params: FlowParams, area: float, lam, mode: str = "zeta_lambda"):
    """Nodal Robin weight of the pressure boundary operator."""
    zeta = compute_zeta(params, area)
    if mode == "zeta_lambda":
        return zeta * np.asarray(lam, float)
    if mode == "wave":
        return np.asarray(lam, float) / (zeta * compute_nu_bar(params, area) ** 2)
    raise ValueError(f"unknown boundary coefficient mode {mode!r} (expected 'zeta_lambda' or 'wave')")


# -- discrete operators ---------------------------------------------------------


def assemble_ppe_rhs(space: FESpace, u, u_smooth, mu, rho: float) -> np.ndarray:
    """Load D(u): 2 int grad(phi).(grad u) grad(mu) - int rho grad(phi).(grad u) u~."""
    J = velocity_gradients(space, u)
    gmu = scalar_gradients(space, mu)
    umean = np.asarray(u_smooth, float)[space.tets].mean(axis=1)
    vec = 2.0 * np.einsum("eab,eb->ea", J, gmu) - rho * np.einsum("eab,eb->ea", J, umean)
    local = space.vols[:, None] * np.einsum("eia,ea->ei", space.grads, vec)
    return space.assembler.vector(local)


def stiffness_apply(space: FESpace, p) -> np.ndarray:
    """K p from element gradients; exactly zero for constant p."""
    gp = scalar_gradients(space, p)
    return space.assembler.vector(space.vols[:, None] * np.einsum("eia,ea->ei", space.grads, gp))


def convection_matrix(space: FESpace, u_smooth, rho: float) -> sparse.csr_matrix:
    """H[i, j] = int rho phi_i (u~ . grad phi_j), scalar block."""
    ue = np.asarray(u_smooth, float)[space.tets]
    wu = (space.vols / 20.0)[:, None, None] * (ue + ue.sum(axis=1, keepdims=True))  # int phi_i u~
    local = rho * np.einsum("eia,eja->eij", wu, space.grads)
    return space.assembler.matrix(local)


def viscous_matrix(space: FESpace, mu) -> sparse.csr_matrix:
    """Block operator: curl-curl part with viscosity mu plus the grad(mu) coupling."""
    mu = np.asarray(mu, float)
    mmean = mu[space.tets].mean(axis=1)
    G = space.grads
    w = (space.vols * mmean)[:, None, None]
    Lab = [[space.assembler.matrix(w * np.einsum("ei,ej->eij", G[:, :, a], G[:, :, b])) for b in range(3)] for a in range(3)]
    gmu = scalar_gradients(space, mu)
    l2 = -2.0 * (space.vols / 4.0)[:, None, None] * np.broadcast_to(np.einsum("eja,ea->ej", G, gmu)[:, None, :], (len(G), 4, 4))
    L2 = space.assembler.matrix(l2)
    blocks = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(3):
            if a == b:
                blocks[a][b] = sum(Lab[c][c] for c in range(3) if c != a) + L2
            else:
                blocks[a][b] = -Lab[b][a]
    return sparse.bmat(blocks, format="csr")


def pressure_gradient_load(space: FESpace, p) -> np.ndarray:
    """Q(p)^a_i = int phi_i d_a p, returned as (n, 3)."""
    gp = scalar_gradients(space, p)
    local = np.broadcast_to((space.vols / 4.0)[:, None, None] * gp[:, None, :], (len(gp), 4, 3))
    return np.stack([space.assembler.vector(local[:, :, a]) for a in range(3)], axis=1)


def body_force_load(space: FESpace, rho: float, f) -> np.ndarray:
    """Block force term -int rho f phi_i (the sign makes the update accelerate along f)."""
    lm = space.lumped_mass()
    return -rho * np.outer(lm, np.asarray(f, float))


@dataclass
class FlowOperators:
    """Time-independent operators of the arterial domain."""

    space: FESpace
    boundary_nodes: np.ndarray  # local ids on the artery wall
    K: SparseOperator
    M: SparseOperator
    C: SparseOperator
    params: FlowParams
    viscosity: ViscosityParams = field(default_factory=ViscosityParams)
    leray: HelmholtzFilter = None
    visc_filter: HelmholtzFilter = None
    force: np.ndarray = None
    scheme: str = "semi-implicit"
    gravity_mode: str = "body_force"
    rtol: float = DEFAULT_RTOL

    def __post_init__(self):
        dt = self.params.dt
        self.P = SparseOperator((dt**2 * self.K.matrix + self.M.matrix).tocsr())
        n = self.space.n
        free = np.ones(n, bool)
        free[self.boundary_nodes] = False
        self.free = np.flatnonzero(free)
        self.free3 = np.concatenate([self.free + k * n for k in range(3)])
        self.C_ff = SparseOperator(self.C.matrix[self.free][:, self.free].tocsr())
        h = self.space_edge
        if self.leray is None:
            self.leray = HelmholtzFilter(self.space, self.params.eps_leray * h)
        if self.visc_filter is None:
            self.visc_filter = HelmholtzFilter(self.space, self.params.eps_visc * h)
        if self.gravity_mode not in ("body_force", "hydrostatic"):
            raise ValueError(f"unknown gravity mode {self.gravity_mode!r}")
        g = np.asarray(self.params.gravity, float)
        if self.gravity_mode == "hydrostatic":
            # uniform body force balanced by the head rho g.(x - x_ref); it
            # cancels the force term exactly and only shifts the pressure
            ref = self.space.points[self.boundary_nodes].mean(axis=0)
            self.hydrostatic = self.params.rho * (self.space.points - ref) @ g
            g = np.zeros(3)
        else:
            self.hydrostatic = np.zeros(self.space.n)
        if self.force is None:
            self.force = body_force_load(self.space, self.params.rho, g)
        if self.scheme not in ("explicit", "semi-implicit"):
            raise ValueError(f"unknown velocity scheme {self.scheme!r}")

    @cached_property
    def space_edge(self) -> float:
        t = self.space.tets
        e = np.unique(np.sort(t[:, [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]].reshape(-1, 2), axis=1), axis=0)
        return float(np.linalg.norm(self.space.points[e[:, 0]] - self.space.points[e[:, 1]], axis=1).mean())

    @classmethod
    def build(cls, space: FESpace, wall_triangles, boundary_coeff, params: FlowParams, **kw) -> "FlowOperators":
        """``wall_triangles`` and ``boundary_coeff`` use the local numbering of ``space``."""
        M = assemble_boundary_mass(space.points, wall_triangles, boundary_coeff, space.n)
        return cls(
            space=space,
            boundary_nodes=np.unique(wall_triangles),
            K=space.stiffness(),
            M=M,
            C=space.mass(params.rho),
            params=params,
            **kw,
        )


@dataclass
class FlowState:
    """Three-level pressure and boundary-pulse history plus velocity and viscosity."""

    p: np.ndarray  # p_{k-1}
    p_prev: np.ndarray  # p_{k-2}
    u: np.ndarray  # (n, 3)
    u_smooth: np.ndarray
    mu: np.ndarray
    pb: np.ndarray  # pulse at k-1
    pb_prev: np.ndarray  # pulse at k-2
    step: int = 0
    time: float = 0.0

    def copy(self) -> "FlowState":
        return replace(self, **{k: np.array(getattr(self, k)) for k in ("p", "p_prev", "u", "u_smooth", "mu", "pb", "pb_prev")})


def pressure_step(state: FlowState, ops: FlowOperators, pb_k) -> np.ndarray:
    """Next pressure from the second-difference recursion.

    (dt^2 K + M) p_k = dt^2 D(u_{k-1}) + M (2 p_{k-1} - p_{k-2}) + M (pb_k - 2 pb_{k-1} + pb_{k-2})
    """
    dt = ops.params.dt
    D = assemble_ppe_rhs(ops.space, state.u, state.u_smooth, state.mu, ops.params.rho)
    M = ops.M.matrix
    # solved for the increment p_k - p_{k-1}, so a steady field is reproduced exactly
    rhs = dt**2 * (D - stiffness_apply(ops.space, state.p)) + M @ (state.p - state.p_prev) + M @ (pb_k - 2 * state.pb + state.pb_prev)
    check_finite(rhs, state.step + 1, "pressure")
    p = state.p + ops.P.solve(rhs, ops.rtol)
    check_finite(p, state.step + 1, "pressure")
    return p


def update_viscosity(state: FlowState, ops: FlowOperators) -> np.ndarray:
    g = ops.visc_filter(shear_rate(ops.space, state.u))
    return carreau_yasuda(np.maximum(g, 0.0), ops.viscosity)


def velocity_step(state: FlowState, p_k, mu_k, ops: FlowOperators, scheme: str | None = None) -> np.ndarray:
    """Velocity update with zero velocity on the artery wall.

    ``explicit`` applies u_k = u_{k-1} + dt C^-1 (-Q(p_k) - H(u~) u_{k-1} - L u_{k-1} - F).
    ``semi-implicit`` evaluates the H and L terms at u_k instead, which removes
    the convective and viscous time-step limits.
    """
    scheme = scheme or ops.scheme
    sp, n, dt = ops.space, ops.space.n, ops.params.dt
    H = convection_matrix(sp, state.u_smooth, ops.params.rho)
    L = viscous_matrix(sp, mu_k)
    Hb = sparse.block_diag([H, H, H], format="csr")
    A = (Hb + L).tocsr()
    b = -pressure_gradient_load(sp, p_k) - ops.force
    b3 = b.ravel(order="F")
    u3 = state.u.ravel(order="F")
    f3 = ops.free3
    out = np.zeros(3 * n)
    if scheme == "explicit":
        r = (b3 - A @ u3)[f3].reshape(3, -1)
        du = np.concatenate([ops.C_ff.solve(r[k], ops.rtol) for k in range(3)])
        out[f3] = u3[f3] + dt * du
    else:
        Cb = sparse.block_diag([ops.C.matrix] * 3, format="csr")
        lhs = (Cb + dt * A)[f3][:, f3].tocsc()
        rhs = (Cb @ u3 + dt * b3)[f3]
        try:
            x = spla.splu(lhs).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"velocity system: {exc}") from None
        out[f3] = x
    u = out.reshape(3, n).T.copy()
    check_finite(u, state.step + 1, "velocity")
    return u


def initial_state(ops: FlowOperators, diastolic: float, pb0: np.ndarray) -> FlowState:
    """Rest state: u = 0 and a uniform diastolic pressure history."""
    n = ops.space.n
    p0 = np.full(n, float(diastolic))
    mu = np.full(n, carreau_yasuda(0.0, ops.viscosity))
    u = np.zeros((n, 3))
    return FlowState(p=p0, p_prev=p0.copy(), u=u, u_smooth=u.copy(), mu=mu, pb=pb0.copy(), pb_prev=pb0.copy())


def advance(state: FlowState, ops: FlowOperators, pb_k) -> FlowState:
    """One full flow step: pressure, viscosity, velocity, Leray filter."""
    p_k = pressure_step(state, ops, pb_k)
    mu_k = update_viscosity(state, ops)
    check_finite(mu_k, state.step + 1, "viscosity")
    u_k = velocity_step(state, p_k, mu_k, ops)
    ut = ops.leray(u_k)
    return FlowState(
        p=p_k,
        p_prev=state.p,
        u=u_k,
        u_smooth=ut,
        mu=mu_k,
        pb=np.asarray(pb_k, float),
        pb_prev=state.pb,
        step=state.step + 1,
        time=state.time + ops.params.dt,
    )
