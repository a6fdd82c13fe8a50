"""Single-track vehicle model in curvilinear path coordinates.

State: yaw rate r, speed V, sideslip beta, wheel speeds omega_f/omega_r,
path position s, lateral offset e (positive left of path), heading error
dphi = phi - phi_ref.  Controls: steering delta, axle torques tau_f/tau_r.
Lumped axle forces are tire-frame: F_y <= 0 for alpha >= 0, F_x >= 0 for
sigma >= 0.

The *_core functions are written against the autodiff dispatch ops so the
identical expressions serve the plain-float plant path, vectorized numpy
evaluation, and taped NMPC sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateVelocity,
    DimensionMismatch,
    PathSingularity,
    SingularInversion,
)

# Guards: slip kinematics are undefined below EPS_V (m/s); curvilinear rates
# blow up when the offset reaches the reference's center of curvature.
EPS_V = 0.1
PATH_EPS = 1e-6


@dataclass(frozen=True)
class VehicleParams:
    """Lumped single-track parameters.

    i_w is the drivetrain-reflected spin inertia per axle; it sets the wheel
    slip time constant r_w^2 * C_sigma / (i_w * V_x) and therefore the
    largest stable explicit integration step near zero slip ratio.
    """

    m: float = 1750.0
    i_z: float = 2500.0
    a: float = 1.42
    b: float = 1.37
    r_w: float = 0.33
    i_w: float = 4.0
    g: float = 9.81
    mu_bar: float = 0.41

    @property
    def mu_fz_bar(self) -> float:
        """Nominal friction-force scale mu_bar * m * g (per axle bound used in training)."""
        return self.mu_bar * self.m * self.g


@dataclass(frozen=True)
class VehicleState:
    r: float = 0.0
    v: float = 10.0
    beta: float = 0.0
    omega_f: float = 0.0
    omega_r: float = 0.0
    s: float = 0.0
    e: float = 0.0
    dphi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r, self.v, self.beta, self.omega_f, self.omega_r, self.s, self.e, self.dphi]
        )

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class Control:
    delta: float = 0.0
    tau_f: float = 0.0
    tau_r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.tau_f, self.tau_r])


@dataclass(frozen=True)
class AxleForces:
    fxf: float = 0.0
    fyf: float = 0.0
    fxr: float = 0.0
    fyr: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.fxf, self.fyf, self.fxr, self.fyr])


@dataclass(frozen=True)
class Slips:
    alpha_f: float
    alpha_r: float
    sigma_f: float
    sigma_r: float

    @property
    def kappa_f(self):
        return combined_slip(self.alpha_f, self.sigma_f)

    @property
    def kappa_r(self):
        return combined_slip(self.alpha_r, self.sigma_r)


def combined_slip(alpha, sigma):
    """Total slip magnitude sqrt(tan(alpha)^2 + sigma^2)."""
    ta = ad.tan(alpha)
    return ad.sqrt(ta * ta + sigma * sigma)


def slip_core(r, v, beta, omega_f, omega_r, delta, params):
    """Slip angles and ratios; returns (alpha_f, alpha_r, sigma_f, sigma_r, v_xf, v_xr).

    No velocity guard here: callers on the taped/array paths are responsible
    for keeping |V_x| in range.
    """
    sb = ad.sin(beta)
    cb = ad.cos(beta)
    v_lat = v * sb
    v_lon = v * cb
    alpha_f = ad.atan((v_lat + params.a * r) / v_lon) - delta
    alpha_r = ad.atan((v_lat - params.b * r) / v_lon)
    v_xf = v * ad.cos(delta - beta) - params.a * r * ad.sin(delta)
    v_xr = v_lon
    sigma_f = (params.r_w * omega_f - v_xf) / v_xf
    sigma_r = (params.r_w * omega_r - v_xr) / v_xr
    return alpha_f, alpha_r, sigma_f, sigma_r, v_xf, v_xr


def compute_slips(state: VehicleState, control: Control, params: VehicleParams,
                  eps_v: float = EPS_V) -> Slips:
    """Slip angles/ratios at one state; raises DegenerateVelocity below eps_v."""
    v_xr = state.v * np.cos(state.beta)
    v_xf = state.v * np.cos(control.delta - state.beta) - params.a * state.r * np.sin(control.delta)
    if abs(v_xr) < eps_v or abs(v_xf) < eps_v:
        raise DegenerateVelocity(
            f"|V_x| below {eps_v} m/s (v_xf={v_xf:.4f}, v_xr={v_xr:.4f})"
        )
    af, ar, sf, sr, _, _ = slip_core(
        state.r, state.v, state.beta, state.omega_f, state.omega_r, control.delta, params
    )
    return Slips(float(af), float(ar), float(sf), float(sr))


def dynamics_core(x, u, forces, kappa_ref, params):
    """Time derivative of the 8-state vector; generic over floats/arrays/Vars.

    x = (r, v, beta, omega_f, omega_r, s, e, dphi), u = (delta, tau_f, tau_r),
    forces = (fxf, fyf, fxr, fyr) in tire frame.
    """
    r, v, beta, omega_f, omega_r, s, e, dphi = x
    delta, tau_f, tau_r = u
    fxf, fyf, fxr, fyr = forces
    sb = ad.sin(beta)
    cb = ad.cos(beta)
    sdb = ad.sin(delta - beta)
    cdb = ad.cos(delta - beta)
    rdot = (params.a * (fyf * ad.cos(delta) + fxf * ad.sin(delta)) - params.b * fyr) / params.i_z
    vdot = (fxf * cdb - fyf * sdb + fxr * cb + fyr * sb) / params.m
    betadot = (fyf * cdb + fxf * sdb + fyr * cb - fxr * sb) / (params.m * v) - r
    omega_f_dot = (tau_f - params.r_w * fxf) / params.i_w
    omega_r_dot = (tau_r - params.r_w * fxr) / params.i_w
    ang = dphi + beta
    sdot = v * ad.cos(ang) / (1.0 - e * kappa_ref)
    edot = v * ad.sin(ang)
    dphidot = r - kappa_ref * sdot
    return [rdot, vdot, betadot, omega_f_dot, omega_r_dot, sdot, edot, dphidot]


def dynamics_deriv(state: VehicleState, control: Control, forces: AxleForces,
                   params: VehicleParams, kappa_ref: float = 0.0) -> np.ndarray:
    """State derivative as an (8,) array; raises PathSingularity near 1/kappa offset."""
    denom = 1.0 - state.e * kappa_ref
    if abs(denom) < PATH_EPS:
        raise PathSingularity(f"|1 - e*kappa_ref| = {abs(denom):.2e} at s={state.s:.2f}")
    d = dynamics_core(
        state.as_array(), control.as_array(), forces.as_array(), kappa_ref, params
    )
    return np.array([float(di) for di in d])


def rk4_step(deriv_fn, state, dt, t=0.0):
    """Classic fixed-step RK4 on array states; deriv_fn(state, t) -> array."""
    k1 = deriv_fn(state, t)
    k2 = deriv_fn(state + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = deriv_fn(state + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = deriv_fn(state + dt * k3, t + dt)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def estimate_forces(r, v, beta, rdot, vdot, betadot, delta, params: VehicleParams,
                    cond_limit: float = 1e8):
    """Invert the rigid-body balance for (F_yf, F_xr, F_yr), assuming F_xf = 0.

    All arguments broadcast as 1-D arrays over a trace.  Raises
    SingularInversion when any per-sample 3x3 system has condition number
    above cond_limit.
    """
    r, v, beta, rdot, vdot, betadot, delta = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(q, dtype=float))
          for q in (r, v, beta, rdot, vdot, betadot, delta))
    )
    n = r.shape[0]
    A = np.empty((n, 3, 3))
    sb, cb = np.sin(beta), np.cos(beta)
    sdb, cdb = np.sin(delta - beta), np.cos(delta - beta)
    A[:, 0, 0] = params.a * np.cos(delta) / params.i_z
    A[:, 0, 1] = 0.0
    A[:, 0, 2] = -params.b / params.i_z
    A[:, 1, 0] = -sdb / params.m
    A[:, 1, 1] = cb / params.m
    A[:, 1, 2] = sb / params.m
    A[:, 2, 0] = cdb / (params.m * v)
    A[:, 2, 1] = -sb / (params.m * v)
    A[:, 2, 2] = cb / (params.m * v)
    rhs = np.stack([rdot, vdot, betadot + r], axis=1)
    cond = np.linalg.cond(A)
    if np.any(cond > cond_limit):
        bad = int(np.argmax(cond))
        raise SingularInversion(
            f"force inversion condition {cond.max():.3e} > {cond_limit:.1e} at sample {bad}"
        )
    sol = np.linalg.solve(A, rhs[..., None])[..., 0]
    return sol[:, 0], sol[:, 1], sol[:, 2]


def differentiate_trace(t, y, smooth_window: int = 0):
    """Time derivative of a sampled signal.

    Second-order central differences inside, one-sided at the ends
    (np.gradient), optionally followed by a zero-phase moving average of odd
    width smooth_window (reflect padding, so no lag and no shrinkage).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape:
        raise DimensionMismatch(f"t shape {t.shape} != y shape {y.shape}")
    dy = np.gradient(y, t)
    if smooth_window and smooth_window > 1:
        w = int(smooth_window)
        if w % 2 == 0:
            raise DimensionMismatch("smooth_window must be odd")
        pad = w // 2
        ext = np.concatenate([dy[pad:0:-1], dy, dy[-2:-2 - pad:-1]])
        dy = np.convolve(ext, np.full(w, 1.0 / w), mode="valid")
    return dy


@dataclass
class PathReference:
    """Reference course sampled on a uniform s grid.

    phi is the integral of kappa over s.  v_ref/beta_ref are the speed and
    sideslip targets; delta_ff/tau_ff are equilibrium feedforward controls
    used to seed and regularize the tracking controller.
    """

    s: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray
    v_ref: np.ndarray
    beta_ref: np.ndarray
    delta_ff: np.ndarray
    tau_ff: np.ndarray

    def __post_init__(self):
        n = self.s.shape[0]
        for name in ("kappa", "phi", "v_ref", "beta_ref", "delta_ff", "tau_ff"):
            if getattr(self, name).shape[0] != n:
                raise DimensionMismatch(f"PathReference field {name} length != s length")

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def kappa_at(self, s):
        return ad.lininterp(s, self.s, self.kappa)

    def phi_at(self, s):
        return ad.lininterp(s, self.s, self.phi)

    def v_at(self, s):
        return ad.lininterp(s, self.s, self.v_ref)

    def beta_at(self, s):
        return ad.lininterp(s, self.s, self.beta_ref)

    def delta_ff_at(self, s):
        return ad.lininterp(s, self.s, self.delta_ff)

    def tau_ff_at(self, s):
        return ad.lininterp(s, self.s, self.tau_ff)
