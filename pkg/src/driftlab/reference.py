"""Reference courses and steady-state cornering equilibria.

A PathReference is a curvature profile kappa(s) with speed, sideslip, and
feedforward-control profiles attached.  Corner curvature ramps in and out
linearly in s (clothoid segments) and the slowly-varying profiles (v_ref,
beta_ref, delta_ff, tau_ff) blend between segment values with cubic easing,
so the tracking controller never sees steps.

Equilibria come from the single-track force balance with the yaw rate pinned
to r = kappa*V.  For a given corner there are two families: the grip branch
(small sideslip, steering into the turn) and the drift branch (large
opposite sideslip, counter-steer, high rear slip ratio).  The solver scans a
coarse grid of (beta, delta, sigma) for residual basins and polishes with a
damped Newton; plain Newton wanders onto the tire-force plateau and returns
wrapped or spun solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleGeometry, NoConvergence
from .vehicle import PathReference, VehicleParams

R_GRID_DRIFT = (
    np.linspace(-0.65, -0.10, 34),
    np.linspace(-0.50, 0.30, 33),
    np.linspace(0.08, 0.85, 26),
)
R_GRID_GRIP = (
    np.linspace(-0.15, 0.15, 25),
    np.linspace(-0.10, 0.45, 23),
    np.linspace(-0.04, 0.12, 17),
)
VDOT_WEIGHT = 0.2


@dataclass
class Equilibrium:
    """Steady cornering point: states, controls, and the residual reached."""

    v: float
    r: float
    beta: float
    delta: float
    sigma: float
    tau: float
    residual: float
    branch: str


def _resid(z, v, r, tire, params):
    """(rdot, vdot*w, betadot) over leading axes of z = (..., 3).

    vdot is in m/s^2 against rad/s^2 for the others; weighting it down makes
    the Newton steps comparable across rows.
    """
    beta, delta, sigma = z[..., 0], z[..., 1], z[..., 2]
    v_xr = v * np.cos(beta)
    alpha_f = np.arctan2(v * np.sin(beta) + params.a * r, v_xr) - delta
    alpha_r = np.arctan2(v * np.sin(beta) - params.b * r, v_xr)
    _, fyf = tire.front.forces(alpha_f, 0.0 * alpha_f)
    fxr, fyr = tire.rear.forces(alpha_r, sigma)
    rdot = (params.a * fyf * np.cos(delta) - params.b * fyr) / params.i_z
    vdot = (-fyf * np.sin(delta - beta) + fxr * np.cos(beta)
            + fyr * np.sin(beta)) / params.m
    betadot = (fyf * np.cos(delta - beta) + fyr * np.cos(beta)
               - fxr * np.sin(beta)) / (params.m * v) - r
    return np.stack([rdot, vdot * VDOT_WEIGHT, betadot], axis=-1)


def _newton(z0, v, r, tire, params, tol=1e-11, max_iter=60):
    z = np.array(z0, dtype=float)
    for _ in range(max_iter):
        f = _resid(z, v, r, tire, params)
        if np.max(np.abs(f)) < tol:
            return z, True
        jac = np.zeros((3, 3))
        for j in range(3):
            d = 1e-7 * max(1.0, abs(z[j]))
            zp = z.copy()
            zm = z.copy()
            zp[j] += d
            zm[j] -= d
            jac[:, j] = (_resid(zp, v, r, tire, params)
                         - _resid(zm, v, r, tire, params)) / (2 * d)
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e10:
            return z, False
        step = np.linalg.solve(jac, -f)
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 2.0:
            return z, False
        lam, n0 = 1.0, np.linalg.norm(f)
        for _ in range(30):
            zn = z + lam * step
            if np.linalg.norm(_resid(zn, v, r, tire, params)) < n0:
                z = zn
                break
            lam *= 0.5
        else:
            return z, False
    return z, bool(np.max(np.abs(_resid(z, v, r, tire, params))) < 100 * tol)


def _scan_and_polish(v, r, tire, params, grid, keep):
    bb, dd, ss = np.meshgrid(*grid, indexing="ij")
    z_all = np.stack([bb, dd, ss], axis=-1)
    n = np.linalg.norm(_resid(z_all, v, r, tire, params), axis=-1)
    order = np.argsort(n, axis=None)[:12]
    sols = []
    for idx in order:
        z0 = z_all.reshape(-1, 3)[idx]
        z, ok = _newton(z0, v, r, tire, params)
        if ok and keep(z) and not any(np.allclose(z, s, atol=1e-5) for s in sols):
            sols.append(z)
    return sols


def drift_equilibrium(kappa_ref, v_ref, tire, params: VehicleParams,
                      branch: str = "drift") -> Equilibrium:
    """Steady cornering solution for yaw rate r = kappa_ref*v_ref.

    branch "drift" returns the deepest counter-steer high-sideslip solution;
    "grip" the small-sideslip one.  Straight references (kappa_ref = 0)
    return the trivial rolling equilibrium.  Raises NoConvergence when the
    scan and polish find no equilibrium of the requested kind (the drift
    family only exists near the friction limit).
    """
    v = float(v_ref)
    kappa = float(kappa_ref)
    if v <= 0:
        raise InfeasibleGeometry(f"reference speed must be positive, got {v}")
    if kappa == 0.0:
        return Equilibrium(v=v, r=0.0, beta=0.0, delta=0.0, sigma=0.0,
                           tau=0.0, residual=0.0, branch=branch)
    # the vehicle is left/right symmetric: solve the left-turn problem and
    # mirror the signed quantities back for right turns
    sign = 1.0 if kappa > 0 else -1.0
    r = abs(kappa) * v

    if branch == "drift":
        sols = _scan_and_polish(
            v, r, tire, params, R_GRID_DRIFT,
            keep=lambda z: -0.75 < z[0] < -0.10 and -0.55 < z[1] < 0.25
            and 0.08 < z[2] < 0.90,
        )
        chosen = min(sols, key=lambda s: s[0]) if sols else None
    elif branch == "grip":
        sols = _scan_and_polish(
            v, r, tire, params, R_GRID_GRIP,
            keep=lambda z: abs(z[0]) < 0.25 and abs(z[2]) < 0.15,
        )
        chosen = min(sols, key=lambda s: abs(s[0])) if sols else None
    else:
        raise ConfigError(f"unknown equilibrium branch {branch!r}")
    if chosen is None:
        raise NoConvergence(
            f"no {branch} equilibrium at kappa={kappa:.4f}, V={v:.2f} "
            f"(a_y={v * r:.2f} m/s^2)"
        )
    beta, delta, sigma = (float(q) for q in chosen)
    res = float(np.max(np.abs(_resid(chosen, v, r, tire, params))))
    v_xr = v * np.cos(beta)
    alpha_r = float(np.arctan2(v * np.sin(beta) - params.b * r, v_xr))
    fxr, _ = tire.rear.forces(alpha_r, sigma)
    tau = float(params.r_w * fxr)
    return Equilibrium(v=v, r=sign * r, beta=sign * beta, delta=sign * delta,
                       sigma=sigma, tau=tau, residual=res, branch=branch)


# ---------------------------------------------------------------------------
# course construction
# ---------------------------------------------------------------------------

KAPPA_MAX = 1.0 / 6.0  # tightest representable corner (6 m radius)


def _ease(u):
    """Cubic smoothstep on [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class _Segment:
    length: float
    kappa0: float
    kappa1: float
    v: float
    beta: float
    delta_ff: float
    tau_ff: float
    blend: bool  # profiles ease from the previous segment's values


def _build(segments, ds):
    total = sum(seg.length for seg in segments)
    n = int(round(total / ds)) + 1
    s = np.linspace(0.0, total, n)
    kappa = np.zeros(n)
    v_ref = np.zeros(n)
    beta_ref = np.zeros(n)
    delta_ff = np.zeros(n)
    tau_ff = np.zeros(n)
    s0 = 0.0
    prev = None
    for seg in segments:
        sel = (s >= s0 - 1e-9) & (s <= s0 + seg.length + 1e-9)
        u = (s[sel] - s0) / max(seg.length, 1e-9)
        kappa[sel] = seg.kappa0 + (seg.kappa1 - seg.kappa0) * u
        if seg.blend and prev is not None:
            w = _ease(u)
            v_ref[sel] = prev.v + (seg.v - prev.v) * w
            beta_ref[sel] = prev.beta + (seg.beta - prev.beta) * w
            delta_ff[sel] = prev.delta_ff + (seg.delta_ff - prev.delta_ff) * w
            tau_ff[sel] = prev.tau_ff + (seg.tau_ff - prev.tau_ff) * w
        else:
            v_ref[sel] = seg.v
            beta_ref[sel] = seg.beta
            delta_ff[sel] = seg.delta_ff
            tau_ff[sel] = seg.tau_ff
        s0 += seg.length
        prev = seg
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s))])
    return PathReference(s=s, kappa=kappa, phi=phi, v_ref=v_ref,
                         beta_ref=beta_ref, delta_ff=delta_ff, tau_ff=tau_ff)


def make_reference(kind, tire, params: VehicleParams, v_corner=11.0,
                   radius=15.7, n_corners=4, straight=40.0, blend_len=20.0,
                   arc_angle=None, v_straight=None, ds=0.25,
                   branch="drift") -> "PathReference":
    """Course factory: "figure8" (two opposite full loops) or "slalom"
    (alternating corners between straights).

    Corner speed/curvature must admit a steady cornering solution of the
    requested branch; its (beta, delta, tau) seed the reference profiles.
    blend_len sets the entry/exit ramps; much under 20 m at these speeds the
    sideslip profile slews faster than a closed loop can physically follow.
    Raises InfeasibleGeometry for over-tight corners, NoConvergence when no
    equilibrium exists at the corner condition.
    """
    kappa0 = 1.0 / float(radius)
    if kappa0 > KAPPA_MAX:
        raise InfeasibleGeometry(
            f"corner curvature {kappa0:.3f} exceeds bound {KAPPA_MAX:.3f}"
        )
    v_straight = v_corner if v_straight is None else float(v_straight)
    eq_l = drift_equilibrium(kappa0, v_corner, tire, params, branch=branch)
    eq_r = drift_equilibrium(-kappa0, v_corner, tire, params, branch=branch)

    def corner(eq, kappa, angle):
        arc = angle / kappa0
        return [
            _Segment(blend_len, 0.0, kappa, eq.v, eq.beta, eq.delta,
                     eq.tau, blend=True),
            _Segment(arc, kappa, kappa, eq.v, eq.beta, eq.delta, eq.tau,
                     blend=False),
            _Segment(blend_len, kappa, 0.0, v_straight, 0.0, 0.0, 0.0,
                     blend=True),
        ]

    segs = [_Segment(straight, 0.0, 0.0, v_straight, 0.0, 0.0, 0.0, blend=False)]
    if kind == "figure8":
        # two full loops of opposite hand; net heading change is zero
        loop = 2.0 * np.pi - 2.0 * (blend_len * kappa0 / 2.0)
        segs += corner(eq_l, kappa0, loop)
        segs += [_Segment(0.5 * straight, 0.0, 0.0, v_straight, 0.0, 0.0, 0.0,
                          blend=False)]
        segs += corner(eq_r, -kappa0, loop)
        segs += [_Segment(straight, 0.0, 0.0, v_straight, 0.0, 0.0, 0.0,
                          blend=False)]
    elif kind == "slalom":
        angle = 0.5 * np.pi if arc_angle is None else float(arc_angle)
        for i in range(int(n_corners)):
            eq = eq_l if i % 2 == 0 else eq_r
            segs += corner(eq, kappa0 if i % 2 == 0 else -kappa0, angle)
            segs += [_Segment(0.5 * straight, 0.0, 0.0, v_straight, 0.0, 0.0,
                              0.0, blend=False)]
    elif kind == "straight":
        segs += [_Segment(straight, 0.0, 0.0, v_straight, 0.0, 0.0, 0.0,
                          blend=False)]
    else:
        raise InfeasibleGeometry(f"unknown reference kind {kind!r}")
    return _build(segs, ds)