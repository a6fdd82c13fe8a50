"""Synthetic driving datasets from a ground-truth single-track plant.

The plant is a Magic Formula tire set on the single-track model: the front
axle is pure-lateral and free-rolling (its wheel speed relaxes to the ground
speed with a 20 ms time constant), the rear produces combined-slip forces,
with torque applied at the rear only.

Excitation repeats a scripted 30 s cycle: steering sweeps and slip-ratio
servo targets (grip, deep spin, braking, near-peak dwell) followed by a
sustained drift hold.  Open-loop drifts are unstable, so the drift phase
runs an LQR about the drift equilibrium of the CURRENT plant (reduced
(r, V, beta, omega_r) state, gains from a discrete Riccati iteration), with
targets ramped in over a few seconds.  Drift direction alternates per cycle.

Logged rows follow the dataset CSV schema (SI units, 100 Hz nominal):
t, r, V, beta, omega_f, omega_r, delta, tau_f, tau_r, alpha_f, alpha_r,
sigma_f, sigma_r, fxf, fyf, fxr, fyr, mu_fz_bar.  Forces always come from
the rigid-body inversion of measured state derivatives: with zero sensor
noise the exact derivatives are logged (so forces reproduce the plant tire
evaluations); with noise, derivatives come from finite differences of the
noisy trace plus an optional zero-phase moving average.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonFiniteState
from .reference import drift_equilibrium
from .tires import CH_FRONT_LAT, CH_REAR_COMB, MagicFormulaAxle, MagicFormulaParams
from .vehicle import (
    VehicleParams,
    dynamics_core,
    estimate_forces,
    differentiate_trace,
    rk4_step,
    slip_core,
)

T_ROLL = 0.02  # front wheel free-rolling relaxation time (s)

DATASET_COLUMNS = (
    "t", "r", "V", "beta", "omega_f", "omega_r", "delta", "tau_f", "tau_r",
    "alpha_f", "alpha_r", "sigma_f", "sigma_r", "fxf", "fyf", "fxr", "fyr",
    "mu_fz_bar",
)


@dataclass
class PlantTire:
    """Ground-truth tire set: pure-lateral front, combined-slip rear."""

    name: str
    front: MagicFormulaAxle
    rear: MagicFormulaAxle

    @property
    def rear_peak(self):
        return self.rear.peak_force()


def plant_a(params: VehicleParams = None) -> PlantTire:
    p = params or VehicleParams()
    mf = MagicFormulaParams(b=9.0, c=1.5, d=1.15 * p.mu_fz_bar, e=0.3)
    return PlantTire(
        name="plant_a",
        front=MagicFormulaAxle(params=mf, channel=CH_FRONT_LAT),
        rear=MagicFormulaAxle(params=mf, channel=CH_REAR_COMB),
    )


def plant_b(params: VehicleParams = None) -> PlantTire:
    """Softer, earlier-saturating tire set: lower peak and stiffness."""
    p = params or VehicleParams()
    mf = MagicFormulaParams(b=6.5, c=1.4, d=0.92 * p.mu_fz_bar, e=0.1)
    return PlantTire(
        name="plant_b",
        front=MagicFormulaAxle(params=mf, channel=CH_FRONT_LAT),
        rear=MagicFormulaAxle(params=mf, channel=CH_REAR_COMB),
    )


PLANTS = {"plant_a": plant_a, "plant_b": plant_b}


def plant_deriv(x, u, tire: PlantTire, params: VehicleParams, kappa=0.0):
    """Ground-truth state derivative; front axle free-rolls.

    kappa is the path curvature at the current arc position; excitation runs
    ignore the path states and leave it zero.
    """
    r, v, beta, om_f, om_r = x[:5]
    delta = u[0]
    af, ar, sf, sr, v_xf, _ = slip_core(r, v, beta, om_f, om_r, delta, params)
    _, fyf = tire.front.forces(af, 0.0)
    fxr, fyr = tire.rear.forces(ar, sr)
    d = dynamics_core(x, u, (0.0, fyf, fxr, fyr), kappa, params)
    d[3] = (v_xf / params.r_w - om_f) / T_ROLL
    return np.array(d, dtype=float)


# ---------------------------------------------------------------------------
# excitation controller
# ---------------------------------------------------------------------------


def _reduced_deriv(x4, u2, tire, params):
    """(r, V, beta, omega_r) dynamics with the front wheel quasistatic."""
    r, v, beta, om_r = x4
    delta, tau_r = u2
    v_xf = v * np.cos(delta - beta) - params.a * r * np.sin(delta)
    om_f = v_xf / params.r_w
    af, ar, sf, sr, _, _ = slip_core(r, v, beta, om_f, om_r, delta, params)
    _, fyf = tire.front.forces(af, 0.0)
    fxr, fyr = tire.rear.forces(ar, sr)
    d = dynamics_core((r, v, beta, om_f, om_r, 0.0, 0.0, 0.0),
                      (delta, 0.0, tau_r), (0.0, fyf, fxr, fyr), 0.0, params)
    return np.array([d[0], d[1], d[2], d[4]])


def _lqr_gains(tire, params, x_eq4, u_eq2, dt):
    a = np.zeros((4, 4))
    b = np.zeros((4, 2))
    for j in range(4):
        d = 1e-6 * max(1.0, abs(x_eq4[j]))
        xp, xm = x_eq4.copy(), x_eq4.copy()
        xp[j] += d
        xm[j] -= d
        a[:, j] = (_reduced_deriv(xp, u_eq2, tire, params)
                   - _reduced_deriv(xm, u_eq2, tire, params)) / (2 * d)
    for j in range(2):
        d = 1e-4 * max(1.0, abs(u_eq2[j]))
        up, um = u_eq2.copy(), u_eq2.copy()
        up[j] += d
        um[j] -= d
        b[:, j] = (_reduced_deriv(x_eq4, up, tire, params)
                   - _reduced_deriv(x_eq4, um, tire, params)) / (2 * d)
    ad = np.eye(4) + a * dt
    bd = b * dt
    q = np.diag([2.0, 0.5, 4.0, 0.01]) * dt
    rmat = np.diag([4.0, (1.0 / 1500.0) ** 2 * 2000.0]) * dt
    pmat = q.copy()
    for _ in range(20000):
        btp = bd.T @ pmat
        k = np.linalg.solve(rmat + btp @ bd, btp @ ad)
        pn = q + ad.T @ pmat @ (ad - bd @ k)
        if np.max(np.abs(pn - pmat)) < 1e-12:
            return k
        pmat = pn
    raise NoConvergence("drift LQR Riccati iteration did not settle")


@dataclass
class Excitation:
    """Scripted slip/steer program wrapped around the drift stabilizer."""

    tire: PlantTire
    params: VehicleParams
    v_nominal: float = 11.0
    cycle: float = 30.0
    steer_clip: float = 0.55
    tau_clip: tuple = (-3000.0, 3600.0)
    eq: object = field(default=None)
    gains: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.eq is None:
            self.eq = _find_drift_point(self.tire, self.params, self.v_nominal)
        if self.gains is None:
            eq = self.eq
            v_xr = eq.v * np.cos(eq.beta)
            om_r = (1.0 + eq.sigma) * v_xr / self.params.r_w
            x4 = np.array([eq.r, eq.v, eq.beta, om_r])
            u2 = np.array([eq.delta, eq.tau])
            self.gains = _lqr_gains(self.tire, self.params, x4, u2, 0.005)

    def _servo(self, x, s_tgt, v_tgt, v_cap=800.0):
        """Rear torque from tire-load feedforward plus a wheel-speed servo.

        The speed correction is capped (v_cap, Nm) so it trims drift without
        overruling slip-ratio tracking; bursts pass v_cap=0 for pure slip
        tracking and rely on the paired opposite burst to cancel the speed
        change.
        """
        r, v, beta, om_f, om_r = x[:5]
        v_xr = v * np.cos(beta)
        om_tgt = (1.0 + s_tgt) * v_xr / self.params.r_w
        ar = np.arctan2(v * np.sin(beta) - self.params.b * r, v_xr)
        fx_ff, _ = self.tire.rear.forces(ar, s_tgt)
        tau = self.params.r_w * fx_ff + 80.0 * (om_tgt - om_r)
        tau += np.clip(400.0 * (v_tgt - v), -v_cap, v_cap)
        return float(np.clip(tau, *self.tau_clip))

    def control(self, t, x):
        """(delta, tau_f, tau_r) at time t; tau_f is always zero."""
        cycle_i = int(t // self.cycle)
        tc = t - cycle_i * self.cycle
        mirror = -1.0 if cycle_i % 2 else 1.0
        v_eq = self.eq.v
        beta = x[2]
        if tc < 15.0:
            # slip-ratio program: paired thrust/brake bursts sweep the ratio
            # axis with roughly cancelling speed change, then hard steering
            # sweeps load the front axle past its force peak
            v_cap = 800.0
            if tc < 3.0:
                s_tgt, amp, freq = 0.02, 0.06, 0.3
            elif tc < 4.5:
                s_tgt, amp, freq, v_cap = 0.55, 0.05, 0.25, 0.0
            elif tc < 6.0:
                s_tgt, amp, freq, v_cap = -0.25, 0.05, 0.25, 0.0
            elif tc < 7.5:
                s_tgt, amp, freq, v_cap = 0.42, 0.1, 0.2, 0.0
            elif tc < 9.0:
                s_tgt, amp, freq, v_cap = -0.15, 0.1, 0.2, 0.0
            elif tc < 10.5:
                s_tgt, amp, freq = 0.12, 0.35, 0.25
            elif tc < 12.0:
                s_tgt, amp, freq = -0.05, 0.45, 0.35
            else:
                # settle toward the drift-entry speed before the hold
                s_tgt = float(np.clip(0.08 * (v_eq - x[1]), -0.12, 0.12))
                amp, freq = 0.03, 0.3
            delta = amp * np.sin(2 * np.pi * freq * t) + 1.1 * beta
            tau = self._servo(x, s_tgt, v_eq, v_cap)
        elif tc < 27.0:
            eq = self.eq
            ramp = min(1.0, (tc - 15.0) / 3.0)
            x4 = np.array([x[0], x[1], x[2], x[4]])
            x_t = np.array([
                mirror * ramp * eq.r,
                eq.v,
                mirror * ramp * eq.beta,
                (1.0 + ramp * eq.sigma) * x[1] * np.cos(x[2]) / self.params.r_w,
            ])
            u_t = np.array([mirror * ramp * eq.delta, ramp * eq.tau])
            kmat = self.gains
            if mirror < 0:
                # mirrored equilibrium: r, beta, delta change sign; V, omega,
                # tau do not, so the gain matrix flips sign per signed row/col
                kmat = kmat * np.outer([-1.0, 1.0], [-1.0, 1.0, -1.0, 1.0])
            err = x4 - x_t
            # saturate errors so a poor entry state funnels in instead of
            # railing the steering
            err[0] = np.clip(err[0], -0.5, 0.5)
            err[1] = np.clip(err[1], -2.0, 2.0)
            err[2] = np.clip(err[2], -0.4, 0.4)
            err[3] = np.clip(err[3], -15.0, 15.0)
            du = -kmat @ err
            delta = u_t[0] + du[0]
            tau = float(np.clip(u_t[1] + du[1], *self.tau_clip))
        else:
            delta = 1.1 * beta
            tau = self._servo(x, 0.0, v_eq)
        return float(np.clip(delta, -self.steer_clip, self.steer_clip)), 0.0, tau


def _find_drift_point(tire, params, v_nominal):
    """Drift equilibrium near the friction limit; scans lateral-g fractions."""
    limit = 2.0 * tire.rear_peak / params.m
    last_err = None
    for frac in (0.85, 0.80, 0.90, 0.75):
        kappa = frac * limit / v_nominal ** 2
        try:
            return drift_equilibrium(kappa, v_nominal, tire, params)
        except NoConvergence as err:
            last_err = err
    raise NoConvergence(f"no drift excitation point found: {last_err}")


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    """Per-channel sensor noise (standard deviations)."""

    sigma_r: float = 0.0
    sigma_v: float = 0.0
    sigma_beta: float = 0.0

    @property
    def any(self):
        return self.sigma_r > 0 or self.sigma_v > 0 or self.sigma_beta > 0


def generate_dataset(tire: PlantTire, params: VehicleParams, duration: float,
                     rng, log_hz: float = 100.0, sim_dt: float = 0.005,
                     noise: NoiseSpec = None, smooth_window: int = 5,
                     v0: float = 11.0):
    """Drive the plant with the excitation program and log the dataset.

    Returns a dict of column name -> array with round(duration*log_hz) rows.
    """
    noise = noise or NoiseSpec()
    stride = int(round(1.0 / (log_hz * sim_dt)))
    if abs(stride * log_hz * sim_dt - 1.0) > 1e-9:
        raise DimensionMismatch(
            f"log rate {log_hz} Hz is not a multiple of the sim rate {1 / sim_dt}"
        )
    n_rows = int(round(duration * log_hz))
    exc = Excitation(tire=tire, params=params, v_nominal=v0)
    x = np.array([0.0, v0, 0.0, v0 / params.r_w, v0 / params.r_w,
                  0.0, 0.0, 0.0])
    log_x = np.zeros((n_rows, 5))
    log_u = np.zeros((n_rows, 2))
    log_d = np.zeros((n_rows, 3))
    for i in range(n_rows):
        t = i * stride * sim_dt
        u = exc.control(t, x)
        log_x[i] = x[:5]
        log_u[i] = (u[0], u[2])
        log_d[i] = plant_deriv(x, u, tire, params)[:3]
        for k in range(stride):
            tk = t + k * sim_dt
            u = exc.control(tk, x)
            x = rk4_step(lambda xx, tt: plant_deriv(xx, (u[0], 0.0, u[2]),
                                                    tire, params), x, sim_dt, tk)
        if not np.all(np.isfinite(x)) or x[1] < 1.0:
            raise NonFiniteState(
                f"plant left the valid envelope at t={t:.2f}s (V={x[1]:.2f})"
            )

    t_col = np.arange(n_rows) / log_hz
    r_m = log_x[:, 0] + noise.sigma_r * rng.standard_normal(n_rows)
    v_m = log_x[:, 1] + noise.sigma_v * rng.standard_normal(n_rows)
    b_m = log_x[:, 2] + noise.sigma_beta * rng.standard_normal(n_rows)
    if noise.any:
        rdot = differentiate_trace(t_col, r_m, smooth_window)
        vdot = differentiate_trace(t_col, v_m, smooth_window)
        bdot = differentiate_trace(t_col, b_m, smooth_window)
    else:
        rdot, vdot, bdot = log_d[:, 0], log_d[:, 1], log_d[:, 2]
    fyf, fxr, fyr = estimate_forces(r_m, v_m, b_m, rdot, vdot, bdot,
                                    log_u[:, 0], params)
    af, ar, sf, sr, _, _ = slip_core(r_m, v_m, b_m, log_x[:, 3], log_x[:, 4],
                                     log_u[:, 0], params)
    data = {
        "t": t_col,
        "r": r_m,
        "V": v_m,
        "beta": b_m,
        "omega_f": log_x[:, 3],
        "omega_r": log_x[:, 4],
        "delta": log_u[:, 0],
        "tau_f": np.zeros(n_rows),
        "tau_r": log_u[:, 1],
        "alpha_f": af,
        "alpha_r": ar,
        "sigma_f": sf,
        "sigma_r": sr,
        "fxf": np.zeros(n_rows),
        "fyf": fyf,
        "fxr": fxr,
        "fyr": fyr,
        "mu_fz_bar": np.full(n_rows, params.mu_fz_bar),
    }
    return data


def dataset_coverage(data):
    """Slip/state ranges actually visited; used for reporting and probes."""
    return {
        k: (float(np.min(data[k])), float(np.max(data[k])))
        for k in ("alpha_f", "alpha_r", "sigma_r", "r", "V", "beta")
    }


# ---------------------------------------------------------------------------
# CSV round-trip and splitting
# ---------------------------------------------------------------------------


def write_dataset_csv(path, data):
    cols = [np.asarray(data[k], dtype=float) for k in DATASET_COLUMNS]
    n = cols[0].shape[0]
    if any(c.shape != (n,) for c in cols):
        raise DimensionMismatch("dataset columns have unequal lengths")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_COLUMNS)
        for i in range(n):
            writer.writerow([f"{c[i]:.10g}" for c in cols])


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != DATASET_COLUMNS:
            raise DimensionMismatch(
                f"{path}: unexpected dataset header {header[:4]}..."
            )
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        raise DimensionMismatch(f"{path}: empty dataset")
    return {k: arr[:, j].copy() for j, k in enumerate(DATASET_COLUMNS)}


def split_dataset(data, train_frac: float = 0.8, n_blocks: int = 10):
    """Contiguous-block split: every k-th temporal block is held out.

    k = round(1/(1-train_frac)); blocks are equal length (the remainder goes
    to the last block).  Returns (train, test) dicts of column arrays.
    """
    if not 0.0 < train_frac < 1.0:
        raise DimensionMismatch(f"train_frac must be in (0,1), got {train_frac}")
    n = len(data["t"])
    stride = int(round(1.0 / (1.0 - train_frac)))
    edges = np.linspace(0, n, n_blocks + 1).astype(int)
    test_mask = np.zeros(n, dtype=bool)
    for i in range(n_blocks):
        if i % stride == stride - 1:
            test_mask[edges[i]:edges[i + 1]] = True
    train = {k: v[~test_mask] for k, v in data.items()}
    test = {k: v[test_mask] for k, v in data.items()}
    return train, test