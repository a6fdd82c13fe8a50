"""Closed-loop runs: ground-truth plant, tracking controller, logging.

One run steps the controller at its own rate and integrates the plant at a
finer dt between control updates, with the path curvature sampled at the
plant's own arc position (the path states are meaningless without it).
Measurements add zero-mean gaussian noise to (r, V, beta); the remaining
channels pass through.  Each control row logs two force views: what the
controller's tire model predicts for the applied control at the measured
state (commanded) and what the plant actually produced (achieved) - their
gap is the model mismatch the closed loop has to absorb.

A run ends at the configured duration, when the car reaches the end of the
course, or early when |e| exceeds e_abort.  Aborts are recorded outcomes
with their s position, not errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PlantTire, plant_deriv
from .errors import ConfigError, DimensionMismatch
from .nmpc import ControllerTire, NmpcConfig, NmpcController
from .tires import feat_for_channel
from .vehicle import PathReference, VehicleParams, rk4_step, slip_core

RUNLOG_COLUMNS = (
    "t", "r", "V", "beta", "omega_f", "omega_r", "s", "e", "dphi",
    "delta", "tau_r", "beta_ref", "v_ref", "e_beta",
    "fxf_cmd", "fyf_cmd", "fxr_cmd", "fyr_cmd",
    "fxf_ach", "fyf_ach", "fxr_ach", "fyr_ach",
    "iterations", "converged", "cost",
)


@dataclass
class Scenario:
    """Everything one closed-loop run needs.

    duration=None runs long enough to cover the course at the slowest
    reference speed plus half again; x0=None starts on-path at s0 with the
    straight-running state (wheels rolling at v_ref(s0)).
    """

    ref: PathReference
    plant: PlantTire
    tire: ControllerTire
    params: VehicleParams
    cfg: NmpcConfig = field(default_factory=NmpcConfig)
    sigma_r: float = 0.005
    sigma_v: float = 0.05
    sigma_beta: float = 0.002
    sim_dt: float = 0.005
    duration: float = None
    e_abort: float = 8.0
    s0: float = 0.0
    x0: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        if min(self.sigma_r, self.sigma_v, self.sigma_beta) < 0.0:
            raise ConfigError("sensor noise sigma must be >= 0")
        if self.sim_dt <= 0.0 or self.sim_dt > self.cfg.dt:
            raise ConfigError(
                f"sim_dt {self.sim_dt} must be in (0, controller dt {self.cfg.dt}]"
            )
        n_sub = round(self.cfg.dt / self.sim_dt)
        if abs(n_sub * self.sim_dt - self.cfg.dt) > 1e-9:
            raise ConfigError(
                f"controller dt {self.cfg.dt} is not a multiple of sim_dt {self.sim_dt}"
            )
        if self.duration is not None and self.duration <= 0.0:
            raise ConfigError("duration must be positive")
        if self.e_abort <= 0.0:
            raise ConfigError("e_abort must be positive")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)
            if self.x0.shape != (8,):
                raise DimensionMismatch(f"x0 shape {self.x0.shape} != (8,)")


@dataclass
class RunLog:
    """Per-control-step time series of one closed-loop run.

    x holds the true plant state at the start of each step; u the applied
    (delta, tau_r); f_cmd/f_ach the (fxf, fyf, fxr, fyr) force views.  The
    RMS summary fields are the root-mean-square of the logged e and
    beta - beta_ref series.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    beta_ref: np.ndarray
    v_ref: np.ndarray
    e_beta: np.ndarray
    f_cmd: np.ndarray
    f_ach: np.ndarray
    iterations: np.ndarray
    solve_time: np.ndarray
    converged: np.ndarray
    cost: np.ndarray
    aborted: bool
    abort_s: float
    reason: str
    rms_e: float
    rms_e_beta: float
    name: str = ""

    @property
    def n_steps(self) -> int:
        return self.t.shape[0]


def _model_forces(x, u, tire: ControllerTire, params):
    """Controller-model axle forces at a state/control pair."""
    af, ar, sf, sr, _, _ = slip_core(x[0], x[1], x[2], x[3], x[4], u[0], params)
    mu = tire.mu_fz_bar
    fxf, fyf = tire.front.forces(
        af, sf, feat_for_channel(tire.front.channel, x[0], x[1], x[2], mu)
    )
    fxr, fyr = tire.rear.forces(
        ar, sr, feat_for_channel(tire.rear.channel, x[0], x[1], x[2], mu)
    )
    return float(fxf), float(fyf), float(fxr), float(fyr)


def _plant_forces(x, u, plant: PlantTire, params):
    """Ground-truth axle forces; the front axle free-rolls (no drive force)."""
    af, ar, _, sr, _, _ = slip_core(x[0], x[1], x[2], x[3], x[4], u[0], params)
    _, fyf = plant.front.forces(af, 0.0)
    fxr, fyr = plant.rear.forces(ar, sr)
    return 0.0, float(fyf), float(fxr), float(fyr)


def simulate_closedloop(scn: Scenario, rng=None) -> RunLog:
    """Run one scenario; rng drives the sensor noise (default: seeded 0)."""
    if rng is None:
        rng = np.random.default_rng(0)
    ref, params, cfg = scn.ref, scn.params, scn.cfg
    n_sub = round(cfg.dt / scn.sim_dt)
    if scn.x0 is not None:
        x = scn.x0.copy()
    else:
        v0 = float(ref.v_at(scn.s0))
        x = np.array([0.0, v0, 0.0, v0 / params.r_w, v0 / params.r_w,
                      scn.s0, 0.0, 0.0])
    if scn.duration is not None:
        duration = scn.duration
    else:
        duration = 1.5 * (ref.length - scn.s0) / float(np.min(ref.v_ref))
    n_max = int(np.ceil(duration / cfg.dt))

    mpc = NmpcController(ref, scn.tire, cfg, params)
    sig = np.array([scn.sigma_r, scn.sigma_v, scn.sigma_beta])

    rows_t, rows_x, rows_u = [], [], []
    rows_bref, rows_vref = [], []
    rows_fc, rows_fa = [], []
    rows_it, rows_st, rows_cv, rows_cost = [], [], [], []
    aborted = False
    abort_s = np.nan
    reason = ""

    def deriv(xx, tt):
        return plant_deriv(xx, u3, scn.plant, params,
                           kappa=float(ref.kappa_at(xx[5])))

    t = 0.0
    for _ in range(n_max):
        if not np.all(np.isfinite(x)) or x[1] < 0.5:
            aborted = True
            abort_s = float(x[5]) if np.isfinite(x[5]) else abort_s
            reason = "state left the model's domain"
            break
        x_meas = x.copy()
        x_meas[:3] += sig * rng.standard_normal(3)
        ctrl, stats = mpc.step(x_meas)
        u3 = np.array([ctrl.delta, 0.0, ctrl.tau_r])

        rows_t.append(t)
        rows_x.append(x.copy())
        rows_u.append((ctrl.delta, ctrl.tau_r))
        bref = float(ref.beta_at(x[5]))
        rows_bref.append(bref)
        rows_vref.append(float(ref.v_at(x[5])))
        rows_fc.append(_model_forces(x_meas, u3, scn.tire, params))
        rows_fa.append(_plant_forces(x, u3, scn.plant, params))
        rows_it.append(stats.iterations)
        rows_st.append(stats.solve_time)
        rows_cv.append(stats.converged)
        rows_cost.append(stats.cost)

        for _ in range(n_sub):
            x = rk4_step(deriv, x, scn.sim_dt)
        t += cfg.dt
        if np.isfinite(x[6]) and abs(x[6]) > scn.e_abort:
            aborted = True
            abort_s = float(x[5])
            reason = "lateral error exceeded e_abort"
            break
        if x[5] >= ref.length - 1.0:
            break

    xs = np.array(rows_x) if rows_x else np.zeros((0, 8))
    ebeta = (xs[:, 2] - np.array(rows_bref)) if rows_x else np.zeros(0)
    return RunLog(
        t=np.array(rows_t),
        x=xs,
        u=np.array(rows_u) if rows_u else np.zeros((0, 2)),
        beta_ref=np.array(rows_bref),
        v_ref=np.array(rows_vref),
        e_beta=ebeta,
        f_cmd=np.array(rows_fc) if rows_fc else np.zeros((0, 4)),
        f_ach=np.array(rows_fa) if rows_fa else np.zeros((0, 4)),
        iterations=np.array(rows_it, dtype=int),
        solve_time=np.array(rows_st),
        converged=np.array(rows_cv, dtype=bool),
        cost=np.array(rows_cost),
        aborted=aborted,
        abort_s=abort_s,
        reason=reason,
        rms_e=float(np.sqrt(np.mean(xs[:, 6] ** 2))) if rows_x else np.nan,
        rms_e_beta=float(np.sqrt(np.mean(ebeta ** 2))) if rows_x else np.nan,
        name=scn.name,
    )


def run_scenarios(scenarios, seed=0):
    """Run a scenario list, each with an independent child RNG of one seed."""
    children = np.random.SeedSequence(seed).spawn(len(scenarios))
    return [
        simulate_closedloop(scn, np.random.default_rng(child))
        for scn, child in zip(scenarios, children)
    ]


def transition_mask(ref: PathReference, s) -> np.ndarray:
    """True where the reference sideslip is actively slewing.

    Slewing means |d beta_ref/ds| at or above half its course-wide maximum:
    the corner entries and exits, where the controller has to move the car
    between the grip and drift branches.  A reference with constant beta_ref
    has no transitions.
    """
    dbeta = np.gradient(ref.beta_ref, ref.s)
    peak = float(np.max(np.abs(dbeta)))
    if peak <= 0.0:
        return np.zeros(np.shape(s), dtype=bool)
    on_grid = (np.abs(dbeta) >= 0.5 * peak).astype(float)
    return np.interp(np.asarray(s, dtype=float), ref.s, on_grid) > 0.5


def tracking_metrics(log: RunLog, bucket_len: float = 10.0) -> dict:
    """Summary of one run: tracking RMS, steering activity, solver load.

    Solver load (iteration counts and solve times) is reported overall and
    per s-bucket of the given length, so transitional stretches of the
    course can be compared against steady ones.
    """
    if log.n_steps == 0:
        raise DimensionMismatch("empty run log")
    e = log.x[:, 6]
    ddelta = np.abs(np.diff(log.u[:, 0]))
    s = log.x[:, 5]
    s_lo = np.floor(s.min() / bucket_len) * bucket_len
    edges = np.arange(s_lo, s.max() + bucket_len, bucket_len)
    buckets = []
    for lo in edges:
        m = (s >= lo) & (s < lo + bucket_len)
        if not np.any(m):
            continue
        buckets.append({
            "s_lo": float(lo),
            "s_hi": float(lo + bucket_len),
            "n": int(np.sum(m)),
            "iters_mean": float(np.mean(log.iterations[m])),
            "iters_max": int(np.max(log.iterations[m])),
            "time_mean": float(np.mean(log.solve_time[m])),
            "time_max": float(np.max(log.solve_time[m])),
        })
    return {
        "name": log.name,
        "n_steps": int(log.n_steps),
        "duration": float(log.t[-1] - log.t[0]) + 0.0,
        "rms_e": float(np.sqrt(np.mean(e ** 2))),
        "rms_e_beta": float(np.sqrt(np.mean(log.e_beta ** 2))),
        "max_abs_e": float(np.max(np.abs(e))),
        "mean_abs_ddelta": float(np.mean(ddelta)) if ddelta.size else 0.0,
        "iters_mean": float(np.mean(log.iterations)),
        "iters_max": int(np.max(log.iterations)),
        "time_mean": float(np.mean(log.solve_time)),
        "time_max": float(np.max(log.solve_time)),
        "aborted": bool(log.aborted),
        "abort_s": float(log.abort_s) if np.isfinite(log.abort_s) else None,
        "reason": log.reason,
        "buckets": buckets,
    }


def runlog_summary(log: RunLog, bucket_len: float = 10.0) -> dict:
    """tracking_metrics with wall-clock fields stripped.

    This is what lands in summary.json; solve times stay in the in-memory
    log and the timing sidecar so reruns of one config byte-match.
    """
    m = tracking_metrics(log, bucket_len)
    m.pop("time_mean")
    m.pop("time_max")
    m["buckets"] = [
        {k: v for k, v in b.items() if not k.startswith("time_")}
        for b in m["buckets"]
    ]
    return m


def write_runlog_csv(log: RunLog, path):
    """One row per control step; columns per RUNLOG_COLUMNS, no times."""
    cols = np.column_stack([
        log.t,
        log.x,
        log.u,
        log.beta_ref,
        log.v_ref,
        log.e_beta,
        log.f_cmd,
        log.f_ach,
        log.iterations.astype(float),
        log.converged.astype(float),
        log.cost,
    ])
    if cols.shape[1] != len(RUNLOG_COLUMNS):
        raise DimensionMismatch(
            f"run log has {cols.shape[1]} columns, expected {len(RUNLOG_COLUMNS)}"
        )
    with open(path, "w") as fh:
        fh.write(",".join(RUNLOG_COLUMNS) + "\n")
        for row in cols:
            fh.write(",".join(format(v, ".10g") for v in row) + "\n")


def write_timing_csv(log: RunLog, path):
    """Wall-clock sidecar: per-step solve time (not byte-stable on rerun)."""
    with open(path, "w") as fh:
        fh.write("t,iterations,solve_time\n")
        for t, it, st in zip(log.t, log.iterations, log.solve_time):
            fh.write(f"{t:.10g},{it:d},{st:.6e}\n")
