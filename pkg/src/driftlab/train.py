"""Training losses, loops, and evaluation reports for the tire models.

Losses are kept in raw force units (N^2) exactly as defined; Adam normalizes
per-parameter step sizes, so the absolute scale does not affect the updates.
The friction term differs by family: the curve-as-ODE models pay a one-sided
quadratic whenever |F| exceeds the nominal budget mu_fz_bar at a data point,
while the closed-form ExpTanh models anchor their analytic extrema to the
budget (both extrema for pure slip, the positive one for combined).

Minibatch gradients run on the tape with one leaf per parameter block;
evaluation and reporting use the plain ndarray paths.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import split_dataset
from .errors import ConfigError, DivergedTraining, NonFiniteLoss
from .nets import adam_init, adam_step
from .node import node_combined_init, node_pure_init
from .tires import (
    CH_FRONT_LAT,
    CH_REAR_COMB,
    CH_REAR_LONG,
    FialaAxle,
    FialaAxleParams,
    MagicFormulaParams,
    _exptanh_extrema_clamped,
    exptanh_combined_init,
    exptanh_eval,
    exptanh_pure_init,
    feat_matrix,
    feat_names,
    set_block_norm,
)
from .vehicle import combined_slip


@dataclass
class TrainConfig:
    lam: float = 0.01
    mu_fz_bar: float = 7000.0
    epochs: int = 400
    batch: int = 2048
    seed: int = 0
    split: float = 0.8
    lr0: float = 1e-2
    lr_decay: float = 0.008
    channel: str = ""  # empty -> family default (front pure, rear combined)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"friction-penalty weight must be >= 0, got {self.lam}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split fraction must be in (0,1), got {self.split}")
        if self.mu_fz_bar <= 0:
            raise ConfigError(f"mu_fz_bar must be positive, got {self.mu_fz_bar}")


def channel_batch(data, channel):
    """Slip/force/feature arrays of one axle channel from a dataset dict."""
    feat = feat_matrix(channel, data["r"], data["V"], data["beta"],
                       data["mu_fz_bar"])
    if channel == CH_FRONT_LAT:
        return {
            "alpha": data["alpha_f"], "sigma": data["sigma_f"],
            "fx": data["fxf"], "fy": data["fyf"],
            "feat": feat, "mu": data["mu_fz_bar"],
        }
    return {
        "alpha": data["alpha_r"], "sigma": data["sigma_r"],
        "fx": data["fxr"], "fy": data["fyr"],
        "feat": feat, "mu": data["mu_fz_bar"],
    }


def _feat_input(feat, theta):
    """Feature argument for a model call: taped thetas need column lists."""
    if theta is None or isinstance(theta, np.ndarray):
        return feat
    return [feat[:, i] for i in range(feat.shape[1])]


def _finite_or_raise(loss):
    lv = float(ad.value_of(loss))
    if not np.isfinite(lv):
        raise NonFiniteLoss(f"loss evaluated to {lv}")
    return lv


def loss_pure(model, batch, cfg: TrainConfig, theta=None):
    """Mean squared force error plus the friction-budget term (pure slip)."""
    th = model.theta if theta is None else theta
    feat_in = _feat_input(batch["feat"], th)
    fx_p, fy_p = model.forces(batch["alpha"], batch["sigma"], feat_in, th)
    if model.channel == CH_FRONT_LAT:
        pred, tgt = fy_p, batch["fy"]
    else:
        pred, tgt = fx_p, batch["fx"]
    err = pred - tgt
    mu = batch["mu"]
    if model.kind == "exptanh_pure":
        a = model.coeffs(feat_in, th)
        zm, zp = _exptanh_extrema_clamped(a[2], a[3], a[4])
        f_lo = exptanh_eval(zm, a) * model.force_scale
        f_hi = exptanh_eval(zp, a) * model.force_scale
        pen = 0.5 * ((mu - ad.absval(f_lo)) * (mu - ad.absval(f_lo))
                     + (mu - ad.absval(f_hi)) * (mu - ad.absval(f_hi)))
    else:
        slack = ad.minimum(mu - ad.absval(pred), 0.0)
        pen = slack * slack
    loss = ad.amean(err * err + cfg.lam * pen)
    _finite_or_raise(loss)
    return loss


def loss_combined(model, batch, cfg: TrainConfig, theta=None):
    """Total-force, per-component, and friction terms for combined slip."""
    th = model.theta if theta is None else theta
    feat_in = _feat_input(batch["feat"], th)
    alpha, sigma = batch["alpha"], batch["sigma"]
    kappa = combined_slip(alpha, sigma)
    ftot_p = model.total_force(kappa, feat_in, th)
    s1, s2 = model.split(alpha, sigma, th)
    nrm = ad.sqrt(ad.maximum(s1 * s1 + s2 * s2, 1e-24))
    fy_p = ftot_p * s1 / nrm
    fx_p = ftot_p * s2 / nrm
    ftot_bar = np.sqrt(batch["fx"] ** 2 + batch["fy"] ** 2)
    e_tot = ftot_p - ftot_bar
    e_y = fy_p - batch["fy"]
    e_x = fx_p - batch["fx"]
    mu = batch["mu"]
    if model.kind == "exptanh_combined":
        a = model.coeffs(feat_in, th)
        _, zp = _exptanh_extrema_clamped(a[2], a[3], a[4])
        gap = mu - exptanh_eval(zp, a) * model.force_scale
        pen = gap * gap
    else:
        slack = ad.minimum(mu - ftot_p, 0.0)
        pen = slack * slack
    loss = ad.amean(e_tot * e_tot + e_y * e_y + e_x * e_x + cfg.lam * pen)
    _finite_or_raise(loss)
    return loss


_FAMILIES = {
    "exptanh_pure": (exptanh_pure_init, loss_pure, CH_FRONT_LAT),
    "node_pure": (node_pure_init, loss_pure, CH_FRONT_LAT),
    "exptanh_combined": (exptanh_combined_init, loss_combined, CH_REAR_COMB),
    "node_combined": (node_combined_init, loss_combined, CH_REAR_COMB),
}


def loss_for_kind(kind):
    if kind not in _FAMILIES:
        raise ConfigError(f"unknown trainable model kind {kind!r}")
    return _FAMILIES[kind][1]


def model_rmse(model, batch):
    """Per-channel force RMSE (N) of a model on a channel batch."""
    pred = model.forces(batch["alpha"], batch["sigma"], batch["feat"])
    out = {}
    if model.channel == CH_FRONT_LAT:
        out["fy"] = float(np.sqrt(np.mean((pred[1] - batch["fy"]) ** 2)))
    elif model.channel == CH_REAR_LONG:
        out["fx"] = float(np.sqrt(np.mean((pred[0] - batch["fx"]) ** 2)))
    else:
        out["fx"] = float(np.sqrt(np.mean((pred[0] - batch["fx"]) ** 2)))
        out["fy"] = float(np.sqrt(np.mean((pred[1] - batch["fy"]) ** 2)))
    return out


def _pooled_rmse(rmse_dict):
    return float(np.sqrt(np.mean([v ** 2 for v in rmse_dict.values()])))


def train_model(kind, dataset, cfg: TrainConfig):
    """Train one learned tire model on a dataset dict.

    Returns (model, report) where report carries the sampled loss history
    (one entry per epoch) and final train/test RMSE.  Deterministic for a
    fixed config.
    """
    if kind not in _FAMILIES:
        raise ConfigError(f"unknown trainable model kind {kind!r}")
    init_fn, loss_fn, default_ch = _FAMILIES[kind]
    channel = cfg.channel or default_ch
    rng = np.random.default_rng(cfg.seed)
    model = init_fn(channel, rng, force_scale=cfg.mu_fz_bar)

    train, test = split_dataset(dataset, cfg.split)
    tb = channel_batch(train, channel)
    eb = channel_batch(test, channel)
    fmean = tb["feat"].mean(axis=0)
    fstd = tb["feat"].std(axis=0)
    if kind.startswith("exptanh"):
        set_block_norm(model, "coeff", fmean, fstd)
        if kind == "exptanh_combined":
            smean = np.array([tb["alpha"].mean(), tb["sigma"].mean()])
            sstd = np.array([tb["alpha"].std(), tb["sigma"].std()])
            set_block_norm(model, "split", smean, sstd)
    else:
        model.set_feat_norm(fmean, fstd)

    n = tb["alpha"].shape[0]
    if n == 0:
        raise ConfigError("training split is empty")
    bs = min(cfg.batch, n)
    steps_per = max(1, n // bs)
    opt = adam_init(model.theta.size, lr0=cfg.lr0, lr_decay=cfg.lr_decay)
    theta = model.theta.copy()
    history = []
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            opt.epoch = epoch
            perm = rng.permutation(n)
            acc = 0.0
            for b in range(steps_per):
                idx = perm[b * bs:(b + 1) * bs]
                mb = {
                    k: (v[idx] if getattr(v, "ndim", 0) == 1 else v[idx, :])
                    for k, v in tb.items()
                }
                with ad.Tape() as tape:
                    tvs = [tape.var(theta[blk.start:blk.stop])
                           for blk in model.blocks]
                    loss = loss_fn(model, mb, cfg, theta=tvs)
                    tape.backward(loss)
                    g = np.concatenate([
                        np.asarray(tv.grad) if tv.grad is not None
                        else np.zeros(tv.value.shape)
                        for tv in tvs
                    ])
                acc += float(ad.value_of(loss))
                theta = adam_step(opt, theta, g)
            history.append(acc / steps_per)
    except NonFiniteLoss as err:
        raise DivergedTraining(
            f"{kind} diverged at epoch {len(history)}: {err}"
        ) from err
    model.theta = theta
    rmse_train = model_rmse(model, tb)
    rmse_test = model_rmse(model, eb)
    report = {
        "kind": kind,
        "channel": channel,
        "epochs": cfg.epochs,
        "loss_history": history,
        "rmse_train": rmse_train,
        "rmse_test": rmse_test,
        "rmse_train_pooled": _pooled_rmse(rmse_train),
        "rmse_test_pooled": _pooled_rmse(rmse_test),
        "train_seconds": time.perf_counter() - t0,
    }
    return model, report


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Error densities of several models on one test batch, shared bins."""

    names: list
    channel: str
    rmse: dict          # name -> {channel: RMSE}
    bin_edges: np.ndarray
    density: dict       # name -> per-bin density (integrates to 1)
    zero_density: dict  # name -> density of the bin containing zero error

    def zero_ratio(self, a, b):
        db = self.zero_density[b]
        if db <= 0:
            return float("inf")
        return self.zero_density[a] / db


def prediction_errors(model, batch):
    """Force prediction errors pooled over the channel's active components."""
    fx_p, fy_p = model.forces(batch["alpha"], batch["sigma"], batch["feat"])
    if model.channel == CH_FRONT_LAT:
        return np.asarray(fy_p - batch["fy"], dtype=float)
    if model.channel == CH_REAR_LONG:
        return np.asarray(fx_p - batch["fx"], dtype=float)
    return np.concatenate([
        np.asarray(fx_p - batch["fx"], dtype=float),
        np.asarray(fy_p - batch["fy"], dtype=float),
    ])


def evaluate(models, batch, names=None, bins=101):
    """Histogram the prediction errors of several models on shared bins.

    Bins span +-3 standard deviations of the errors pooled across all
    models; densities integrate to 1 over that span.
    """
    if names is None:
        names = [getattr(m, "kind", f"model{i}") for i, m in enumerate(models)]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate model names in evaluation: {names}")
    channels = {m.channel for m in models}
    if len(channels) != 1:
        raise ConfigError(f"models span several channels: {sorted(channels)}")
    errs = {nm: prediction_errors(m, batch) for nm, m in zip(names, models)}
    pooled = np.concatenate(list(errs.values()))
    sigma = float(np.std(pooled))
    if sigma <= 0:
        sigma = 1.0
    edges = np.linspace(-3.0 * sigma, 3.0 * sigma, bins + 1)
    zero_bin = int(np.searchsorted(edges, 0.0, side="right") - 1)
    density = {}
    zero_density = {}
    for nm in names:
        hist, _ = np.histogram(errs[nm], bins=edges, density=True)
        density[nm] = hist
        zero_density[nm] = float(hist[zero_bin])
    rmse = {
        nm: model_rmse(m, batch) for nm, m in zip(names, models)
    }
    return EvalReport(
        names=list(names), channel=channels.pop(), rmse=rmse,
        bin_edges=edges, density=density, zero_density=zero_density,
    )


# ---------------------------------------------------------------------------
# state-coupling sweeps
# ---------------------------------------------------------------------------


def sweep_curves(model, feat_grid, slip_grid):
    """Force-vs-slip curves at each feature point.

    feat_grid: (M, n_feat) array of feature vectors; slip_grid: (K,) slips
    (slip angle for pure models, total slip for combined).  Returns a table
    dict with one row per (feature point, slip): the feature columns, slip,
    and force in N.
    """
    feat_grid = np.atleast_2d(np.asarray(feat_grid, dtype=float))
    slip_grid = np.asarray(slip_grid, dtype=float)
    names = feat_names(model.channel)
    if feat_grid.shape[1] != len(names):
        raise ConfigError(
            f"feature grid has {feat_grid.shape[1]} columns, channel "
            f"{model.channel} needs {len(names)}"
        )
    m, k = feat_grid.shape[0], slip_grid.shape[0]
    table = {nm: np.repeat(feat_grid[:, j], k) for j, nm in enumerate(names)}
    table["slip"] = np.tile(slip_grid, m)
    forces = np.empty(m * k)
    for i in range(m):
        feat = np.broadcast_to(feat_grid[i], (k, len(names)))
        if hasattr(model, "total_force"):
            f = model.total_force(slip_grid, feat)
        else:
            fx_p, fy_p = model.forces(
                slip_grid if model.channel != CH_REAR_LONG else 0.0 * slip_grid,
                slip_grid if model.channel == CH_REAR_LONG else 0.0 * slip_grid,
                feat,
            )
            f = fy_p if model.channel == CH_FRONT_LAT else fx_p
        forces[i * k:(i + 1) * k] = np.asarray(f, dtype=float)
    table["force"] = forces
    return table


def fig4_feat_grid(channel, base=None, v_span=(5.0, 20.0), r_span=(-1.8, 1.8),
                   beta_span=(-0.9, 0.9), n=5):
    """One-at-a-time feature sweeps around a base point (state-coupling plots)."""
    names = feat_names(channel)
    if base is None:
        base = {"r": 0.0, "v": 11.0, "beta": 0.0, "mu_fz_bar": 7000.0}
    spans = {"v": v_span, "r": r_span, "beta": beta_span}
    rows = []
    for nm in names:
        if nm not in spans:
            continue
        for val in np.linspace(spans[nm][0], spans[nm][1], n):
            point = dict(base)
            point[nm] = float(val)
            rows.append([point[q] for q in names])
    return np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# physics baselines
# ---------------------------------------------------------------------------


def fiala_matched(mf: MagicFormulaParams, channel, scale=1.0) -> FialaAxle:
    """Brush baseline matched to a Magic Formula curve.

    Matches the zero-slip stiffness (b*c*d) and the friction bound (d);
    scale != 1 deliberately mis-parameterizes both, as when the baseline was
    tuned on a different surface.
    """
    c = mf.b * mf.c * mf.d * scale
    mu = mf.d * scale
    if channel == CH_FRONT_LAT:
        return FialaAxle(params=FialaAxleParams(c_alpha=c, mu_fz=mu),
                         channel=channel)
    return FialaAxle(
        params=FialaAxleParams(c_alpha=c, mu_fz=mu, c_sigma=c),
        channel=channel,
    )