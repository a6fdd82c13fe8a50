"""Tire force curves as learned second-order ODEs in the slip variable.

The pure-slip model treats the force curve F(alpha) as the solution of
F'' = +-exp(NN(z, feat)) where the sign is fixed by which of four regions
alpha falls in; the region boundaries alpha_-1 < alpha_0 < alpha_1 come from
a third net of the features and the +- pattern (+,-,+,-) hard-codes the
S-shape: convex tail, concave rise through the anchor, convex again between
alpha_0 and alpha_1, concave decay.  The combined-slip model does the same
for the total force over kappa with a single concave-to-convex switch at
kappa_1 >= 0, anchored at kappa = 0.  exp keeps each region's curvature sign
strict no matter the weights, so the structure survives random
initialization and every training step.

Integration is fixed-step RK4 unrolled from the anchor with a per-sample
step h = (slip - anchor)/n_steps (negative h runs the same loop backward),
so gradients flow through ordinary reverse-mode backprop.  Steps that
straddle a region boundary are not split.  Forces are learned in normalized
units (force_scale N); region tests compare raw values, never taped ones.

Sign conventions follow the slip kinematics: the pure curve is the lateral
force for the front channel and minus the longitudinal force for the rear
channel, so one decreasing S-shape family covers both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, DistillationStall, DivergedTraining, NonFiniteState
from .nets import adam_init, adam_step, mlp_apply, mlp_init
from .tires import (
    CH_FRONT_LAT,
    CH_REAR_COMB,
    Z_SCALE_COMB,
    Z_SCALE_PURE,
    _blocks,
    _net_eval,
    feat_names,
)

CLAMP_LO = -30.0
CLAMP_HI = 10.0


def _feat_cols(feat, n_feat):
    """Feature argument to a list of per-feature columns/scalars."""
    if isinstance(feat, np.ndarray):
        if feat.ndim == 2:
            if feat.shape[-1] != n_feat:
                raise DimensionMismatch(f"feat has {feat.shape[-1]} columns, expected {n_feat}")
            return [feat[:, j] for j in range(n_feat)]
        if feat.ndim == 1 and feat.shape[0] == n_feat:
            return [float(v) for v in feat]
        raise DimensionMismatch(f"bad feat shape {feat.shape}")
    if len(feat) != n_feat:
        raise DimensionMismatch(f"feat has {len(feat)} entries, expected {n_feat}")
    return list(feat)


def _check_finite(value, what):
    v = np.asarray(ad.value_of(value))
    if not np.all(np.isfinite(v)):
        raise NonFiniteState(f"{what} diverged to non-finite values")


@dataclass
class NodePure:
    """Pure-slip ODE model: nets (nn1, nn2) drive F'', nn3 maps feat to
    (anchor, region widths, initial conditions)."""

    channel: str
    blocks: list
    theta: np.ndarray
    force_scale: float
    n_steps: int = 32
    meta: dict = field(default_factory=dict)

    kind = "node_pure"

    @property
    def n_feat(self):
        return len(feat_names(self.channel))

    def params(self, feat, theta=None):
        """(alpha_-1, alpha_0, alpha_1, F0, G0) at the given features.

        nn3's raw outputs are (alpha_0, g-, g+, F0, G0); the boundaries are
        alpha_0 -+ exp(g-+) so the ordering is strict by construction.
        """
        th = self.theta if theta is None else theta
        cols = _feat_cols(feat, self.n_feat)
        a0, gm, gp, f0, g0 = _net_eval(self.blocks, 2, th, cols)
        return a0 - ad.exp(gm), a0, a0 + ad.exp(gp), f0, g0

    def set_feat_norm(self, mean, std):
        _install_feat_norm(self.blocks, ("nn1", "nn2"), ("nn3",), mean, std)

    def curve(self, slip, feat, theta=None, n_steps=None):
        f, _ = node_solve(self, slip, feat, theta=theta, n_steps=n_steps)
        return f

    def forces(self, alpha, sigma, feat, theta=None):
        if self.channel == CH_FRONT_LAT:
            return 0.0 * alpha, self.curve(alpha, feat, theta) * self.force_scale
        return -self.curve(sigma, feat, theta) * self.force_scale, 0.0 * sigma

    def peak_force(self, feat, slip_span=0.6, n_grid=241):
        grid = np.linspace(-slip_span, slip_span, n_grid)
        cols = [np.full(n_grid, v) for v in _feat_cols(np.asarray(feat, dtype=float), self.n_feat)]
        f, _ = node_solve(self, grid, cols)
        return float(np.max(np.abs(f))) * self.force_scale


@dataclass
class NodeCombined:
    """Combined-slip ODE model for the total force over kappa, plus the
    direction split net nn4(alpha, sigma) -> (s1, s2)."""

    channel: str
    blocks: list
    theta: np.ndarray
    force_scale: float
    n_steps: int = 32
    meta: dict = field(default_factory=dict)

    kind = "node_combined"

    @property
    def n_feat(self):
        return len(feat_names(self.channel))

    def params(self, feat, theta=None):
        """(kappa_1, F0, G0); kappa_1 = exp(raw) >= 0, anchored at kappa=0."""
        th = self.theta if theta is None else theta
        cols = _feat_cols(feat, self.n_feat)
        gk, f0, g0 = _net_eval(self.blocks, 2, th, cols)
        return ad.exp(gk), f0, g0

    def set_feat_norm(self, mean, std):
        _install_feat_norm(self.blocks, ("nn1", "nn2"), ("nn3",), mean, std)

    def split(self, alpha, sigma, theta=None):
        th = self.theta if theta is None else theta
        s1, s2 = _net_eval(self.blocks, 3, th, [alpha, sigma])
        return s1, s2

    def total_force(self, kappa, feat, theta=None, n_steps=None):
        f, _ = node_solve(self, kappa, feat, theta=theta, n_steps=n_steps)
        return f * self.force_scale

    def forces(self, alpha, sigma, feat, theta=None):
        ta = ad.tan(alpha)
        kappa = ad.sqrt(ta * ta + sigma * sigma)
        ftot = self.total_force(kappa, feat, theta)
        s1, s2 = self.split(alpha, sigma, theta)
        nrm = ad.sqrt(ad.maximum(s1 * s1 + s2 * s2, 1e-24))
        return ftot * s2 / nrm, ftot * s1 / nrm

    def peak_force(self, feat, kappa_span=0.9, n_grid=181):
        grid = np.linspace(0.0, kappa_span, n_grid)
        cols = [np.full(n_grid, v) for v in _feat_cols(np.asarray(feat, dtype=float), self.n_feat)]
        f, _ = node_solve(self, grid, cols)
        return float(np.max(np.abs(f))) * self.force_scale


def _install_feat_norm(blocks, z_nets, feat_nets, mean, std):
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    std = np.where(std < 1e-12, 1.0, std)
    nf = mean.shape[0]
    for blk in blocks:
        if blk.name in z_nets:
            blk.in_mean[-nf:] = mean
            blk.in_std[-nf:] = std
        elif blk.name in feat_nets:
            if blk.in_mean.shape != (nf,):
                raise DimensionMismatch("feat normalization shape mismatch")
            blk.in_mean[:] = mean
            blk.in_std[:] = std


def _curvature(model, blocks01_inp, convex, theta):
    """+-exp(clamped NN) with the branch picked by the convex mask."""
    c1 = ad.clip(_net_eval(model.blocks, 0, theta, blocks01_inp)[0], CLAMP_LO, CLAMP_HI)
    c2 = ad.clip(_net_eval(model.blocks, 1, theta, blocks01_inp)[0], CLAMP_LO, CLAMP_HI)
    return ad.where(convex, ad.exp(c1), -ad.exp(c2))


def node_rhs_pure(model, alpha, f, g, inflections, feat_cols, theta=None):
    """(dF, dG) of the pure ODE at one slip: dF = G, dG = +-exp(NN).

    Convex regions {alpha <= alpha_-1} and [alpha_0, alpha_1] use +exp(nn1),
    the rest -exp(nn2).  Net outputs clamp to [-30, 10] before exp.
    """
    a_m, a0, a_p = inflections
    th = model.theta if theta is None else theta
    inp = [alpha, f, g, a_m, a0, a_p] + list(feat_cols)
    av = ad.value_of(alpha)
    convex = (av <= ad.value_of(a_m)) | (
        (av >= ad.value_of(a0)) & (av <= ad.value_of(a_p))
    )
    return g, _curvature(model, inp, convex, th)


def node_rhs_combined(model, kappa, f, g, kappa_1, feat_cols, theta=None):
    """(dF, dG) of the combined ODE: concave rise up to kappa_1, convex after."""
    th = model.theta if theta is None else theta
    inp = [kappa, f, g, kappa_1] + list(feat_cols)
    convex = ad.value_of(kappa) > ad.value_of(kappa_1)
    return g, _curvature(model, inp, convex, th)


def node_solve(model, slip, feat, theta=None, n_steps=None):
    """Integrate the model's ODE from its anchor to slip; returns (F, G).

    slip may be a scalar, an array of per-sample targets, or a Var; a whole
    batch integrates in one unrolled fixed-step RK4 loop with per-sample
    (signed) steps.  The path from the anchor crosses at most one region
    boundary; steps are aligned to it and the curvature branch is chosen per
    segment, so no step integrates across the sign switch.  An unsplit
    boundary step carries a first-order error in the boundary jump of F''
    (which is what finite steps would otherwise leave behind); alignment
    keeps the integration error at the smooth RK4 order instead.  Raises
    NonFiniteState if the trajectory diverges.
    """
    th = model.theta if theta is None else theta
    n = model.n_steps if n_steps is None else int(n_steps)
    cols = _feat_cols(feat, model.n_feat)
    if model.kind == "node_pure":
        a_m, a0, a_p, f, g = model.params(cols, theta=th)
        anchor = a0
        # clamp the target into the anchor's region to get the boundary point
        cut = ad.minimum(ad.maximum(slip, a_m), a_p)
        inp_extra = [a_m, a0, a_p]
        # segment 1 runs right of the anchor in [alpha_0, alpha_1] (convex)
        # or left of it in (alpha_-1, alpha_0) (concave); segment 2 exists
        # only past a boundary: convex below alpha_-1, concave above alpha_1
        conv1 = ad.value_of(cut) >= ad.value_of(anchor)
        conv2 = ad.value_of(slip) < ad.value_of(anchor)
    else:
        k1b, f, g = model.params(cols, theta=th)
        anchor = 0.0
        cut = ad.minimum(slip, k1b)
        inp_extra = [k1b]
        conv1 = False if np.ndim(ad.value_of(slip)) == 0 else np.zeros(
            np.shape(ad.value_of(slip)), dtype=bool)
        conv2 = ~conv1 if isinstance(conv1, np.ndarray) else True

    slip_v = np.asarray(ad.value_of(slip), dtype=float)
    cut_v = np.asarray(ad.value_of(cut), dtype=float)
    anchor_v = np.asarray(ad.value_of(anchor), dtype=float)
    span = slip_v - anchor_v
    crossing = cut_v != slip_v
    ratio = np.divide(cut_v - anchor_v, span,
                      out=np.ones_like(span), where=np.abs(span) > 0)
    n1 = np.where(crossing,
                  np.clip(np.rint(n * ratio), 1, n - 1), n).astype(int)
    n2 = n - n1
    inv1 = 1.0 / np.maximum(n1, 1)
    inv2 = np.where(n2 > 0, 1.0 / np.maximum(n2, 1), 0.0)
    if slip_v.ndim == 0:
        n1 = int(n1)
        inv1 = float(inv1)
        inv2 = float(inv2)
    h1 = (cut - anchor) * inv1
    h2 = (slip - cut) * inv2

    def rhs(x, yf, yg, convex):
        inp = [x, yf, yg] + inp_extra + cols
        return yg, _curvature(model, inp, convex, th)

    for k in range(n):
        mask = k < n1
        h = ad.where(mask, h1, h2)
        x0 = ad.where(mask, anchor + h1 * float(k), cut + h2 * (float(k) - n1))
        convex = np.where(mask, conv1, conv2) if isinstance(mask, np.ndarray) \
            else (conv1 if mask else conv2)
        xh = x0 + 0.5 * h
        x1 = x0 + h
        k1f, k1g = rhs(x0, f, g, convex)
        k2f, k2g = rhs(xh, f + 0.5 * h * k1f, g + 0.5 * h * k1g, convex)
        k3f, k3g = rhs(xh, f + 0.5 * h * k2f, g + 0.5 * h * k2g, convex)
        k4f, k4g = rhs(x1, f + h * k3f, g + h * k3g, convex)
        f = f + (h / 6.0) * (k1f + 2.0 * k2f + 2.0 * k3f + k4f)
        g = g + (h / 6.0) * (k1g + 2.0 * k2g + 2.0 * k3g + k4g)
    _check_finite(f, "node_solve trajectory")
    return f, g


def node_pure_force(model, alpha, feat, theta=None):
    """Solved curve in Newtons (lateral force for the front channel)."""
    f, _ = node_solve(model, alpha, feat, theta=theta)
    return f * model.force_scale


def node_combined_forces(model, alpha, sigma, feat, theta=None):
    return model.forces(alpha, sigma, feat, theta=theta)


# Output-bias priors: F'' magnitudes near exp(0) = 1 normalized force per
# rad^2 (about 7 kN/rad^2), initial slope near -+10 normalized force per rad,
# region half-width near 0.15 rad.  Training raises curvature as the data
# demands; starting mild keeps the fixed-step integration error orders of
# magnitude below the fine-step reference for random draws.
def node_pure_init(channel, rng, force_scale=7000.0, n_steps=32,
                   hidden=(16, 16), nn3_hidden=(4, 4)):
    n_feat = len(feat_names(channel))
    n_in = 6 + n_feat
    blocks, _ = _blocks([
        ("nn1", (n_in, *hidden, 1)),
        ("nn2", (n_in, *hidden, 1)),
        ("nn3", (n_feat, *nn3_hidden, 5)),
    ])
    for blk in blocks[:2]:
        blk.in_std[:6] = Z_SCALE_PURE
    theta = np.concatenate([
        mlp_init(blocks[0].sizes, rng),
        mlp_init(blocks[1].sizes, rng),
        mlp_init(blocks[2].sizes, rng,
                 out_bias=np.array([0.0, np.log(0.15), np.log(0.15), 0.0, -10.0])),
    ])
    return NodePure(channel=channel, blocks=blocks, theta=theta,
                    force_scale=force_scale, n_steps=n_steps)


def node_combined_init(channel, rng, force_scale=7000.0, n_steps=32,
                       hidden=(16, 16), nn3_hidden=(4, 4), split_hidden=(16, 16)):
    n_feat = len(feat_names(channel))
    n_in = 4 + n_feat
    blocks, _ = _blocks([
        ("nn1", (n_in, *hidden, 1)),
        ("nn2", (n_in, *hidden, 1)),
        ("nn3", (n_feat, *nn3_hidden, 3)),
        ("nn4", (2, *split_hidden, 2)),
    ])
    for blk in blocks[:2]:
        blk.in_std[:4] = Z_SCALE_COMB
    blocks[3].in_std[:] = np.array([0.3, 0.3])
    theta = np.concatenate([
        mlp_init(blocks[0].sizes, rng),
        mlp_init(blocks[1].sizes, rng),
        mlp_init(blocks[2].sizes, rng,
                 out_bias=np.array([np.log(0.15), 0.0, 10.0])),
        mlp_init(blocks[3].sizes, rng),
    ])
    return NodeCombined(channel=channel, blocks=blocks, theta=theta,
                        force_scale=force_scale, n_steps=n_steps)


def model_fingerprint(model):
    """Short content hash of a model's kind, channel, and parameters."""
    h = hashlib.sha256()
    h.update(model.kind.encode())
    h.update(model.channel.encode())
    h.update(np.ascontiguousarray(model.theta).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


@dataclass
class DistilledMlp:
    """Plain MLP mimic of a solved ODE model, for cheap evaluation.

    Pure source: input (slip, feat) -> normalized curve value.  Combined
    source: input (alpha, sigma, feat) -> normalized (fx, fy).
    """

    channel: str
    source_kind: str
    source_hash: str
    sizes: tuple
    theta: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: np.ndarray
    force_scale: float
    meta: dict = field(default_factory=dict)

    kind = "distilled_mlp"

    @property
    def n_feat(self):
        return len(feat_names(self.channel))

    def _eval(self, inputs):
        xn = [
            (inputs[i] - self.in_mean[i]) / self.in_std[i]
            for i in range(len(self.in_mean))
        ]
        outs = mlp_apply(self.theta, xn, self.sizes)
        return [outs[j] * self.out_scale[j] for j in range(len(outs))]

    def forces(self, alpha, sigma, feat, theta=None):
        cols = _feat_cols(feat, self.n_feat)
        if self.source_kind == "node_combined":
            fx_n, fy_n = self._eval([alpha, sigma] + cols)
            return fx_n * self.force_scale, fy_n * self.force_scale
        if self.channel == CH_FRONT_LAT:
            out = self._eval([alpha] + cols)[0]
            return 0.0 * alpha, out * self.force_scale
        out = self._eval([sigma] + cols)[0]
        return -out * self.force_scale, 0.0 * sigma

    def curve(self, slip, feat):
        cols = _feat_cols(feat, self.n_feat)
        return self._eval([slip] + cols)[0]


def _probe_box(model, slip_box, feat_box):
    if slip_box is None:
        slip_box = model.meta.get("slip_box")
    if feat_box is None:
        feat_box = model.meta.get("feat_box")
    if slip_box is None or feat_box is None:
        raise DimensionMismatch(
            "distill needs slip/feat ranges: pass slip_box and feat_box or "
            "train the source model first (which records them)"
        )
    slip_box = np.asarray(slip_box, dtype=float)
    feat_box = np.asarray(feat_box, dtype=float)
    # inflate 10% around the midpoint
    def inflate(box):
        mid = 0.5 * (box[0] + box[1])
        half = 0.55 * (box[1] - box[0])
        return np.stack([mid - half, mid + half])
    return inflate(slip_box), inflate(feat_box)


def distill(model, probe_count=8192, rng=None, slip_box=None, feat_box=None,
            feat_sampler=None, hidden=(16, 16), max_steps=6000, lr0=5e-3,
            mse_tol=1e-4):
    """Fit a plain MLP to the solved ODE curves over a probe distribution.

    Probes are uniform over the (slip, feat) box of the source's training
    data inflated by 10%, or drawn from feat_sampler(rng, n) when given.
    Targets are scaled to unit spread per output, and mse_tol is in those
    units (1e-4 is a 1% relative RMSE).  Raises DistillationStall if the
    fit plateaus above mse_tol.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    combined = model.kind == "node_combined"
    slip_b, feat_b = _probe_box(model, slip_box, feat_box)

    n = int(probe_count)
    if feat_sampler is not None:
        feats = np.asarray(feat_sampler(rng, n), dtype=float)
    else:
        feats = rng.uniform(feat_b[0], feat_b[1], size=(n, feat_b.shape[1]))
    cols = [feats[:, j] for j in range(feats.shape[1])]
    if combined:
        alpha = rng.uniform(slip_b[0, 0], slip_b[1, 0], size=n)
        sigma = rng.uniform(slip_b[0, 1], slip_b[1, 1], size=n)
        fx, fy = model.forces(alpha, sigma, cols)
        targets = np.stack([fx, fy], axis=-1) / model.force_scale
        inputs = [alpha, sigma] + cols
    else:
        slip = rng.uniform(float(slip_b[0]), float(slip_b[1]), size=n)
        targets = (node_pure_force(model, slip, cols) / model.force_scale)[:, None]
        inputs = [slip] + cols
    n_in = len(inputs)
    n_out = targets.shape[1]
    in_mean = np.array([float(np.mean(c)) for c in inputs])
    in_std = np.array([max(float(np.std(c)), 1e-12) for c in inputs])
    xn = [(inputs[i] - in_mean[i]) / in_std[i] for i in range(n_in)]
    out_scale = np.maximum(np.std(targets, axis=0), 1e-9)
    tn = targets / out_scale

    sizes = (n_in, *hidden, n_out)
    theta = mlp_init(sizes, rng)
    opt = adam_init(theta.size, lr0=lr0, lr_decay=0.02)
    check_every = 500
    prev_check = np.inf
    mse = np.inf
    for step in range(max_steps):
        with ad.Tape() as tape:
            tv = tape.var(theta)
            outs = mlp_apply(tv, xn, sizes)
            loss = 0.0
            for j in range(n_out):
                e = outs[j] - tn[:, j]
                loss = loss + ad.amean(e * e)
            if not np.isfinite(loss.value):
                raise DivergedTraining("distillation loss became non-finite")
            tape.backward(loss)
            grad = tv.grad
        theta = adam_step(opt, theta, grad)
        opt.epoch = step // 50
        mse = float(loss.value)
        if mse < mse_tol:
            break
        if (step + 1) % check_every == 0:
            if mse > mse_tol and mse > 0.98 * prev_check:
                raise DistillationStall(
                    f"distillation plateaued at mse {mse:.3e} > tol {mse_tol:.3e}"
                )
            prev_check = mse
    if mse > mse_tol:
        raise DistillationStall(
            f"distillation ended at mse {mse:.3e} > tol {mse_tol:.3e}"
        )
    return DistilledMlp(
        channel=model.channel,
        source_kind=model.kind,
        source_hash=model_fingerprint(model),
        sizes=sizes,
        theta=theta,
        in_mean=in_mean,
        in_std=in_std,
        out_scale=out_scale,
        force_scale=model.force_scale,
        meta={"probe_count": n, "final_mse": mse, "steps": step + 1},
    )
