"""Lumped axle force models.

Closed-form baselines (brush/Fiala, Magic Formula) and the learned ExpTanh
curve family share one interface: forces(alpha, sigma, feat) -> (fx, fy) for
a single axle, plus peak_force(feat) where a bound is analytically available.
Sign conventions match the slip kinematics: F_y <= 0 for alpha >= 0 and
F_x >= 0 for sigma >= 0.  Pure-slip lateral models therefore learn curves
that start negative for positive slip; pure longitudinal models learn -F_x.

All math is written against the autodiff dispatch ops so each model runs on
plain floats, numpy arrays, and tape Vars without separate code paths (MLPs
pick a vectorized route automatically when everything is an ndarray).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import DegenerateScale, DimensionMismatch, NoInteriorExtremum
from .nets import adam_init, adam_step, mlp_apply, mlp_forward, mlp_init, mlp_n_params

CH_FRONT_LAT = "front_lateral"
CH_REAR_LONG = "rear_longitudinal"
CH_REAR_COMB = "rear_combined"

FEAT_FRONT = ("r", "v", "beta", "mu_fz_bar")
FEAT_REAR = ("r", "v", "mu_fz_bar")

# Characteristic scales for the ODE-state inputs of the learned models
# (slip rad, normalized force, normalized force slope, inflection rad).
Z_SCALE_PURE = np.array([0.3, 1.0, 20.0, 0.3, 0.3, 0.3])
Z_SCALE_COMB = np.array([0.4, 1.0, 10.0, 0.4])


def feat_names(channel: str):
    return FEAT_FRONT if channel == CH_FRONT_LAT else FEAT_REAR


def feat_for_channel(channel, r, v, beta, mu_fz_bar):
    """Feature vector per axle: front sees (r, v, beta, mu); rear (r, v, mu)."""
    if channel == CH_FRONT_LAT:
        return [r, v, beta, mu_fz_bar]
    return [r, v, mu_fz_bar]


def feat_matrix(channel, r, v, beta, mu_fz_bar):
    """Stacked (N, n_feat) feature matrix from 1-D arrays."""
    cols = feat_for_channel(channel, r, v, beta, mu_fz_bar)
    cols = [np.broadcast_to(np.asarray(c, dtype=float), np.shape(r)) for c in cols]
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# brush (Fiala)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FialaParams:
    c_alpha: float
    mu_fz: float


def _brush(q, c, mu_fz):
    """Odd cubic brush curve in the slip variable q, positive convention.

    Slope c at q=0, C1-continuous saturation at +-mu_fz beyond |q| = 3 mu_fz / c.
    mu_fz may be state-dependent (friction-circle derating), so keep it
    generic and clamp it away from zero before dividing.
    """
    mu = ad.maximum(mu_fz, 1e-9)
    q_sl = 3.0 * mu / c
    aq = ad.absval(q)
    inside = ad.value_of(aq) <= ad.value_of(q_sl)
    cubic = c * q - (c * c / (3.0 * mu)) * aq * q + (c**3 / (27.0 * mu * mu)) * q * q * q
    sign_q = ad.where(ad.value_of(q) >= 0.0, 1.0, -1.0)
    return ad.where(inside, cubic, mu * sign_q)


def fiala_force(slip, params: FialaParams):
    """Lateral brush force: slope -c_alpha at zero, saturates at -+mu_fz."""
    return -_brush(ad.tan(slip), params.c_alpha, params.mu_fz)


@dataclass(frozen=True)
class FialaAxleParams:
    c_alpha: float
    mu_fz: float
    c_sigma: float = 0.0


@dataclass
class FialaAxle:
    """Brush axle; combined mode derates lateral grip by longitudinal usage."""

    params: FialaAxleParams
    channel: str = CH_FRONT_LAT
    meta: dict = field(default_factory=dict)

    kind = "fiala"

    def forces(self, alpha, sigma, feat=None):
        p = self.params
        if self.channel == CH_FRONT_LAT:
            return 0.0 * alpha, -_brush(ad.tan(alpha), p.c_alpha, p.mu_fz)
        if self.channel == CH_REAR_LONG:
            return _brush(sigma, p.c_sigma, p.mu_fz), 0.0 * sigma
        fx = _brush(sigma, p.c_sigma, p.mu_fz)
        mu_rem = ad.sqrt(ad.maximum(p.mu_fz * p.mu_fz - fx * fx, 0.0))
        fy = -_brush(ad.tan(alpha), p.c_alpha, mu_rem)
        return fx, fy

    def peak_force(self, feat=None):
        return self.params.mu_fz


# ---------------------------------------------------------------------------
# Magic Formula
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MagicFormulaParams:
    b: float
    c: float
    d: float
    e: float


def magic_formula_force(slip, params: MagicFormulaParams):
    """D sin(C atan(B s - E (B s - atan(B s)))), positive convention."""
    bs = params.b * slip
    return params.d * ad.sin(params.c * ad.atan(bs - params.e * (bs - ad.atan(bs))))


@dataclass
class MagicFormulaAxle:
    """Magic Formula axle.

    Pure channels apply the curve to one slip with the tire-frame sign.  The
    combined channel evaluates the curve on the total slip kappa and splits it
    kinematically: F_x ~ sigma/kappa, F_y ~ -tan(alpha)/kappa (similarity
    construction with an exact friction circle).
    """

    params: MagicFormulaParams
    channel: str = CH_FRONT_LAT
    meta: dict = field(default_factory=dict)

    kind = "magic_formula"

    def forces(self, alpha, sigma, feat=None):
        if self.channel == CH_FRONT_LAT:
            return 0.0 * alpha, -magic_formula_force(alpha, self.params)
        if self.channel == CH_REAR_LONG:
            return magic_formula_force(sigma, self.params), 0.0 * sigma
        ta = ad.tan(alpha)
        kappa = ad.sqrt(ta * ta + sigma * sigma)
        k_safe = ad.maximum(kappa, 1e-9)
        ftot = magic_formula_force(k_safe, self.params)
        return ftot * sigma / k_safe, -ftot * ta / k_safe

    def peak_force(self, feat=None):
        return self.params.d


def fit_magic_formula(slips, forces, initial: MagicFormulaParams | None = None,
                      steps: int = 6000, lr: float = 0.01) -> MagicFormulaParams:
    """Least-squares Magic Formula fit via Adam.

    forces are positive-convention samples of the curve (callers flip lateral
    signs first).  B, C, D stay positive and E stays below 1 through the
    exp/1-exp reparameterization.
    """
    slips = np.asarray(slips, dtype=float)
    forces = np.asarray(forces, dtype=float)
    if slips.shape != forces.shape:
        raise DimensionMismatch("slips and forces must have matching shapes")
    scale = float(np.max(np.abs(forces)))
    if scale <= 0.0:
        raise DimensionMismatch("force samples are all zero")
    y = forces / scale
    if initial is None:
        initial = MagicFormulaParams(b=10.0, c=1.5, d=scale, e=0.5)
    theta = np.array([
        np.log(initial.b),
        np.log(initial.c),
        np.log(initial.d / scale),
        np.log(max(1.0 - initial.e, 1e-6)),
    ])

    def loss_fn(tv):
        b = ad.exp(tv[0])
        c = ad.exp(tv[1])
        d = ad.exp(tv[2])
        e = 1.0 - ad.exp(tv[3])
        bs = b * slips
        pred = d * ad.sin(c * ad.atan(bs - e * (bs - ad.atan(bs))))
        err = pred - y
        return ad.amean(err * err)

    opt = adam_init(theta.size, lr0=lr, lr_decay=0.0)
    for _ in range(steps):
        _, g = ad.grad(loss_fn, theta)
        theta = adam_step(opt, theta, g)
    return MagicFormulaParams(
        b=float(np.exp(theta[0])),
        c=float(np.exp(theta[1])),
        d=float(np.exp(theta[2]) * scale),
        e=float(1.0 - np.exp(theta[3])),
    )


# ---------------------------------------------------------------------------
# ExpTanh family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpTanhCoeffs:
    """Coefficients of a1 + a2 exp(-a3 |z|) tanh(a4 (z - a5)); a3, a4 > 0."""

    a1: float
    a2: float
    a3: float
    a4: float
    a5: float

    def as_tuple(self):
        return (self.a1, self.a2, self.a3, self.a4, self.a5)


def exptanh_eval(z, coeffs):
    """Evaluate the curve; coeffs is an ExpTanhCoeffs or a 5-sequence."""
    a1, a2, a3, a4, a5 = coeffs.as_tuple() if isinstance(coeffs, ExpTanhCoeffs) else coeffs
    return a1 + a2 * ad.exp(-(a3 * ad.absval(z))) * ad.tanh(a4 * (z - a5))


def exptanh_extrema(coeffs):
    """Interior stationary points (z_minus, z_plus) of the curve.

    Solves d/dz [exp(-a3|z|) tanh(a4 (z-a5))] = 0 on each |z| branch:
    tanh(a4 (z-a5)) = (sqrt(a3^2+4 a4^2) - a3) / (2 a4) gives the right
    branch, its negation the left.  Valid as interior extrema when z_plus > 0
    and z_minus < 0 (each solution must lie on the branch that produced it);
    callers verify against a grid when that matters.  Raises
    NoInteriorExtremum when the atanh argument reaches 1 (a3 <= 0: pure tanh
    is monotone).
    """
    a1, a2, a3, a4, a5 = coeffs.as_tuple() if isinstance(coeffs, ExpTanhCoeffs) else coeffs
    a3v, a4v = ad.value_of(a3), ad.value_of(a4)
    if np.any(np.asarray(a4v) <= 0.0):
        raise NoInteriorExtremum("a4 must be positive")
    arg_v = (np.sqrt(np.asarray(a3v) ** 2 + 4.0 * np.asarray(a4v) ** 2) - a3v) / (2.0 * a4v)
    if np.any(arg_v >= 1.0):
        raise NoInteriorExtremum(
            "atanh argument >= 1 (a3 <= 0 leaves the curve monotone)"
        )
    arg = (ad.sqrt(a3 * a3 + 4.0 * a4 * a4) - a3) / (2.0 * a4)
    w = ad.atanh(arg) / a4
    return a5 - w, a5 + w


def _exptanh_extrema_clamped(a3, a4, a5):
    """Taped-safe extremum offsets: clamps the atanh argument below 1."""
    arg = (ad.sqrt(a3 * a3 + 4.0 * a4 * a4) - a3) / (2.0 * a4)
    arg = ad.minimum(arg, 1.0 - 1e-12)
    w = ad.atanh(arg) / a4
    return a5 - w, a5 + w


# ---------------------------------------------------------------------------
# learned-model plumbing
# ---------------------------------------------------------------------------


@dataclass
class NetBlock:
    """One MLP inside a learned model: layer sizes, theta slice, input scaling."""

    name: str
    sizes: tuple
    start: int
    stop: int
    in_mean: np.ndarray
    in_std: np.ndarray


def _blocks(named_sizes):
    blocks = []
    ofs = 0
    for name, sizes in named_sizes:
        n = mlp_n_params(sizes)
        blocks.append(
            NetBlock(
                name=name,
                sizes=tuple(sizes),
                start=ofs,
                stop=ofs + n,
                in_mean=np.zeros(sizes[0]),
                in_std=np.ones(sizes[0]),
            )
        )
        ofs += n
    return blocks, ofs


def _net_eval(blocks, idx, theta, inputs):
    """Evaluate one net block.

    theta is the model's flat (P,) ndarray or a list of per-block items
    (ndarrays or tape Vars holding the block's slice).  inputs is an
    (N, n_in) ndarray for the vectorized route or a sequence of n_in
    scalars/arrays/Vars; the latter goes through the fused tape primitive.
    """
    blk = blocks[idx]
    sub = theta[blk.start:blk.stop] if isinstance(theta, np.ndarray) else theta[idx]
    if isinstance(sub, np.ndarray) and isinstance(inputs, np.ndarray):
        xn = (inputs - blk.in_mean) / blk.in_std
        return mlp_forward(sub, xn, blk.sizes)
    xn = [
        (inputs[i] - blk.in_mean[i]) / blk.in_std[i]
        for i in range(len(blk.in_mean))
    ]
    return mlp_apply(sub, xn, blk.sizes)


def set_block_norm(model, name, mean, std):
    """Install input standardization for one net; zero spreads clamp to 1."""
    for blk in model.blocks:
        if blk.name == name:
            mean = np.asarray(mean, dtype=float)
            std = np.asarray(std, dtype=float)
            if mean.shape != (blk.sizes[0],) or std.shape != (blk.sizes[0],):
                raise DimensionMismatch(f"bad normalization shape for net {name}")
            blk.in_mean = mean
            blk.in_std = np.where(std < 1e-12, 1.0, std)
            return
    raise KeyError(name)


@dataclass
class ExpTanhPure:
    """Pure-slip ExpTanh model: coefficients from a small net of the features.

    channel front_lateral maps alpha -> F_y; rear_longitudinal maps
    sigma -> -F_x (same curve shape by symmetry of the conventions).
    """

    channel: str
    blocks: list
    theta: np.ndarray
    force_scale: float
    meta: dict = field(default_factory=dict)

    kind = "exptanh_pure"

    def coeffs(self, feat, theta=None):
        th = self.theta if theta is None else theta
        out = _net_eval(self.blocks, 0, th, feat)
        if isinstance(out, np.ndarray):
            a1, a2, g3, g4, a5 = (out[..., i] for i in range(5))
        else:
            a1, a2, g3, g4, a5 = out
        return a1, a2, ad.exp(g3), ad.exp(g4), a5

    def curve(self, slip, feat, theta=None):
        """Normalized curve value at the given slip."""
        return exptanh_eval(slip, self.coeffs(feat, theta))

    def forces(self, alpha, sigma, feat, theta=None):
        if self.channel == CH_FRONT_LAT:
            return 0.0 * alpha, self.curve(alpha, feat, theta) * self.force_scale
        return -self.curve(sigma, feat, theta) * self.force_scale, 0.0 * sigma

    def peak_force(self, feat):
        """Largest |force| of the curve at one feature point, from the analytic extrema."""
        a = self.coeffs(np.asarray(feat, dtype=float))
        coeffs = ExpTanhCoeffs(*(float(np.squeeze(ai)) for ai in a))
        zm, zp = exptanh_extrema(coeffs)
        vals = [abs(exptanh_eval(z, coeffs)) for z in (zm, zp)]
        return float(max(vals)) * self.force_scale


@dataclass
class ExpTanhCombined:
    """Combined-slip ExpTanh model: total force on kappa plus a learned split.

    F_tot = curve(kappa; net(feat)) * scale, direction from the split net
    (s1, s2) = NN4(alpha, sigma): F_y = s1 F_tot / |s|, F_x = s2 F_tot / |s|.
    """

    channel: str
    blocks: list
    theta: np.ndarray
    force_scale: float
    meta: dict = field(default_factory=dict)

    kind = "exptanh_combined"

    def coeffs(self, feat, theta=None):
        th = self.theta if theta is None else theta
        out = _net_eval(self.blocks, 0, th, feat)
        if isinstance(out, np.ndarray):
            a1, a2, g3, g4, a5 = (out[..., i] for i in range(5))
        else:
            a1, a2, g3, g4, a5 = out
        return a1, a2, ad.exp(g3), ad.exp(g4), a5

    def total_force(self, kappa, feat, theta=None):
        return exptanh_eval(kappa, self.coeffs(feat, theta)) * self.force_scale

    def split(self, alpha, sigma, theta=None):
        th = self.theta if theta is None else theta
        if isinstance(th, np.ndarray) and isinstance(alpha, np.ndarray):
            inp = np.stack([alpha, np.broadcast_to(sigma, alpha.shape)], axis=-1)
            out = _net_eval(self.blocks, 1, th, inp)
            return out[..., 0], out[..., 1]
        out = _net_eval(self.blocks, 1, th, [alpha, sigma])
        return out[0], out[1]

    def forces(self, alpha, sigma, feat, theta=None, strict=False):
        ta = ad.tan(alpha)
        kappa = ad.sqrt(ta * ta + sigma * sigma)
        ftot = self.total_force(kappa, feat, theta)
        s1, s2 = self.split(alpha, sigma, theta)
        nrm2 = s1 * s1 + s2 * s2
        if strict and np.any(np.asarray(ad.value_of(nrm2)) < 1e-24):
            raise DegenerateScale("split outputs (s1, s2) are both ~0")
        nrm = ad.sqrt(ad.maximum(nrm2, 1e-24))
        return ftot * s2 / nrm, ftot * s1 / nrm

    def peak_force(self, feat):
        a = self.coeffs(np.asarray(feat, dtype=float))
        coeffs = ExpTanhCoeffs(*(float(np.squeeze(ai)) for ai in a))
        _, zp = exptanh_extrema(coeffs)
        return float(abs(exptanh_eval(zp, coeffs))) * self.force_scale


def exptanh_combined_forces(model: ExpTanhCombined, alpha, sigma, feat):
    """Public combined evaluation; raises DegenerateScale on a dead split."""
    return model.forces(alpha, sigma, feat, strict=True)


# Output-bias priors start the curve family at tire-like magnitudes
# (normalized force ~1, slope ~e^2.5 per rad) so Adam refines rather than
# bootstraps across orders of magnitude.  sign_a2 follows the channel's force
# convention.
def _curve_bias(sign_a2):
    return np.array([0.0, sign_a2 * 1.0, np.log(0.4), 2.5, 0.0])


def exptanh_pure_init(channel, rng, hidden=(3, 3), force_scale=7000.0):
    n_feat = len(feat_names(channel))
    sizes = (n_feat, *hidden, 5)
    blocks, n = _blocks([("coeff", sizes)])
    theta = mlp_init(sizes, rng, out_bias=_curve_bias(-1.0))
    return ExpTanhPure(
        channel=channel, blocks=blocks, theta=theta, force_scale=force_scale
    )


def exptanh_combined_init(channel, rng, hidden=(3, 3), split_hidden=(3, 3),
                          force_scale=7000.0):
    n_feat = len(feat_names(channel))
    coeff_sizes = (n_feat, *hidden, 5)
    split_sizes = (2, *split_hidden, 2)
    blocks, n = _blocks([("coeff", coeff_sizes), ("split", split_sizes)])
    theta = np.concatenate([
        mlp_init(coeff_sizes, rng, out_bias=_curve_bias(1.0)),
        mlp_init(split_sizes, rng),
    ])
    return ExpTanhCombined(
        channel=channel, blocks=blocks, theta=theta, force_scale=force_scale
    )


# ---------------------------------------------------------------------------
# Fiala fitting (baseline tuning)
# ---------------------------------------------------------------------------


def fit_fiala(dataset_arrays, channel, mu_fz0, steps=3000, lr=0.02) -> FialaAxle:
    """Fit brush parameters to measured slip/force samples via Adam.

    dataset_arrays: dict with alpha/sigma/fx/fy 1-D arrays for the axle.
    Positivity of the stiffnesses and the friction bound comes from exp
    reparameterization.
    """
    alpha = np.asarray(dataset_arrays.get("alpha", 0.0), dtype=float)
    sigma = np.asarray(dataset_arrays.get("sigma", 0.0), dtype=float)
    fy = np.asarray(dataset_arrays.get("fy", 0.0), dtype=float)
    fx = np.asarray(dataset_arrays.get("fx", 0.0), dtype=float)
    scale = mu_fz0

    if channel == CH_FRONT_LAT:
        theta = np.array([np.log(8.0e4 / scale), np.log(1.0)])

        def loss_fn(tv):
            c_a = ad.exp(tv[0]) * scale
            mu = ad.exp(tv[1]) * scale
            pred = -_brush(ad.tan(alpha), c_a, mu)
            err = (pred - fy) / scale
            return ad.amean(err * err)

    elif channel == CH_REAR_COMB:
        theta = np.array([np.log(8.0e4 / scale), np.log(1.0), np.log(8.0e4 / scale)])

        def loss_fn(tv):
            c_a = ad.exp(tv[0]) * scale
            mu = ad.exp(tv[1]) * scale
            c_s = ad.exp(tv[2]) * scale
            fx_p = _brush(sigma, c_s, mu)
            mu_rem = ad.sqrt(ad.maximum(mu * mu - fx_p * fx_p, 0.0))
            fy_p = -_brush(ad.tan(alpha), c_a, mu_rem)
            ex = (fx_p - fx) / scale
            ey = (fy_p - fy) / scale
            return ad.amean(ex * ex) + ad.amean(ey * ey)

    else:
        raise DimensionMismatch(f"fit_fiala does not handle channel {channel}")

    opt = adam_init(theta.size, lr0=lr, lr_decay=0.0)
    for _ in range(steps):
        _, g = ad.grad(loss_fn, theta)
        theta = adam_step(opt, theta, g)
    if channel == CH_FRONT_LAT:
        params = FialaAxleParams(
            c_alpha=float(np.exp(theta[0]) * scale),
            mu_fz=float(np.exp(theta[1]) * scale),
        )
    else:
        params = FialaAxleParams(
            c_alpha=float(np.exp(theta[0]) * scale),
            mu_fz=float(np.exp(theta[1]) * scale),
            c_sigma=float(np.exp(theta[2]) * scale),
        )
    return FialaAxle(params=params, channel=channel)
