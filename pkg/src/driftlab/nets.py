"""Small tanh multilayer perceptrons on flat parameter vectors, plus Adam.

Weights live in one flat float64 vector so the optimizer, the serializer and
the tape all see the same layout: per layer, the weight matrix (row major,
out x in) followed by the bias vector.  Hidden activations are tanh, the
output layer is linear.

mlp_forward has two routes that must agree: a vectorized numpy route for
plain array inputs, and a per-scalar route (driven by the autodiff dispatch
functions) used whenever parameters or inputs are tape Vars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch


def mlp_n_params(sizes):
    """Number of parameters for layer sizes (n_in, h1, ..., n_out)."""
    return sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))


def mlp_init(sizes, rng, out_bias=None):
    """Glorot-uniform weights, zero biases, flat layout.

    out_bias optionally presets the output-layer bias vector; useful to start
    curve-family coefficients at physically sensible magnitudes.
    """
    chunks = []
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        lim = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-lim, lim, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    theta = np.concatenate(chunks)
    if out_bias is not None:
        ob = np.asarray(out_bias, dtype=float)
        if ob.shape != (sizes[-1],):
            raise DimensionMismatch(
                f"out_bias shape {ob.shape} != ({sizes[-1]},)"
            )
        theta[-sizes[-1]:] = ob
    return theta


def _layout(sizes):
    """Yield (w_start, w_stop, b_start, b_stop, n_in, n_out) per layer."""
    ofs = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w0, w1 = ofs, ofs + n_in * n_out
        b0, b1 = w1, w1 + n_out
        ofs = b1
        yield w0, w1, b0, b1, n_in, n_out


def mlp_forward(theta, x, sizes):
    """Evaluate the net.

    theta: flat ndarray, or a sequence of scalars/Vars of the same layout.
    x: (..., n_in) ndarray for the fast route, or a sequence of n_in
       scalars/Vars/1-D arrays for the per-scalar route.
    Returns an (..., n_out) ndarray or a list of n_out outputs respectively.
    """
    fast = (
        isinstance(theta, np.ndarray)
        and isinstance(x, np.ndarray)
    )
    if fast:
        if x.shape[-1] != sizes[0]:
            raise DimensionMismatch(
                f"input dim {x.shape[-1]} != net input {sizes[0]}"
            )
        h = x
        last = len(sizes) - 2
        for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(_layout(sizes)):
            w = theta[w0:w1].reshape(n_out, n_in)
            b = theta[b0:b1]
            h = h @ w.T + b
            if li != last:
                h = np.tanh(h)
        return h
    # per-scalar route: theta and x are sequences of floats/Vars
    if len(x) != sizes[0]:
        raise DimensionMismatch(f"input len {len(x)} != net input {sizes[0]}")
    h = list(x)
    last = len(sizes) - 2
    for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(_layout(sizes)):
        nxt = []
        for j in range(n_out):
            acc = theta[b0 + j]
            row = w0 + j * n_in
            for i in range(n_in):
                acc = acc + theta[row + i] * h[i]
            nxt.append(ad.tanh(acc) if li != last else acc)
        h = nxt
    return h


def mlp_apply(theta, x, sizes):
    """Whole-net evaluation as one fused tape operation per output.

    theta: flat (P,) ndarray, or a Var holding the flat vector.
    x: sequence of n_in inputs, each a float, (B,) array, or Var of such.
    Returns a list of n_out outputs; raw floats/arrays when nothing is taped.

    Matches mlp_forward exactly but records one tape node per output with an
    analytic whole-net backward (matmul backprop), instead of one node per
    scalar multiply-add.  Unrolled-ODE training and horizon-batched Jacobian
    extraction are only practical through this path.  Prefix seed axes pass
    through to the theta gradient and fold correctly on scalar inputs.
    """
    if len(x) != sizes[0]:
        raise DimensionMismatch(f"input len {len(x)} != net input {sizes[0]}")
    th_var = theta if ad.is_var(theta) else None
    th = th_var.value if th_var is not None else np.asarray(theta, dtype=float)
    x_vars = [xi if ad.is_var(xi) else None for xi in x]
    vals = [np.asarray(ad.value_of(xi), dtype=float) for xi in x]
    bvals = np.broadcast_arrays(*vals) if len(vals) > 1 else [vals[0]]
    batch = bvals[0].shape
    X = np.stack(bvals, axis=-1)

    layout = list(_layout(sizes))
    last = len(layout) - 1
    acts = [X]
    h = X
    for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(layout):
        w = th[w0:w1].reshape(n_out, n_in)
        h = h @ w.T + th[b0:b1]
        if li != last:
            h = np.tanh(h)
            acts.append(h)
    out_vals = h

    taped = th_var is not None or any(v is not None for v in x_vars)
    if not taped:
        if batch:
            return [out_vals[..., j] for j in range(sizes[-1])]
        return [float(out_vals[j]) for j in range(sizes[-1])]

    tape = ad._tape_of()

    def make_vjp(j):
        def vjp(g):
            gz = np.zeros(np.shape(g) + (sizes[-1],))
            gz[..., j] = g
            dz = gz
            dtheta = {}
            for li in reversed(range(len(layout))):
                w0, w1, b0, b1, n_in, n_out = layout[li]
                a_prev = acts[li]
                w = th[w0:w1].reshape(n_out, n_in)
                if th_var is not None:
                    if batch:
                        dW = np.einsum("...bo,bi->...oi", dz, a_prev)
                        db = np.sum(dz, axis=-2)
                    else:
                        dW = np.einsum("...o,i->...oi", dz, a_prev)
                        db = dz
                    dtheta[li] = (dW, db)
                da = dz @ w
                dz = da * (1.0 - a_prev * a_prev) if li > 0 else da
            if th_var is not None:
                prefix = np.shape(g)[: np.ndim(g) - len(batch)]
                dth = np.zeros(prefix + th.shape)
                for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(layout):
                    dW, db = dtheta[li]
                    dth[..., w0:w1] = dW.reshape(prefix + (n_out * n_in,))
                    dth[..., b0:b1] = db
                ad._accum(tape, th_var, dth)
            for i, xv in enumerate(x_vars):
                if xv is not None:
                    ad._accum(tape, xv, dz[..., i])
        return vjp

    outs = []
    for j in range(sizes[-1]):
        val = out_vals[..., j] if batch else float(out_vals[j])
        outs.append(ad._node(tape, val, make_vjp(j)))
    return outs


@dataclass
class AdamState:
    """Adam moments plus the exponential learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr0: float = 1e-3
    lr_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epoch: int = 0

    @property
    def lr(self):
        return self.lr0 * np.exp(-self.lr_decay * self.epoch)


def adam_init(n_params, lr0=1e-3, lr_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m=np.zeros(n_params),
        v=np.zeros(n_params),
        lr0=lr0,
        lr_decay=lr_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state, params, grads):
    """One bias-corrected Adam update; mutates state, returns new params."""
    g = np.asarray(grads, dtype=float)
    if g.shape != params.shape:
        raise DimensionMismatch(f"grad shape {g.shape} != params {params.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1**state.t)
    vhat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
