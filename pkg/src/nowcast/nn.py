"""Differentiable building blocks with hand-written backward passes.

Arrays are NHWC.  Every ``*_forward`` returns ``(out, cache)`` and the
matching ``*_backward`` takes ``(grad_out, cache)``.  Parameters are passed as
plain dicts of local names (``w``, ``b``, ...) and gradients come back with the
same keys.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

LEAKY_SLOPE = 0.2


class ParameterStore:
    """Named parameter arrays with matching gradient buffers."""

    def __init__(self, values=None):
        self.values = {}
        self.grads = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = np.asarray(value)
        self.grads[name] = np.zeros_like(self.values[name])

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def count(self):
        return int(sum(v.size for v in self.values.values()))

    def scoped(self, prefix):
        """Sub-dict of values under ``prefix.``, with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.values.items() if k.startswith(head)}

    def accumulate(self, prefix, grads):
        for k, g in grads.items():
            self.grads[f"{prefix}.{k}"] += g

    def astype(self, dtype):
        return ParameterStore({k: v.astype(dtype) for k, v in self.values.items()})

    def copy(self):
        return ParameterStore({k: v.copy() for k, v in self.values.items()})


def init_conv(rng, k, cin, cout, dtype=np.float32, gain=1.0):
    """Fan-in scaled uniform kernel and zero bias."""
    limit = gain * np.sqrt(3.0 / (k * k * cin))
    w = rng.uniform(-limit, limit, size=(k, k, cin, cout)).astype(dtype)
    return w, np.zeros(cout, dtype=dtype)


# convolution -----------------------------------------------------------------


def conv2d_forward(x, w, b):
    """Stride-1 same-padded convolution; ``w`` is ``K x K x Cin x Cout``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    n, h, wd, _ = x.shape
    if k == 1:
        out = x.reshape(-1, cin) @ w[0, 0] + b
        return out.reshape(n, h, wd, cout), (x, w)
    p = k // 2
    # np.pad is slow enough to dominate small convolutions
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=x.dtype)
    xp[:, p:p + h, p:p + wd] = x
    # one matmul per kernel tap avoids materializing the im2col matrix
    out = np.broadcast_to(b, (n, h, wd, cout)).copy()
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + wd, :] @ w[i, j]
    return out, (xp, w)


def conv2d_backward(dout, cache):
    xp, w = cache
    k, _, cin, cout = w.shape
    p = k // 2
    n, hp, wp, _ = xp.shape
    h, wd = hp - 2 * p, wp - 2 * p
    if dout.shape != (n, h, wd, cout):
        raise ShapeError(f"grad_out shape {dout.shape} does not match forward output {(n, h, wd, cout)}")
    d2 = dout.reshape(-1, cout)
    # a ones-vector product is much faster than sum(axis=0) on tall matrices
    db = np.ones(d2.shape[0], dtype=d2.dtype) @ d2
    if k == 1:
        dw = (xp.reshape(-1, cin).T @ d2).reshape(w.shape)
        return (d2 @ w[0, 0].T).reshape(xp.shape), dw, db
    # input gradient is a same-padded convolution with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    dx, _ = conv2d_forward(dout, w_flip, np.zeros(cin, dtype=dout.dtype))
    dw = np.empty(w.shape, dtype=np.result_type(xp, dout))
    for i in range(k):
        for j in range(k):
            dw[i, j] = xp[:, i:i + h, j:j + wd].reshape(-1, cin).T @ d2
    return dx, dw, db


# pointwise -----------------------------------------------------------------------


def sigmoid(a):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def leaky_relu(a, slope=LEAKY_SLOPE):
    return np.where(a > 0, a, slope * a)


def leaky_relu_backward(dout, a, slope=LEAKY_SLOPE):
    return np.where(a > 0, dout, slope * dout)


# resampling -------------------------------------------------------------------------


def downsample2(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even H and W, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def downsample2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# residual unit and gate transforms ----------------------------------------------------


def residual_block_forward(x, p, slope=LEAKY_SLOPE):
    """``x + conv2(leaky(conv1(x)))``; channel count is preserved."""
    if p["w1"].shape[2] != x.shape[-1] or p["w2"].shape[3] != x.shape[-1]:
        raise ShapeError(f"residual block kernels {p['w1'].shape}, {p['w2'].shape} do not preserve {x.shape[-1]} channels")
    a1, c1 = conv2d_forward(x, p["w1"], p["b1"])
    u = leaky_relu(a1, slope)
    a2, c2 = conv2d_forward(u, p["w2"], p["b2"])
    return x + a2, (c1, c2, a1, slope)


def residual_block_backward(dout, cache):
    c1, c2, a1, slope = cache
    du, dw2, db2 = conv2d_backward(dout, c2)
    da1 = leaky_relu_backward(du, a1, slope)
    dx, dw1, db1 = conv2d_backward(da1, c1)
    return dout + dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def gate_forward(x, p, gate_type="conv"):
    """Gate pre-activation: a convolution, optionally followed by a residual unit."""
    a, cc = conv2d_forward(x, p["w"], p["b"])
    if gate_type == "conv":
        return a, (cc, None)
    if gate_type == "residual":
        res = {k[4:]: v for k, v in p.items() if k.startswith("res.")}
        out, cr = residual_block_forward(a, res)
        return out, (cc, cr)
    raise ValueError(f"unknown gate type {gate_type!r}")


def gate_backward(dout, cache):
    cc, cr = cache
    grads = {}
    if cr is not None:
        dout, rg = residual_block_backward(dout, cr)
        grads.update({f"res.{k}": v for k, v in rg.items()})
    dx, grads["w"], grads["b"] = conv2d_backward(dout, cc)
    return dx, grads


def init_gate(rng, cin, cout, gate_type, dtype=np.float32, k=3):
    p = {}
    p["w"], p["b"] = init_conv(rng, k, cin, cout, dtype)
    if gate_type == "residual":
        p["res.w1"], p["res.b1"] = init_conv(rng, k, cout, cout, dtype)
        p["res.w2"], p["res.b2"] = init_conv(rng, k, cout, cout, dtype, gain=0.1)
    elif gate_type != "conv":
        raise ValueError(f"unknown gate type {gate_type!r}")
    return p


# convolutional GRU ---------------------------------------------------------------------


def init_gru(rng, cin, hidden, gate_type="conv", dtype=np.float32):
    p = {}
    for k, v in init_gate(rng, cin + hidden, 2 * hidden, gate_type, dtype).items():
        p[f"zr.{k}"] = v
    for k, v in init_gate(rng, cin + hidden, hidden, gate_type, dtype).items():
        p[f"h.{k}"] = v
    return p


def _sub(p, prefix):
    head = prefix + "."
    return {k[len(head):]: v for k, v in p.items() if k.startswith(head)}


def gru_cell_forward(x, h, p, gate_type="conv"):
    """One ConvGRU step.

    z, r = sigmoid(gate_zr([x, h])); candidate = tanh(gate_h([x, r*h]));
    h_new = (1 - z) * h + z * candidate.
    """
    if x.shape[:3] != h.shape[:3]:
        raise ShapeError(f"input {x.shape} and state {h.shape} differ in N, H or W")
    hidden = h.shape[-1]
    if p["h.w"].shape[-1] != hidden:
        raise ShapeError(f"state has {hidden} channels, cell expects {p['h.w'].shape[-1]}")
    cx = x.shape[-1]
    a_zr, c_zr = gate_forward(np.concatenate([x, h], axis=-1), _sub(p, "zr"), gate_type)
    zr = sigmoid(a_zr)
    z, r = zr[..., :hidden], zr[..., hidden:]
    a_h, c_h = gate_forward(np.concatenate([x, r * h], axis=-1), _sub(p, "h"), gate_type)
    cand = np.tanh(a_h)
    h_new = (1 - z) * h + z * cand
    return h_new, (h, zr, cand, c_zr, c_h, cx)


def gru_cell_backward(dh_new, cache):
    """Returns ``(dx, dh, grads)``."""
    h, zr, cand, c_zr, c_h, cx = cache
    hidden = h.shape[-1]
    z, r = zr[..., :hidden], zr[..., hidden:]
    dz = dh_new * (cand - h)
    dh = dh_new * (1 - z)
    da_h = dh_new * z * (1 - cand * cand)
    dxrh, g_h = gate_backward(da_h, c_h)
    dx = dxrh[..., :cx].copy()
    drh = dxrh[..., cx:]
    dr = drh * h
    dh += drh * r
    dzr = np.concatenate([dz, dr], axis=-1) * zr * (1 - zr)
    dxh, g_zr = gate_backward(dzr, c_zr)
    dx += dxh[..., :cx]
    dh += dxh[..., cx:]
    grads = {f"zr.{k}": v for k, v in g_zr.items()}
    grads.update({f"h.{k}": v for k, v in g_h.items()})
    return dx, dh, grads


# finite-difference gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        state = "pass" if self.passed else "FAIL"
        return f"grad_check {state}: max relative error {self.max_error:.3e} ({worst}), tolerance {self.tolerance:.1e}"


def grad_check(op, inputs, tolerance=1e-4, step=1e-5, names=None, loss_fn=None):
    """Compare an analytic gradient against central differences.

    ``op(inputs)`` must return ``(loss, grads)`` where ``grads`` maps the same
    names as ``inputs``.  Inputs are promoted to float64 and perturbed in place
    with a step of ``step * max(1, |value|)``; ``loss_fn(inputs)``, when given,
    evaluates the loss alone for the perturbed passes.  The reported error per
    input is ``|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)``.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if loss_fn is None:
        loss_fn = lambda d: op(d)[0]  # noqa: E731
    loss, analytic = op(inputs)
    if not np.isfinite(loss):
        raise NumericError("grad_check: loss is not finite at the given inputs")
    errors = {}
    for name in names or list(inputs):
        value = inputs[name]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_fn(inputs)
            flat[i] = orig - h
            lm = loss_fn(inputs)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
            nflat[i] = (lp - lm) / (2 * h)
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != value.shape:
            raise ShapeError(f"analytic gradient for {name} has shape {a.shape}, expected {value.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericError(f"grad_check: analytic gradient for {name} is not finite")
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[name] = float(np.linalg.norm(a - numeric) / scale) if scale > 0 else 0.0
    return GradCheckReport(errors, tolerance)
