"""Minimal reverse-mode differentiation over the operator's op set.

A computation is a DAG of Node objects built eagerly; each op records its
inputs and a per-parent gradient closure. backward() traverses the graph
once in reverse topological order and accumulates into Parameter.grad.
Values are float64 ndarrays with an explicit batch-first layout where the
ops say so; there is no implicit broadcasting between two nodes.

The spiking activation has two modes. In hard mode the forward emits exact
threshold spikes and the backward substitutes a logistic surrogate for the
threshold derivative (the values seen by the backward are the hard ones).
In smooth mode the logistic gate itself is used in the forward, making the
whole network differentiable; finite differences of the smooth forward
match the analytic gradients, which is how spiking models are checked.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from . import wavelet as wv
from .core import ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GraphError(ValueError):
    """Ill-formed graph construction or backward request."""


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "grad_fns", "_consumed")

    def __init__(self, value, parents=(), grad_fns=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fns = tuple(grad_fns)
        self._consumed = False


class Parameter(Node):
    """Trainable leaf with a gradient accumulator of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def constant(value) -> Node:
    return Node(value)


def _check_same(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    return Node(a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    return Node(a.value - b.value, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Node, b: Node) -> Node:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), (lambda g: g * c,))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for x (..., C_in), w (C_in, C_out), b (C_out,)."""
    xv, wv_, bv = x.value, w.value, b.value
    if xv.shape[-1] != wv_.shape[0] or wv_.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"affine: x {xv.shape}, w {wv_.shape}, b {bv.shape} incompatible"
        )
    out = xv @ wv_ + bv
    lead = tuple(range(xv.ndim - 1))
    return Node(
        out,
        (x, w, b),
        (
            lambda g: g @ wv_.T,
            lambda g: np.tensordot(xv, g, axes=(lead, lead)),
            lambda g: g.sum(axis=lead),
        ),
    )


def conv1x1(x: Node, k: Node) -> Node:
    """Pointwise channel mixing x @ k, x (..., C_in), k (C_in, C_out)."""
    xv, kv = x.value, k.value
    if xv.shape[-1] != kv.shape[0]:
        raise ShapeError(f"conv1x1: x {xv.shape} and kernel {kv.shape} incompatible")
    lead = tuple(range(xv.ndim - 1))
    return Node(
        xv @ kv,
        (x, k),
        (lambda g: g @ kv.T, lambda g: np.tensordot(xv, g, axes=(lead, lead))),
    )


def bias_add(x: Node, b: Node) -> Node:
    """Per-channel bias on the last axis."""
    if x.value.shape[-1] != b.value.shape[0] or b.value.ndim != 1:
        raise ShapeError(f"bias_add: x {x.value.shape}, b {b.value.shape}")
    lead = tuple(range(x.value.ndim - 1))
    return Node(x.value + b.value, (x, b), (lambda g: g, lambda g: g.sum(axis=lead)))


def gelu_value_grad(x: np.ndarray):
    """Exact (erf-based) gelu and its derivative."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf


def gelu(x: Node) -> Node:
    val, dval = gelu_value_grad(x.value)
    return Node(val, (x,), (lambda g: g * dval,))


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return Node(x.value.reshape(shape), (x,), (lambda g: g.reshape(old),))


def sum_all(x: Node) -> Node:
    shape = x.value.shape
    return Node(np.sum(x.value), (x,), (lambda g: np.full(shape, float(g)),))


def mean_all(x: Node) -> Node:
    shape = x.value.shape
    n = x.value.size
    return Node(np.mean(x.value), (x,), (lambda g: np.full(shape, float(g) / n),))


def sum_per_sample(x: Node) -> Node:
    """Reduce (B, ...) to per-sample sums (B,)."""
    shape = x.value.shape
    if x.value.ndim < 2:
        raise GraphError("sum_per_sample needs a batch axis")
    axes = tuple(range(1, x.value.ndim))
    expand = (slice(None),) + (None,) * (x.value.ndim - 1)
    return Node(
        x.value.sum(axis=axes),
        (x,),
        (lambda g: np.broadcast_to(g[expand], shape).copy(),),
    )


def sqrt_vec(x: Node, floor: float = 1e-150) -> Node:
    """Elementwise square root with a gradient floor at zero."""
    r = np.sqrt(np.maximum(x.value, 0.0))
    return Node(r, (x,), (lambda g: g / (2.0 * np.maximum(r, floor)),))


def dot_const(x: Node, weights: np.ndarray) -> Node:
    """Scalar inner product with a constant weight vector."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.value.shape:
        raise ShapeError(f"dot_const: {x.value.shape} vs {w.shape}")
    return Node(np.dot(x.value, w), (x,), (lambda g: float(g) * w,))


# --- wavelet-domain ops ----------------------------------------------------


def dwt1d(x: Node, filt: wv.WaveletFilter, levels: int) -> Node:
    """Packed multilevel transform along axis -2 of (..., N, C) fields."""
    xv = np.swapaxes(x.value, -1, -2)
    out = np.swapaxes(wv.dwt_packed(xv, filt, levels), -1, -2)

    def back(g):
        return np.swapaxes(wv.idwt_packed(np.swapaxes(g, -1, -2), filt, levels), -1, -2)

    return Node(out, (x,), (back,))


def idwt1d(c: Node, filt: wv.WaveletFilter, levels: int) -> Node:
    cv = np.swapaxes(c.value, -1, -2)
    out = np.swapaxes(wv.idwt_packed(cv, filt, levels), -1, -2)

    def back(g):
        return np.swapaxes(wv.dwt_packed(np.swapaxes(g, -1, -2), filt, levels), -1, -2)

    return Node(out, (c,), (back,))


def _to_spatial2d(v: np.ndarray, hw):
    h, w = hw
    batch = v.shape[:-2]
    return np.moveaxis(v.reshape(batch + (h, w, v.shape[-1])), -1, -3)


def _from_spatial2d(v: np.ndarray, hw):
    h, w = hw
    out = np.moveaxis(v, -3, -1)
    return out.reshape(out.shape[:-3] + (h * w, out.shape[-1]))


def dwt2d(x: Node, filt: wv.WaveletFilter, levels: int, hw) -> Node:
    """Packed separable transform of (..., H*W, C) fields on an H-by-W grid."""
    out = _from_spatial2d(wv.dwt2d_packed(_to_spatial2d(x.value, hw), filt, levels), hw)

    def back(g):
        return _from_spatial2d(
            wv.idwt2d_packed(_to_spatial2d(g, hw), filt, levels), hw
        )

    return Node(out, (x,), (back,))


def idwt2d(c: Node, filt: wv.WaveletFilter, levels: int, hw) -> Node:
    out = _from_spatial2d(wv.idwt2d_packed(_to_spatial2d(c.value, hw), filt, levels), hw)

    def back(g):
        return _from_spatial2d(wv.dwt2d_packed(_to_spatial2d(g, hw), filt, levels), hw)

    return Node(out, (c,), (back,))


def wavelet_scale(c: Node, r: Node, n_approx: int) -> Node:
    """Channel-mixing weights on the approximation block of packed 1D coeffs.

    c: (..., N, C) packed coefficients; r: a single (C, C) mixing matrix
    shared across approximation positions. Details pass through. Sharing
    the matrix over positions keeps the operator consistent when the
    decomposition depth shifts with the grid resolution: it weights the
    lowpass subspace rather than individual phase-sensitive coefficients.
    """
    cv, rv = c.value, r.value
    ch = cv.shape[-1]
    if rv.shape != (ch, ch):
        raise ShapeError(f"wavelet_scale: weights {rv.shape}, expected ({ch}, {ch})")
    out = cv.copy()
    approx = cv[..., :n_approx, :]
    out[..., :n_approx, :] = approx @ rv

    def back_c(g):
        gc = g.copy()
        gc[..., :n_approx, :] = g[..., :n_approx, :] @ rv.T
        return gc

    def back_r(g):
        ga = g[..., :n_approx, :].reshape(-1, ch)
        return approx.reshape(-1, ch).T @ ga

    return Node(out, (c, r), (back_c, back_r))


def wavelet_scale2d(c: Node, r: Node, hw_approx, hw) -> Node:
    """2D analogue: a shared (C, C) matrix on the coarsest quadrant.

    c: (..., H*W, C); hw_approx is the approximation block shape inside
    the H-by-W packed layout.
    """
    ha, wa = hw_approx
    cv, rv = c.value, r.value
    ch = cv.shape[-1]
    if rv.shape != (ch, ch):
        raise ShapeError(f"wavelet_scale2d: weights {rv.shape}, expected ({ch}, {ch})")
    spat = _to_spatial2d(cv, hw)  # (..., C, H, W)
    approx = np.moveaxis(spat[..., :ha, :wa], -3, -1)  # (..., ha, wa, C)
    out_sp = spat.copy()
    out_sp[..., :ha, :wa] = np.moveaxis(approx @ rv, -1, -3)
    out = _from_spatial2d(out_sp, hw)

    def back_c(g):
        gs = _to_spatial2d(g, hw)
        ga = np.moveaxis(gs[..., :ha, :wa], -3, -1)
        gc = gs.copy()
        gc[..., :ha, :wa] = np.moveaxis(ga @ rv.T, -1, -3)
        return _from_spatial2d(gc, hw)

    def back_r(g):
        gs = _to_spatial2d(g, hw)
        ga = np.moveaxis(gs[..., :ha, :wa], -3, -1)
        return approx.reshape(-1, ch).T @ ga.reshape(-1, ch)

    return Node(out, (c, r), (back_c, back_r))


# --- spiking activation -----------------------------------------------------


def logistic_spike_grad(m, threshold, slope: float):
    """Surrogate derivative of the threshold: k * s * (1 - s), s = expit(k(m - th))."""
    s = expit(slope * (np.asarray(m) - threshold))
    return slope * s * (1.0 - s)


def vsn(x: Node, beta: Node, threshold: Node, slope: float = 10.0, smooth: bool = False):
    """Leaky threshold-gated activation on (..., C) fields, single time step.

    Membrane starts at zero each call, so one step gives membrane = x; the
    gate fires where membrane >= threshold and the output is gelu(gate * x)
    (zero input stays zero). Returns (output, gate) nodes; the gate node
    carries the spike field for activity penalties and reporting. beta is
    accepted as a parent for interface symmetry; with a single step the
    leak cannot influence the output, so its gradient is zero.
    """
    xv = x.value
    th = threshold.value
    be = beta.value
    if th.ndim != 1 or th.shape[0] != xv.shape[-1] or be.shape != th.shape:
        raise ShapeError(
            f"vsn: x {xv.shape}, beta {be.shape}, threshold {th.shape} incompatible"
        )
    membrane = xv  # M_1 = beta * 0 + x
    sig = expit(slope * (membrane - th))
    surr = slope * sig * (1.0 - sig)
    gate = sig if smooth else (membrane >= th).astype(np.float64)
    pre = gate * xv
    act, dact = gelu_value_grad(pre)
    lead = tuple(range(xv.ndim - 1))

    def out_dx(g):
        return g * dact * (gate + xv * surr)

    def out_dbeta(g):
        return np.zeros_like(be)

    def out_dth(g):
        return (g * dact * xv * (-surr)).sum(axis=lead)

    out_node = Node(act, (x, beta, threshold), (out_dx, out_dbeta, out_dth))

    def gate_dx(g):
        return g * surr

    def gate_dbeta(g):
        return np.zeros_like(be)

    def gate_dth(g):
        return (g * (-surr)).sum(axis=lead)

    gate_node = Node(gate, (x, beta, threshold), (gate_dx, gate_dbeta, gate_dth))
    return out_node, gate_node


# --- boundary padding for non-dyadic grids ----------------------------------


def sympad1d(x: Node, pad: int) -> Node:
    """Trailing symmetric padding along axis -2 of (..., N, C); exact adjoint."""
    if pad < 0:
        raise GraphError(f"negative padding {pad}")
    if pad == 0:
        return x
    n = x.value.shape[-2]
    if pad > n:
        raise GraphError(f"padding {pad} exceeds length {n}")
    width = [(0, 0)] * x.value.ndim
    width[-2] = (0, pad)
    out = np.pad(x.value, width, mode="symmetric")

    def back(g):
        gx = g[..., :n, :].copy()
        flipped = g[..., n:, :][..., ::-1, :]
        gx[..., n - pad :, :] += flipped
        return gx

    return Node(out, (x,), (back,))


def crop1d(x: Node, n: int) -> Node:
    """Keep the first n rows of axis -2; adjoint zero-extends."""
    total = x.value.shape[-2]
    if not 0 < n <= total:
        raise GraphError(f"crop to {n} from {total}")
    out = x.value[..., :n, :].copy()

    def back(g):
        gx = np.zeros(g.shape[:-2] + (total, g.shape[-1]), dtype=np.float64)
        gx[..., :n, :] = g
        return gx

    return Node(out, (x,), (back,))


# --- traversal ---------------------------------------------------------------


def _topological(loss: Node):
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Node):
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
    if loss.value.shape not in ((), (1,)):
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    loss._consumed = True
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, fn in zip(node.parents, node.grad_fns):
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def grad_check(
    closure,
    parameters,
    eps: float = 1e-5,
    samples: int = 24,
    seed: int = 0,
    atol: float = 1e-8,
):
    """Max relative error between analytic gradients and central differences.

    closure() must rebuild the (deterministic) scalar loss graph from the
    parameters' current values. Returns {param name: max rel error} over
    up to `samples` randomly chosen coordinates per parameter; empty when
    there are no parameters. Coordinates where both magnitudes fall below
    atol are skipped: central differences at step eps cannot resolve
    gradients beneath roughly machine-eps/eps, so comparing there would
    only measure roundoff.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    parameters = list(parameters)
    if not parameters:
        return {}
    for p in parameters:
        p.zero_grad()
    backward(closure())
    analytic = {p.name: p.grad.copy() for p in parameters}
    rng = np.random.default_rng(seed)
    errors = {}
    for p in parameters:
        flat = p.value.reshape(-1)
        idxs = np.arange(flat.size)
        if flat.size > samples:
            idxs = rng.choice(flat.size, size=samples, replace=False)
        worst = 0.0
        ana = analytic[p.name].reshape(-1)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            up = float(closure().value)
            flat[i] = keep - eps
            dn = float(closure().value)
            flat[i] = keep
            fd = (up - dn) / (2.0 * eps)
            if abs(ana[i]) < atol and abs(fd) < atol:
                continue
            err = abs(ana[i] - fd) / (abs(ana[i]) + abs(fd) + 1e-12)
            worst = max(worst, err)
        errors[p.name] = worst
        p.grad[...] = analytic[p.name]
    return errors
