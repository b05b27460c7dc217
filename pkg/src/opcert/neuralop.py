"""Wavelet-kernel neural operator with spiking or continuous activations.

The model is uplift -> L iterative layers -> projection. Each iterative
layer transforms the channel field into the wavelet domain, applies
learnable channel-mixing weights to the coarsest approximation block
(details pass through), inverts the transform, adds a pointwise 1x1
convolution and a channel bias, and applies the activation. Normalized
grid coordinates are appended to the input function as extra channels.

Evaluating a trained model on a dyadically refined (or coarsened) grid
adjusts the decomposition depth so the approximation block keeps its
trained shape; this is what makes zero-shot resolution transfer work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import wavelet as wv
from .core import GridError, GridSpec, SeededRng, normalized_coordinates

ACTIVATIONS = ("gelu", "vsn", "identity")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries epoch/batch indices."""


class NonSpikingModelError(ValueError):
    """Spiking-only operation requested on a continuous-activation model."""


@dataclass(frozen=True)
class WnoConfig:
    """Architecture hyperparameters tied to a training grid."""

    grid: GridSpec
    width: int = 16
    layers: int = 3
    levels: int = 3
    wavelet: str = "db6"
    activation: str = "gelu"
    proj_hidden: int = 128
    in_channels: int = 0  # 0 -> function value + one coordinate channel per dim
    normalize: bool = False
    spike_steps: int = 1
    surrogate_slope: float = 10.0

    def __post_init__(self):
        if self.width < 1 or self.layers < 1 or self.levels < 1:
            raise ValueError("width, layers and levels must all be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.wavelet not in ("db4", "db6"):
            raise ValueError(f"unsupported wavelet {self.wavelet!r}")
        if self.activation == "vsn" and self.spike_steps != 1:
            raise ValueError("network integration supports single-step spike trains")
        if self.in_channels == 0:
            object.__setattr__(self, "in_channels", 1 + self.grid.dims)

    @property
    def padded_resolution(self) -> tuple[int, ...]:
        block = 1 << self.levels
        return tuple(r + ((-r) % block) for r in self.grid.resolution)

    @property
    def approx_shape(self) -> tuple[int, ...]:
        return tuple(r >> self.levels for r in self.padded_resolution)


@dataclass
class NormStats:
    in_mean: float = 0.0
    in_std: float = 1.0
    out_mean: float = 0.0
    out_std: float = 1.0


@dataclass
class VsnParams:
    """Leak/threshold parameters of one spiking activation site."""

    beta_leak: np.ndarray
    threshold: np.ndarray
    steps: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("spike train length must be >= 1")


class WnoModel:
    """Parameter container plus the differentiable forward pass."""

    def __init__(self, config: WnoConfig, params: dict, norm: NormStats | None = None):
        self.config = config
        self.params = params
        self.norm = norm

    # -- construction ---------------------------------------------------

    @classmethod
    def initialize(cls, config: WnoConfig, rng: SeededRng) -> "WnoModel":
        gen = rng.generator()
        width = config.width
        p: dict[str, ad.Parameter] = {}

        def glorot(name, shape):
            std = math.sqrt(2.0 / (shape[0] + shape[-1]))
            p[name] = ad.Parameter(gen.normal(0.0, std, size=shape), name)

        def zeros(name, shape):
            p[name] = ad.Parameter(np.zeros(shape), name)

        glorot("uplift.w", (config.in_channels, width))
        zeros("uplift.b", (width,))
        r_scale = 1.0 / (width * width)
        for i in range(config.layers):
            p[f"layer{i}.r"] = ad.Parameter(
                gen.uniform(0.0, r_scale, size=(width, width)), f"layer{i}.r"
            )
            glorot(f"layer{i}.k", (width, width))
            zeros(f"layer{i}.b", (width,))
            if config.activation == "vsn":
                p[f"layer{i}.beta"] = ad.Parameter(np.full(width, 0.9), f"layer{i}.beta")
                p[f"layer{i}.th"] = ad.Parameter(np.full(width, 0.5), f"layer{i}.th")
        glorot("proj1.w", (width, config.proj_hidden))
        zeros("proj1.b", (config.proj_hidden,))
        glorot("proj2.w", (config.proj_hidden, 1))
        zeros("proj2.b", (1,))
        return cls(config, p)

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grads(self):
        for par in self.params.values():
            par.zero_grad()

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].value.ravel() for k in sorted(self.params)])

    def set_normalization(self, inputs: np.ndarray, targets: np.ndarray):
        self.norm = NormStats(
            float(np.mean(inputs)),
            float(np.std(inputs)) or 1.0,
            float(np.mean(targets)),
            float(np.std(targets)) or 1.0,
        )

    # -- geometry ---------------------------------------------------------

    def _effective_levels(self, shape: tuple[int, ...]) -> int:
        """Decomposition depth for the given spatial shape.

        The input grid must relate to the training grid by one dyadic
        factor shared across dimensions; the depth shifts by its log2 so
        the approximation block keeps the trained shape.
        """
        cfg = self.config
        base = cfg.grid.resolution
        if len(shape) != len(base):
            raise GridError(f"expected {len(base)}D field, got shape {shape}")
        ratios = set()
        for n, n0 in zip(shape, base):
            if n >= n0:
                if n % n0:
                    raise GridError(f"resolution {n} not a multiple of trained {n0}")
                ratios.add(n // n0)
            else:
                if n0 % n:
                    raise GridError(f"resolution {n} not a divisor of trained {n0}")
                ratios.add(-(n0 // n))
        if len(ratios) != 1:
            raise GridError(f"anisotropic refinement {shape} of {base} unsupported")
        r = ratios.pop()
        j = int(math.log2(abs(r)))
        if (1 << j) != abs(r):
            raise GridError(f"refinement factor {abs(r)} is not a power of two")
        eff = cfg.levels + (j if r > 0 else -j)
        if eff < 1:
            raise GridError(f"grid {shape} too coarse for {cfg.levels} levels")
        return eff

    # -- forward ----------------------------------------------------------

    def forward_nodes(self, inputs: np.ndarray, smooth: bool = False):
        """Differentiable forward of a batch.

        inputs: (B, N) for 1D or (B, H, W) for 2D, in physical units.
        Returns (output node (B, N, 1) in normalized units, spike gate
        nodes per layer; empty for continuous activations).
        """
        cfg = self.config
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 1 + cfg.grid.dims:
            raise GridError(f"expected batched {cfg.grid.dims}D input, got {x.shape}")
        spatial = x.shape[1:]
        levels = self._effective_levels(spatial)
        batch = x.shape[0]
        n_pts = int(np.prod(spatial))
        grid_now = GridSpec(spatial, self.config.grid.extent)
        coords = normalized_coordinates(grid_now)
        if self.norm is not None:
            x = (x - self.norm.in_mean) / self.norm.in_std
        feats = np.concatenate(
            [x.reshape(batch, n_pts, 1), np.broadcast_to(coords, (batch,) + coords.shape)],
            axis=2,
        )
        filt = wv.get_filter(cfg.wavelet)
        block = 1 << levels
        pad = tuple((-s) % block for s in spatial)
        v = ad.affine(ad.constant(feats), self.params["uplift.w"], self.params["uplift.b"])
        gates = []
        for i in range(cfg.layers):
            if cfg.grid.dims == 1:
                n = spatial[0]
                vk = ad.sympad1d(v, pad[0]) if pad[0] else v
                c = ad.dwt1d(vk, filt, levels)
                c = ad.wavelet_scale(c, self.params[f"layer{i}.r"], cfg.approx_shape[0])
                k = ad.idwt1d(c, filt, levels)
                if pad[0]:
                    k = ad.crop1d(k, n)
            else:
                hw = spatial
                if any(pad):
                    raise GridError(
                        f"2D grid {hw} not divisible by 2^{levels}; use dyadic grids"
                    )
                c = ad.dwt2d(v, filt, levels, hw)
                c = ad.wavelet_scale2d(c, self.params[f"layer{i}.r"], cfg.approx_shape, hw)
                k = ad.idwt2d(c, filt, levels, hw)
            w = ad.conv1x1(v, self.params[f"layer{i}.k"])
            z = ad.bias_add(ad.add(k, w), self.params[f"layer{i}.b"])
            if cfg.activation == "gelu":
                v = ad.gelu(z)
            elif cfg.activation == "identity":
                v = z
            else:
                v, gate = ad.vsn(
                    z,
                    self.params[f"layer{i}.beta"],
                    self.params[f"layer{i}.th"],
                    slope=cfg.surrogate_slope,
                    smooth=smooth,
                )
                gates.append(gate)
        h = ad.affine(v, self.params["proj1.w"], self.params["proj1.b"])
        if cfg.activation != "identity":
            h = ad.gelu(h)
        out = ad.affine(h, self.params["proj2.w"], self.params["proj2.b"])
        return out, gates

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Batched inference in physical units; inputs (B, *grid)."""
        out, _ = self.forward_nodes(inputs)
        y = out.value[..., 0].reshape(inputs.shape)
        if self.norm is not None:
            y = y * self.norm.out_std + self.norm.out_mean
        return y

    def normalize_targets(self, targets: np.ndarray) -> np.ndarray:
        if self.norm is None:
            return np.asarray(targets, dtype=np.float64)
        return (targets - self.norm.out_mean) / self.norm.out_std


def wno_forward(model: WnoModel, field_in: np.ndarray) -> np.ndarray:
    """Single-field inference on the model's (or a dyadic) grid."""
    arr = np.asarray(field_in, dtype=np.float64)
    return model.predict(arr[None, ...])[0]


# --------------------------------------------------------------------------
# spiking primitives
# --------------------------------------------------------------------------


def vsn_forward(z: np.ndarray, params: VsnParams):
    """Leaky threshold recurrence over a spike train.

    z: (T, ...) inputs, one slice per time step. Per step the membrane
    accumulates beta_leak * previous + input; reaching the threshold emits
    a unit spike, resets the membrane, and the output is gelu(spike * input)
    (so silent steps output exactly zero). Returns (outputs with the shape
    of z, total spike count).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != params.steps:
        raise ValueError(f"expected {params.steps} time steps, got {z.shape[0]}")
    beta = np.asarray(params.beta_leak, dtype=np.float64)
    th = np.asarray(params.threshold, dtype=np.float64)
    membrane = np.zeros_like(z[0])
    outputs = np.zeros_like(z)
    spikes = 0
    for t in range(params.steps):
        membrane = beta * membrane + z[t]
        fired = membrane >= th
        spikes += int(np.count_nonzero(fired))
        membrane = np.where(fired, 0.0, membrane)
        pre = np.where(fired, z[t], 0.0)
        outputs[t], _ = ad.gelu_value_grad(pre)
    return outputs, spikes


def vsn_surrogate_grad(membrane, threshold, slope: float = 10.0):
    """Smooth stand-in derivative of the firing threshold."""
    if slope <= 0:
        raise ValueError("surrogate slope must be positive")
    return ad.logistic_spike_grad(membrane, threshold, slope)


def spiking_activity(model: WnoModel, inputs: np.ndarray) -> np.ndarray:
    """Percent of emitted spikes per activation site over a dataset.

    100 x spikes / (neurons x time steps x samples) for each of the L
    spiking sites, evaluated at the model's current parameters.
    """
    if model.config.activation != "vsn":
        raise NonSpikingModelError("model has no spiking activation sites")
    _, gates = model.forward_nodes(np.asarray(inputs, dtype=np.float64))
    return np.array([100.0 * float(np.mean(g.value)) for g in gates])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    kind: str = "l2"  # l2 | pinball | slf
    eta: float = 0.5
    alpha_w: float = 1.0
    beta_w: float = 0.0

    def __post_init__(self):
        if self.kind not in ("l2", "pinball", "slf"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"pinball quantile must lie in (0,1), got {self.eta}")
        if self.alpha_w < 0 or self.beta_w < 0:
            raise ValueError("loss weights must be non-negative")


def loss_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != np.shape(truth):
        raise ValueError(f"shape mismatch {pred.shape} vs {np.shape(truth)}")
    return float(np.mean((pred - truth) ** 2))


def loss_pinball(pred: np.ndarray, truth: np.ndarray, eta: float) -> float:
    """Normwise quantile loss: eta-weighted when ||truth|| >= ||pred||."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"quantile must lie in (0,1), got {eta}")
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    gap = float(np.linalg.norm(truth - pred))
    w = eta if np.linalg.norm(truth) >= np.linalg.norm(pred) else 1.0 - eta
    return w * gap

def loss_slf(base_loss: float, spike_ratio: float, alpha_w: float, beta_w: float) -> float:
    """Weighted sum of a task loss and the spike activity ratio."""
    if alpha_w < 0 or beta_w < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha_w * float(base_loss) + beta_w * float(spike_ratio)


def _loss_node(pred: ad.Node, gates, target: np.ndarray, cfg: LossConfig) -> ad.Node:
    t = ad.constant(target.reshape(pred.value.shape))
    if cfg.kind == "pinball":
        d = ad.sub(pred, t)
        sq = ad.sum_per_sample(ad.mul(d, d))
        norms = ad.sqrt_vec(sq)
        b = pred.value.shape[0]
        t_norms = np.linalg.norm(target.reshape(b, -1), axis=1)
        p_norms = np.linalg.norm(pred.value.reshape(b, -1), axis=1)
        weights = np.where(t_norms >= p_norms, cfg.eta, 1.0 - cfg.eta) / b
        return ad.dot_const(norms, weights)
    d = ad.sub(pred, t)
    base = ad.mean_all(ad.mul(d, d))
    if cfg.kind == "l2":
        return base
    total = None
    count = 0
    for g in gates:
        s = ad.sum_all(g)
        total = s if total is None else ad.add(total, s)
        count += g.value.size
    if total is None:
        raise NonSpikingModelError("slf loss requires spiking activation sites")
    ratio = ad.scale(total, 1.0 / count)
    return ad.add(ad.scale(base, cfg.alpha_w), ad.scale(ratio, cfg.beta_w))


# --------------------------------------------------------------------------
# optimizer and training loop
# --------------------------------------------------------------------------


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_WAVELET_IDS = {"db4": 0, "db6": 1}
_ACTIVATION_IDS = {"gelu": 0, "vsn": 1, "identity": 2}
_WAVELET_NAMES = {v: k for k, v in _WAVELET_IDS.items()}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_IDS.items()}


def save_model(model: WnoModel, path):
    """Write a bit-exact model checkpoint."""
    from . import serialio as sio

    cfg = model.config
    with open(path, "wb") as fh:
        sio.start_file(fh, sio.CHECKPOINT_MAGIC)
        sio._write_u32(
            fh,
            cfg.width,
            cfg.layers,
            cfg.levels,
            _WAVELET_IDS[cfg.wavelet],
            _ACTIVATION_IDS[cfg.activation],
            cfg.proj_hidden,
            cfg.in_channels,
            cfg.spike_steps,
        )
        sio._write_f64(fh, cfg.surrogate_slope)
        sio.write_grid(fh, cfg.grid)
        norm = model.norm
        sio._write_u32(fh, 0 if norm is None else 1)
        if norm is not None:
            sio._write_f64(fh, norm.in_mean, norm.in_std, norm.out_mean, norm.out_std)
        names = sorted(model.params)
        sio._write_u32(fh, len(names))
        for name in names:
            sio.write_named_array(fh, name, model.params[name].value)


def load_model(path) -> WnoModel:
    from . import serialio as sio

    with open(path, "rb") as fh:
        sio.check_magic(fh, sio.CHECKPOINT_MAGIC)
        width, layers, levels, wid, aid, proj_hidden, in_ch, steps = sio._read_u32(fh, 8)
        slope = sio._read_f64(fh)
        grid = sio.read_grid(fh)
        cfg = WnoConfig(
            grid=grid,
            width=width,
            layers=layers,
            levels=levels,
            wavelet=_WAVELET_NAMES[wid],
            activation=_ACTIVATION_NAMES[aid],
            proj_hidden=proj_hidden,
            in_channels=in_ch,
            spike_steps=steps,
            surrogate_slope=slope,
        )
        norm = None
        if sio._read_u32(fh):
            vals = sio._read_f64(fh, 4)
            norm = NormStats(*vals)
        count = sio._read_u32(fh)
        params = {}
        for _ in range(count):
            name, arr = sio.read_named_array(fh)
            params[name] = ad.Parameter(arr, name)
    return WnoModel(cfg, params, norm)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """First/second-moment update with bias correction, in place."""
    state.t += 1
    t = state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.value)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def train(
    model: WnoModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_config: LossConfig,
    epochs: int,
    batch_size: int,
    rng: SeededRng,
    lr: float = 1e-3,
) -> list[float]:
    """Mini-batch training; returns the per-epoch mean loss trace."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0 or len(inputs) != len(targets):
        raise ValueError("dataset must be non-empty with matched inputs/targets")
    n = len(inputs)
    batch_size = max(1, min(batch_size, n))
    y_norm = model.normalize_targets(targets)
    gen = rng.generator()
    state = AdamState()
    trace = []
    for epoch in range(epochs):
        perm = gen.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            model.zero_grads()
            pred, gates = model.forward_nodes(inputs[idx])
            loss = _loss_node(pred, gates, y_norm[idx], loss_config)
            val = float(loss.value)
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size}"
                )
            ad.backward(loss)
            adam_step(model.parameters(), state, lr=lr)
            total += val * len(idx)
            seen += len(idx)
        trace.append(total / seen)
    return trace
