"""Synthetic datasets: random fields, a viscous transport solver, and a
steady diffusion solver, with binary persistence.

Random fields are synthesized spectrally from a fixed number of modes, so
the same draw evaluated at two resolutions gives samples of one underlying
function; that is what makes resolution-transfer experiments meaningful.
Per-sample random streams are derived from (seed, split base + index),
which keeps splits disjoint and regeneration bit-identical.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialio as sio
from .core import GridSpec, SeededRng

DATASET_KINDS = {"burgers": 1, "darcy": 2}
_KIND_NAMES = {v: k for k, v in DATASET_KINDS.items()}

# stream bases reserving disjoint per-sample id ranges per split
SPLIT_STREAM_BASE = {"train": 1 << 20, "calibration": 2 << 20, "test": 3 << 20}


class SolverError(RuntimeError):
    """Numerical solve failed; message carries the failing step/iteration."""


# --------------------------------------------------------------------------
# Gaussian random fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GrfSpec:
    """Spectral law: mode k has variance scale * (4 pi^2 |k|^2 + shift)^-2.

    1D fields use the periodic Fourier basis (constant, cos, sin pairs);
    2D fields use the even cosine basis so no flux is forced through the
    boundary. mode_count bounds the synthesis; the eigenvalues decay like
    |k|^-4 so a few dozen modes carry all the variance.
    """

    shift: float
    scale: float
    dims: int
    mode_count: int = 32

    def __post_init__(self):
        if self.shift <= 0 or self.scale < 0:
            raise ValueError("need shift > 0 and scale >= 0")
        if self.dims not in (1, 2):
            raise ValueError("fields are 1D or 2D")

    def eigenvalue(self, k) -> np.ndarray:
        ksq = np.sum(np.square(np.atleast_2d(k).astype(np.float64)), axis=-1)
        return self.scale * (4.0 * np.pi**2 * ksq + self.shift) ** (-2.0)


BURGERS_GRF = GrfSpec(shift=25.0, scale=625.0, dims=1)
DARCY_GRF = GrfSpec(shift=9.0, scale=1.0, dims=2)


def grf_coefficients(spec: GrfSpec, rng: SeededRng) -> np.ndarray:
    """Standard-normal coefficient draw defining one field."""
    gen = rng.generator()
    if spec.dims == 1:
        return gen.standard_normal(2 * spec.mode_count - 1)  # const + (cos, sin) pairs
    return gen.standard_normal((spec.mode_count, spec.mode_count))


def grf_evaluate(spec: GrfSpec, coeff: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate the field defined by coeff at 1D points or a 2D point grid."""
    if spec.dims == 1:
        x = np.asarray(points, dtype=np.float64)
        kk = np.arange(1, spec.mode_count)
        lam0 = float(spec.eigenvalue([[0.0]])[0])
        lam = spec.eigenvalue(kk[:, None])
        out = np.sqrt(lam0) * coeff[0] * np.ones_like(x)
        phase = 2.0 * np.pi * np.outer(kk, x)
        amps = np.sqrt(2.0 * lam)
        cos_c = coeff[1 : spec.mode_count]
        sin_c = coeff[spec.mode_count :]
        out += (amps * cos_c) @ np.cos(phase) + (amps * sin_c) @ np.sin(phase)
        return out
    x = np.asarray(points, dtype=np.float64)
    kk = np.arange(spec.mode_count)
    lam = spec.eigenvalue(
        np.stack(np.meshgrid(kk, kk, indexing="ij"), axis=-1).reshape(-1, 2)
    ).reshape(spec.mode_count, spec.mode_count)
    # orthonormal cosine basis: phi_0 = 1, phi_k = sqrt(2) cos(pi k x)
    basis = np.cos(np.pi * np.outer(kk, x))
    basis[1:] *= np.sqrt(2.0)
    weighted = np.sqrt(lam) * coeff
    return basis.T @ weighted @ basis


def sample_grf(spec: GrfSpec, rng: SeededRng, grid: GridSpec) -> np.ndarray:
    """One field sample on the given grid.

    1D grids are treated as periodic (points j/N); 2D grids include both
    endpoints (points j/(N-1)) to line up with Dirichlet boundaries.
    """
    coeff = grf_coefficients(spec, rng)
    if spec.dims == 1:
        n = grid.resolution[0]
        return grf_evaluate(spec, coeff, np.arange(n) / n)
    if grid.dims != 2:
        raise ValueError("2D law needs a 2D grid")
    pts = np.linspace(0.0, 1.0, grid.resolution[0])
    if grid.resolution[0] != grid.resolution[1]:
        raise ValueError("2D sampling expects square grids")
    return grf_evaluate(spec, coeff, pts)


def grf_pointwise_variance(spec: GrfSpec) -> float:
    """Stationary pointwise variance implied by the retained spectrum (1D)."""
    if spec.dims != 1:
        raise ValueError("defined for the periodic 1D law")
    kk = np.arange(1, spec.mode_count)
    return float(spec.eigenvalue([[0.0]])[0]) + 2.0 * float(np.sum(spec.eigenvalue(kk[:, None])))


# --------------------------------------------------------------------------
# viscous transport (periodic, spectral in space)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BurgersConfig:
    viscosity: float = 0.1
    dt: float = 1.0 / 200.0
    solver_resolution: int = 512
    output_resolution: int = 128
    t_final: float = 1.0
    advection: bool = True

    def __post_init__(self):
        if self.solver_resolution < self.output_resolution:
            raise ValueError("solver resolution must be >= output resolution")
        if self.solver_resolution % self.output_resolution:
            raise ValueError("output resolution must divide solver resolution")
        if self.viscosity <= 0 or self.dt <= 0:
            raise ValueError("viscosity and dt must be positive")


def solve_burgers(u0: np.ndarray, config: BurgersConfig) -> np.ndarray:
    """March u_t + u u_x = nu u_xx to t_final on the periodic unit interval.

    Crank-Nicolson diffusion with Adams-Bashforth advection and 2/3-rule
    dealiasing; the advection term is diffusion-stabilized for
    dt <= 2 nu / max(u)^2, which is checked as a per-step diagnostic.
    Returns the solution subsampled to the output resolution.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = config.solver_resolution
    if u0.shape != (n,):
        raise ValueError(f"initial condition must live on the solver grid ({n},)")
    nu, dt = config.viscosity, config.dt
    steps = int(round(config.t_final / dt))
    k = np.fft.rfftfreq(n, d=1.0 / n)  # integer wavenumbers
    ik = 2j * np.pi * k
    ksq = (2.0 * np.pi * k) ** 2
    dealias = k <= n / 3.0
    cn_num = 1.0 - 0.5 * dt * nu * ksq
    cn_den = 1.0 + 0.5 * dt * nu * ksq
    u_hat = np.fft.rfft(u0)
    u_limit = np.sqrt(2.0 * nu / dt)

    def advection_hat(uh):
        if not config.advection:
            return np.zeros_like(uh)
        u = np.fft.irfft(uh, n=n)
        ux = np.fft.irfft(ik * uh, n=n)
        return np.fft.rfft(u * ux) * dealias

    prev = advection_hat(u_hat)
    for step in range(steps):
        umax = float(np.max(np.abs(np.fft.irfft(u_hat, n=n))))
        if not np.isfinite(umax) or umax > 1e6:
            raise SolverError(f"blow-up at step {step} (|u| = {umax:.3g})")
        if config.advection and umax > u_limit:
            warnings.warn(
                f"step {step}: |u|={umax:.3g} exceeds the stability bound "
                f"{u_limit:.3g} for dt={dt}",
                RuntimeWarning,
                stacklevel=2,
            )
        cur = advection_hat(u_hat)
        # AB2 after the first step; plain Euler to start
        adv = cur if step == 0 else 1.5 * cur - 0.5 * prev
        u_hat = (cn_num * u_hat - dt * adv) / cn_den
        prev = cur
    u_final = np.fft.irfft(u_hat, n=n)
    if not np.all(np.isfinite(u_final)):
        raise SolverError(f"non-finite solution after {steps} steps")
    return u_final[:: n // config.output_resolution]


# --------------------------------------------------------------------------
# steady diffusion with heterogeneous conductivity (Dirichlet box)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DarcyConfig:
    resolution: int = 32
    perm_low: float = 3.0
    perm_high: float = 12.0
    forcing: float = 1.0
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.resolution < 3:
            raise ValueError("need at least one interior node")
        if self.perm_low <= 0 or self.perm_high <= 0:
            raise ValueError("permeability levels must be positive")


def permeability_from_grf(field: np.ndarray, config: DarcyConfig) -> np.ndarray:
    """Two-level conductivity: low where the latent field is negative."""
    return np.where(field < 0.0, config.perm_low, config.perm_high)


def _edge_coefficients(a: np.ndarray):
    harm = lambda p, q: 2.0 * p * q / (p + q)
    ax = harm(a[:-1, :], a[1:, :])  # between rows i and i+1
    ay = harm(a[:, :-1], a[:, 1:])  # between columns j and j+1
    return ax, ay


def _apply_operator(u_int: np.ndarray, ax, ay, h2: float) -> np.ndarray:
    """Five-point conservative operator on interior nodes, zero boundary."""
    r = u_int.shape[0]
    u = np.zeros((r + 2, r + 2))
    u[1:-1, 1:-1] = u_int
    north = ax[1:, 1:-1] * (u[1:-1, 1:-1] - u[2:, 1:-1])
    south = ax[:-1, 1:-1] * (u[1:-1, 1:-1] - u[:-2, 1:-1])
    east = ay[1:-1, 1:] * (u[1:-1, 1:-1] - u[1:-1, 2:])
    west = ay[1:-1, :-1] * (u[1:-1, 1:-1] - u[1:-1, :-2])
    return (north + south + east + west) / h2


def solve_darcy_fd(a: np.ndarray, config: DarcyConfig) -> np.ndarray:
    """Solve -div(a grad u) = forcing with zero Dirichlet boundary.

    Harmonic edge averaging keeps the 5-point system symmetric positive
    definite for positive a; conjugate gradients run to a 1e-10 relative
    residual with a 10 N iteration budget.
    """
    a = np.asarray(a, dtype=np.float64)
    r = config.resolution
    if a.shape != (r, r):
        raise ValueError(f"conductivity must be ({r}, {r}), got {a.shape}")
    if np.any(a <= 0):
        raise ValueError("conductivity must be strictly positive")
    h = 1.0 / (r - 1)
    h2 = h * h
    ax, ay = _edge_coefficients(a)
    n_unknowns = (r - 2) * (r - 2)
    b = np.full((r - 2, r - 2), config.forcing)
    x = np.zeros_like(b)
    res = b - _apply_operator(x, ax, ay, h2)
    p = res.copy()
    rs = float(np.sum(res * res))
    b_norm = float(np.linalg.norm(b))
    tol = config.cg_tol * b_norm
    max_iter = 10 * n_unknowns
    for it in range(max_iter):
        if np.sqrt(rs) <= tol:
            break
        ap = _apply_operator(p, ax, ay, h2)
        alpha = rs / float(np.sum(p * ap))
        x += alpha * p
        res -= alpha * ap
        rs_new = float(np.sum(res * res))
        p = res + (rs_new / rs) * p
        rs = rs_new
    else:
        raise SolverError(
            f"conjugate gradients did not reach {config.cg_tol} in {max_iter} iterations"
        )
    out = np.zeros((r, r))
    out[1:-1, 1:-1] = x
    return out


# --------------------------------------------------------------------------
# dataset generation and persistence
# --------------------------------------------------------------------------


def generate_burgers_sample(rng: SeededRng, config: BurgersConfig):
    """(initial condition, solution) pair at the output resolution."""
    coeff = grf_coefficients(BURGERS_GRF, rng)
    n = config.solver_resolution
    u0 = grf_evaluate(BURGERS_GRF, coeff, np.arange(n) / n)
    u1 = solve_burgers(u0, config)
    return u0[:: n // config.output_resolution], u1


def generate_darcy_sample(rng: SeededRng, config: DarcyConfig):
    """(conductivity, pressure) pair on the endpoint-inclusive grid."""
    grid = GridSpec((config.resolution, config.resolution))
    latent = sample_grf(DARCY_GRF, rng, grid)
    a = permeability_from_grf(latent, config)
    return a, solve_darcy_fd(a, config)


def write_dataset(path, kind: str, grid: GridSpec, inputs: np.ndarray, outputs: np.ndarray):
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    if inputs.shape != outputs.shape or inputs.shape[1:] != grid.shape:
        raise ValueError("dataset arrays must be (n, *grid) and aligned")
    with open(path, "wb") as fh:
        sio.start_file(fh, sio.DATASET_MAGIC)
        sio._write_u32(fh, DATASET_KINDS[kind])
        sio.write_grid(fh, grid)
        sio._write_u32(fh, len(inputs))
        for u, y in zip(inputs, outputs):
            sio._write_array(fh, u)
            sio._write_array(fh, y)


def read_dataset(path):
    with open(path, "rb") as fh:
        sio.check_magic(fh, sio.DATASET_MAGIC)
        kind = _KIND_NAMES[sio._read_u32(fh)]
        grid = sio.read_grid(fh)
        count = sio._read_u32(fh)
        inputs, outputs = [], []
        for _ in range(count):
            inputs.append(sio._read_array(fh))
            outputs.append(sio._read_array(fh))
    return kind, grid, np.stack(inputs), np.stack(outputs)


def make_dataset(
    kind: str,
    counts: dict,
    rng: SeededRng,
    out_dir,
    burgers: BurgersConfig | None = None,
    darcy: DarcyConfig | None = None,
) -> dict:
    """Generate and persist train/calibration/test splits plus a manifest.

    Every sample is drawn from its own stream (split base + index), so
    regenerating any split, in any order, is bit-identical, and no two
    splits can share a sample.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    for split in ("train", "calibration", "test"):
        if counts.get(split, 0) < 1:
            raise ValueError(f"need at least one {split} sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "burgers":
        config = burgers or BurgersConfig()
        grid = GridSpec((config.output_resolution,))
        sampler = lambda r: generate_burgers_sample(r, config)
    else:
        config = darcy or DarcyConfig()
        grid = GridSpec((config.resolution, config.resolution))
        sampler = lambda r: generate_darcy_sample(r, config)
    paths = {}
    for split in ("train", "calibration", "test"):
        base = SPLIT_STREAM_BASE[split]
        ins, outs = [], []
        for i in range(counts[split]):
            u, y = sampler(rng.substream(base + i))
            ins.append(u)
            outs.append(y)
        path = out_dir / f"{split}.opdata"
        write_dataset(path, kind, grid, np.stack(ins), np.stack(outs))
        paths[split] = path
    manifest = {
        "kind": kind,
        "seed": rng.seed,
        "base_stream": rng.stream,
        "n_train": counts["train"],
        "n_calibration": counts["calibration"],
        "n_test": counts["test"],
    }
    if kind == "burgers":
        manifest.update(
            {
                "viscosity": repr(config.viscosity),
                "dt": repr(config.dt),
                "solver_resolution": config.solver_resolution,
                "output_resolution": config.output_resolution,
                "reference_protocol": "1000/50/100 samples at resolution 1024",
            }
        )
    else:
        manifest.update(
            {
                "resolution": config.resolution,
                "perm_low": repr(config.perm_low),
                "perm_high": repr(config.perm_high),
                "forcing": repr(config.forcing),
                "reference_protocol": "800/100/100 samples at resolution 85x85",
            }
        )
    sio.write_manifest(out_dir / "manifest.txt", manifest)
    return paths
