"""End-to-end command line: data generation, training, calibration,
evaluation, resolution transfer, and spike activity reporting.

Configuration is plain `key = value` text with a default for every key and
rejection of unknown keys; the fully resolved configuration is echoed into
the run manifest next to each artifact. Exit codes: 2 configuration,
3 I/O, 4 diverged training, 5 grid/shape mismatch, 6 field-transport
failure, 7 spiking report on a non-spiking checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import conformal as cf
from . import datagen as dg
from . import ensemble as ens
from . import gp as gpm
from . import neuralop as no
from . import serialio as sio
from .core import GridError, GridSpec, SeededRng, ShapeError

# dedicated stream bases, disjoint from the per-sample data streams
CALIBRATION_JITTER_STREAM = 4 << 20
TRAIN_STREAM = 5 << 20
GP_STREAM = 6 << 20

MODEL_KINDS = ("rp-wno", "rp-vswno", "q-wno")


class ConfigError(ValueError):
    """Bad run configuration."""


@dataclass
class RunConfig:
    experiment: str = "burgers"
    model: str = "rp-wno"
    n_c: int = 10
    alpha: float = 0.05
    z: float = 1.96
    width: int = 16
    layers: int = 3
    levels: int = 3
    wavelet: str = "db6"
    proj_hidden: int = 128
    epochs: int = 200
    lr: float = 1e-3
    batch: int = 20
    slf_alpha: float = 1.0
    slf_beta: float = 0.0
    prior_weight: float = 1.0
    jitter: float = 1e-9
    seed: int = 0
    n_train: int = 200
    n_calibration: int = 50
    n_test: int = 100
    resolution: int = 128
    solver_resolution: int = 512

    def validate(self):
        if self.experiment not in ("burgers", "darcy"):
            raise ConfigError(f"experiment must be burgers or darcy, got {self.experiment!r}")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.n_c < 1 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("n_c >= 1, epochs >= 0 and batch >= 1 required")
        return self

    def as_manifest(self) -> dict:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


def load_config(path) -> RunConfig:
    entries = sio.read_manifest(path)
    cfg = RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in entries.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        current = getattr(cfg, key)
        try:
            value = type(current)(raw) if not isinstance(current, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        setattr(cfg, key, value)
    return cfg.validate()


def _worker_count(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("OPCERT_THREADS")
    return max(1, int(env)) if env else 1


def _wno_config(run: RunConfig, grid: GridSpec) -> no.WnoConfig:
    return no.WnoConfig(
        grid=grid,
        width=run.width,
        layers=run.layers,
        levels=run.levels,
        wavelet=run.wavelet,
        activation="vsn" if run.model == "rp-vswno" else "gelu",
        proj_hidden=run.proj_hidden,
        normalize=grid.dims == 2,
    )


def _load_split(data_dir, split: str):
    path = Path(data_dir) / f"{split}.opdata"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset split {path}")
    return dg.read_dataset(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    run = load_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    rng = SeededRng(run.seed, 0)
    counts = {
        "train": run.n_train,
        "calibration": run.n_calibration,
        "test": run.n_test,
    }
    out = Path(args.out)
    if run.experiment == "burgers":
        cfg = dg.BurgersConfig(
            solver_resolution=run.solver_resolution, output_resolution=run.resolution
        )
        dg.make_dataset("burgers", counts, rng, out, burgers=cfg)
    else:
        dg.make_dataset("darcy", counts, rng, out, darcy=dg.DarcyConfig(resolution=run.resolution))
    sio.write_manifest(out / "run_manifest.txt", run.as_manifest())
    print(f"wrote {run.experiment} splits {counts} to {out}")
    return 0


def _write_traces(path, traces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "epoch", "loss"])
        for m, trace in enumerate(traces):
            for e, value in enumerate(trace):
                writer.writerow([m, e, repr(value)])


def cmd_train(args) -> int:
    run = load_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    kind, grid, train_in, train_out = _load_split(args.data, "train")
    if kind != run.experiment:
        raise ShapeError(f"dataset is {kind!r} but config says {run.experiment!r}")
    cfg = _wno_config(run, grid)
    rng = SeededRng(run.seed, TRAIN_STREAM)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = _worker_count(args)
    if run.model == "q-wno":
        loss_lo = no.LossConfig("pinball", eta=run.alpha / 2.0)
        loss_hi = no.LossConfig("pinball", eta=1.0 - run.alpha / 2.0)
        traces = []
        for tag, loss, offset in (("lo", loss_lo, 0), ("hi", loss_hi, 64)):
            model = no.WnoModel.initialize(cfg, rng.substream(offset))
            if cfg.normalize:
                model.set_normalization(train_in, train_out)
            trace = no.train(
                model, train_in, train_out, loss, run.epochs, run.batch,
                rng.substream(offset + 1), lr=run.lr,
            )
            no.save_model(model, out / f"{tag}.ckpt")
            traces.append(trace)
        sio.write_manifest(
            out / "manifest.txt",
            {"kind": "qwno", "eta_lo": repr(run.alpha / 2.0), "eta_hi": repr(1.0 - run.alpha / 2.0)},
        )
        _write_traces(out / "loss_traces.csv", traces)
    else:
        loss = no.LossConfig("l2")
        if run.model == "rp-vswno" and run.slf_beta > 0:
            loss = no.LossConfig("slf", alpha_w=run.slf_alpha, beta_w=run.slf_beta)

        def train_member(k):
            member = ens.build_member(cfg, run.prior_weight, rng, k)
            if cfg.normalize:
                stats = no.NormStats(
                    float(np.mean(train_in)), float(np.std(train_in)) or 1.0,
                    float(np.mean(train_out)), float(np.std(train_out)) or 1.0,
                )
                member.trainable.norm = stats
                member.prior.norm = stats
            residual = member.residual_targets(train_in, train_out)
            trace = no.train(
                member.trainable, train_in, residual, loss, run.epochs, run.batch,
                rng.substream(ens._MEMBER_BLOCK * k + ens._BATCH_OFF), lr=run.lr,
            )
            return member, trace

        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(train_member, range(run.n_c)))
            else:
                results = [train_member(k) for k in range(run.n_c)]
        except no.TrainingDiverged as exc:
            raise ens.EnsembleTrainingError(str(exc)) from exc
        members = [m for m, _ in results]
        ensemble = ens.RpEnsemble(members, cfg, run.prior_weight)
        ens.save_ensemble(ensemble, out)
        _write_traces(out / "loss_traces.csv", [t for _, t in results])
    sio.write_manifest(out / "run_manifest.txt", run.as_manifest())
    print(f"trained {run.model} on {len(train_in)} samples -> {out}")
    return 0


def _load_checkpoint(path):
    manifest = sio.read_manifest(Path(path) / "manifest.txt")
    if manifest.get("kind") == "qwno":
        lo = no.load_model(Path(path) / "lo.ckpt")
        hi = no.load_model(Path(path) / "hi.ckpt")
        return "qwno", (lo, hi)
    return "rp", ens.load_ensemble(path)


def cmd_calibrate(args) -> int:
    kind, model = _load_checkpoint(args.ckpt)
    data_kind, grid, cal_in, cal_out = _load_split(args.data, "calibration")
    jitter_rng = SeededRng(args.seed or 0, CALIBRATION_JITTER_STREAM)
    if kind == "rp":
        qf = cf.calibrate(
            cal_in, cal_out,
            lambda u: ens.rp_predict(model, u),
            args.alpha, jitter_rng, grid,
        )
    else:
        lo, hi = model
        qf = cf.calibrate_cq(
            cal_out, lo.predict(cal_in), hi.predict(cal_in), args.alpha, jitter_rng, grid
        )
    cf.save_qfield(qf, args.out)
    finite = qf.values[np.isfinite(qf.values)]
    if finite.size:
        print(
            f"calibrated {finite.size}/{qf.values.size} locations: "
            f"q min {finite.min():.4g} median {np.median(finite):.4g} max {finite.max():.4g}"
        )
    else:
        print("calibration produced infinite parameters everywhere")
    return 0


def _coverage_csv(path, grid, calibrated, uncalibrated, nmse, target):
    coords = None
    try:
        from .core import normalized_coordinates

        coords = normalized_coordinates(grid)
    except GridError:
        pass
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        coord_cols = [f"coord_{i}" for i in range(grid.dims)]
        writer.writerow(["row_type", "location", *coord_cols, "coverage_calibrated",
                         "coverage_uncalibrated", "below_target"])
        cal = calibrated.per_location.ravel()
        unc = uncalibrated.per_location.ravel()
        for i in range(cal.size):
            xy = [repr(float(c)) for c in coords[i]] if coords is not None else [""] * grid.dims
            writer.writerow(
                ["location", i, *xy, repr(float(cal[i])), repr(float(unc[i])),
                 int(cal[i] < target)]
            )
        for name, rep in (("calibrated", calibrated), ("uncalibrated", uncalibrated)):
            s = rep.summary()
            writer.writerow(
                ["summary", name, repr(s["average"]), repr(s["min"]), repr(s["max"]),
                 s["below_target"], s["at_or_above_target"]]
            )
        writer.writerow(["nmse_percent", repr(nmse)])


def nmse_percent(truths: np.ndarray, preds: np.ndarray) -> float:
    """100 * sum ||y - p||^2 / sum ||y||^2 over a test set."""
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    return 100.0 * float(np.sum((truths - preds) ** 2) / np.sum(truths**2))


def _evaluate_rp(ensemble, qf, test_in, test_out, z_uncal):
    mean, spread = ens.rp_predict(ensemble, test_in)
    cal_bands = [cf.band(mean[i], spread[i], qf, z=qf.z) for i in range(len(test_in))]
    unc_bands = [ens.initial_band(mean[i], spread[i], z=z_uncal) for i in range(len(test_in))]
    target = (1.0 - qf.alpha) * 100.0
    return (
        cf.coverage_eval(cal_bands, test_out, target),
        cf.coverage_eval(unc_bands, test_out, target),
        nmse_percent(test_out, mean),
    )


def _evaluate_cq(models, qf, test_in, test_out, target):
    lo, hi = models
    lo_p, hi_p = lo.predict(test_in), hi.predict(test_in)
    cal_bands = [cf.cq_band(lo_p[i], hi_p[i], qf) for i in range(len(test_in))]
    from .core import Band

    # crossed quantiles stay crossed: such a band covers nothing, and hiding
    # that would overstate the baseline
    unc_bands = [Band(lo_p[i], hi_p[i]) for i in range(len(test_in))]
    mid = 0.5 * (lo_p + hi_p)
    return (
        cf.coverage_eval(cal_bands, test_out, target),
        cf.coverage_eval(unc_bands, test_out, target),
        nmse_percent(test_out, mid),
    )


def cmd_evaluate(args) -> int:
    kind, model = _load_checkpoint(args.ckpt)
    qf = cf.load_qfield(args.qfield)
    data_kind, grid, test_in, test_out = _load_split(args.data, args.split)
    if grid.shape != qf.grid.shape:
        raise ShapeError(f"data grid {grid.shape} != calibration grid {qf.grid.shape}")
    target = (1.0 - qf.alpha) * 100.0
    if kind == "rp":
        cal_rep, unc_rep, nmse = _evaluate_rp(model, qf, test_in, test_out, args.z)
    else:
        cal_rep, unc_rep, nmse = _evaluate_cq(model, qf, test_in, test_out, target)
    _coverage_csv(args.out, grid, cal_rep, unc_rep, nmse, target)
    s = cal_rep.summary()
    print(
        f"coverage avg {s['average']:.2f} min {s['min']:.2f} max {s['max']:.2f} "
        f"(below target: {s['below_target']}/{cal_rep.per_location.size}); "
        f"nmse {nmse:.3f}%"
    )
    return 0


def cmd_superres(args) -> int:
    kind, model = _load_checkpoint(args.ckpt)
    if kind != "rp":
        raise ConfigError("resolution transfer needs an ensemble checkpoint")
    qf = cf.load_qfield(args.qfield)
    data_kind, grid_hi, test_in, test_out = _load_split(args.data_hi, "test")
    qf_hi, gp_model = gpm.superres_q(
        qf, grid_hi, rng=SeededRng(args.seed or 0, GP_STREAM)
    )
    cal_rep, unc_rep, nmse = _evaluate_rp(model, qf_hi, test_in, test_out, args.z)
    target = (1.0 - qf.alpha) * 100.0
    _coverage_csv(args.out, grid_hi, cal_rep, unc_rep, nmse, target)
    print(
        f"transferred q {qf.grid.shape} -> {grid_hi.shape} "
        f"(kernel {gp_model.params}); calibrated avg {cal_rep.average:.2f} "
        f"vs uncalibrated {unc_rep.average:.2f}; nmse {nmse:.3f}%"
    )
    return 0


def cmd_spiking_report(args) -> int:
    kind, model = _load_checkpoint(args.ckpt)
    if kind != "rp":
        raise no.NonSpikingModelError("spiking report needs an ensemble checkpoint")
    data_kind, grid, test_in, _ = _load_split(args.data, "test")
    per_member = []
    for member in model.members:
        per_member.append(no.spiking_activity(member.trainable, test_in))
    activity = np.mean(per_member, axis=0)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "activity_percent"])
        for i, pct in enumerate(activity):
            writer.writerow([i, repr(float(pct))])
    print("spiking activity per site:", ", ".join(f"{p:.2f}%" for p in activity))
    return 0


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opcert", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="worker pool size")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write dataset splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model or ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute per-location conformal parameters")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="coverage and error report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--qfield", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("test", "calibration"))
    p.add_argument("--z", type=float, default=1.96, help="uncalibrated band width")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("superres", help="transfer calibration to a finer grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--qfield", required=True)
    p.add_argument("--data-hi", dest="data_hi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z", type=float, default=1.96)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser("spiking-report", help="per-site spike activity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spiking_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # map known failures to stable exit codes
        for types, code in (
            (ConfigError, 2),
            ((FileNotFoundError, OSError, sio.FormatError), 3),
            ((no.TrainingDiverged, ens.EnsembleTrainingError), 4),
            ((ShapeError, GridError), 5),
            (gpm.GpFitError, 6),
            (no.NonSpikingModelError, 7),
            (ValueError, 2),
        ):
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
