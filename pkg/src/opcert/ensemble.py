"""Randomized-prior ensembles over the neural operator.

Each member pairs a trainable model with a frozen, randomly initialized
prior model; the member's prediction is trainable(u) + weight * prior(u).
Training a member against the data is equivalent to fitting the residual
left by its prior, which is how the prior injects output diversity where
the data does not pin the ensemble down. Members are fully independent:
each derives its own random streams from (seed, member index), so
training one in isolation reproduces its in-ensemble parameters bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import neuralop as no
from . import serialio as sio
from .core import Band, SeededRng

# stream offsets inside a member's block of the seed space
_MEMBER_BLOCK = 16
_INIT_OFF, _PRIOR_OFF, _BATCH_OFF = 0, 1, 2


class EnsembleTrainingError(RuntimeError):
    """A member aborted; message names the member."""


@dataclass
class RpMember:
    trainable: no.WnoModel
    prior: no.WnoModel
    prior_weight: float
    seed_stream: int

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        out = self.trainable.predict(inputs)
        if self.prior_weight != 0.0:
            prior_mean = 0.0 if self.prior.norm is None else self.prior.norm.out_mean
            out = out + self.prior_weight * (self.prior.predict(inputs) - prior_mean)
        return out

    def residual_targets(self, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Targets for the trainable model once the prior's share is removed."""
        if self.prior_weight == 0.0:
            return np.asarray(targets, dtype=np.float64)
        prior_mean = 0.0 if self.prior.norm is None else self.prior.norm.out_mean
        return targets - self.prior_weight * (self.prior.predict(inputs) - prior_mean)


@dataclass
class RpEnsemble:
    members: list
    config: no.WnoConfig
    prior_weight: float

    @property
    def size(self) -> int:
        return len(self.members)


def prior_config(config: no.WnoConfig) -> no.WnoConfig:
    """Prior architecture: two iterative layers, continuous activation."""
    return replace(config, layers=min(2, config.layers), activation="gelu")


def build_member(config: no.WnoConfig, prior_weight: float, rng: SeededRng, k: int) -> RpMember:
    base = rng.substream(_MEMBER_BLOCK * k)
    trainable = no.WnoModel.initialize(config, base.substream(_INIT_OFF))
    prior = no.WnoModel.initialize(prior_config(config), base.substream(_PRIOR_OFF))
    return RpMember(trainable, prior, prior_weight, base.stream)


def rp_train(
    inputs: np.ndarray,
    targets: np.ndarray,
    config: no.WnoConfig,
    n_c: int,
    prior_weight: float,
    rng: SeededRng,
    loss_config: no.LossConfig | None = None,
    epochs: int = 100,
    batch_size: int = 20,
    lr: float = 1e-3,
) -> tuple[RpEnsemble, list]:
    """Train n_c independent members on the same dataset.

    Returns the ensemble and per-member loss traces. Any member whose loss
    diverges aborts the whole training with the member id in the message.
    """
    if n_c < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n_c}")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("training dataset is empty")
    loss_config = loss_config or no.LossConfig("l2")
    norm = None
    if config.normalize:
        norm = no.NormStats(
            float(np.mean(inputs)),
            float(np.std(inputs)) or 1.0,
            float(np.mean(targets)),
            float(np.std(targets)) or 1.0,
        )
    members, traces = [], []
    for k in range(n_c):
        member = build_member(config, prior_weight, rng, k)
        if norm is not None:
            member.trainable.norm = norm
            member.prior.norm = norm
        residual = member.residual_targets(inputs, targets)
        batch_rng = rng.substream(_MEMBER_BLOCK * k + _BATCH_OFF)
        try:
            trace = no.train(
                member.trainable,
                inputs,
                residual,
                loss_config,
                epochs,
                batch_size,
                batch_rng,
                lr=lr,
            )
        except no.TrainingDiverged as exc:
            raise EnsembleTrainingError(f"member {k} diverged: {exc}") from exc
        members.append(member)
        traces.append(trace)
    return RpEnsemble(members, config, prior_weight), traces


def rp_predict(ensemble: RpEnsemble, inputs: np.ndarray):
    """Elementwise ensemble mean and population standard deviation."""
    preds = np.stack([m.predict(inputs) for m in ensemble.members])
    mean = preds.mean(axis=0)
    spread = np.sqrt(np.mean((preds - mean) ** 2, axis=0))
    return mean, spread


def initial_band(mean: np.ndarray, spread: np.ndarray, z: float = 1.96) -> Band:
    """Heuristic band [mean - z*spread, mean + z*spread]."""
    spread = np.asarray(spread, dtype=np.float64)
    if np.any(spread < 0):
        raise ValueError("spread must be non-negative")
    return Band(mean - z * spread, mean + z * spread)


def select_members(
    ensemble: RpEnsemble, inputs: np.ndarray, targets: np.ndarray, keep: int
) -> RpEnsemble:
    """Keep the members with the lowest validation error (optional step)."""
    if not 1 <= keep <= ensemble.size:
        raise ValueError(f"keep must be in [1, {ensemble.size}]")
    losses = [no.loss_l2(m.predict(inputs), targets) for m in ensemble.members]
    order = np.argsort(losses)[:keep]
    kept = [ensemble.members[i] for i in sorted(order)]
    return RpEnsemble(kept, ensemble.config, ensemble.prior_weight)


# --------------------------------------------------------------------------
# persistence: a directory of member checkpoints plus a manifest
# --------------------------------------------------------------------------


def save_ensemble(ensemble: RpEnsemble, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, member in enumerate(ensemble.members):
        no.save_model(member.trainable, directory / f"member_{i:03d}.ckpt")
        no.save_model(member.prior, directory / f"member_{i:03d}_prior.ckpt")
    sio.write_manifest(
        directory / "manifest.txt",
        {
            "kind": "rp",
            "n_c": ensemble.size,
            "prior_weight": repr(ensemble.prior_weight),
            "seed_streams": ",".join(str(m.seed_stream) for m in ensemble.members),
        },
    )


def load_ensemble(directory) -> RpEnsemble:
    directory = Path(directory)
    manifest = sio.read_manifest(directory / "manifest.txt")
    if manifest.get("kind") != "rp":
        raise sio.FormatError(f"not an ensemble checkpoint: {directory}")
    n_c = int(manifest["n_c"])
    weight = float(manifest["prior_weight"])
    streams = [int(s) for s in manifest["seed_streams"].split(",")]
    members = []
    for i in range(n_c):
        trainable = no.load_model(directory / f"member_{i:03d}.ckpt")
        prior = no.load_model(directory / f"member_{i:03d}_prior.ckpt")
        members.append(RpMember(trainable, prior, weight, streams[i]))
    return RpEnsemble(members, members[0].trainable.config, weight)
