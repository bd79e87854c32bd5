"""Relative-L2 training with query subsampling and the LION optimizer."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint, save_checkpoint
from .data.dataset import NormalizedSample, Normalizer, load_dataset
from .data.types import PRESSURE, SURFACE, VELOCITY, VOLUME, FieldSample
from .errors import (
    InvalidConfigError,
    NonFiniteLossError,
    ShapeMismatchError,
    SubsampleTooLargeError,
    ZeroNormTargetError,
)
from .model import ModelConfig, SmartModel

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss_surface", "loss_volume", "loss_total")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 10
    batch_size: int = 1
    m_surface: int = 1024
    m_volume: int = 1024
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0
    val_dir: str | None = None
    val_chunk_size: int = 4096

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfigError("lr must be positive")
        if self.batch_size != 1:
            raise InvalidConfigError("only batch_size = 1 is supported")
        if self.m_surface < 1 or self.m_volume < 1:
            raise InvalidConfigError("query subsample counts must be >= 1")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidConfigError("grad_clip must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def split_config(data: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split one flat JSON config into model and training parts."""
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - model_keys - train_keys
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig(**{k: v for k, v in data.items() if k in model_keys})
    train = TrainConfig(**{k: v for k, v in data.items() if k in train_keys})
    return model, train


# ----------------------------------------------------------------------------
# loss


def rel_l2(pred, truth, channels=None) -> dc.DiffArray:
    """Mean over ``channels`` of ``||pred_c - truth_c|| / ||truth_c||``."""
    pred = dc.as_diff(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs truth {truth.shape}")
    cols = np.arange(truth.shape[1]) if channels is None else np.asarray(channels, dtype=np.int64)
    t = truth[:, cols]
    denom = np.sqrt(np.sum(t * t, axis=0))
    if np.any(denom == 0.0):
        raise ZeroNormTargetError(f"zero-norm truth in channels {cols[denom == 0.0].tolist()}")
    p = pred if channels is None else pred[:, cols]
    num = dc.sqrt(dc.sum_(dc.square(dc.sub(p, t)), axis=0))
    return dc.mean(dc.div(num, denom))


def total_loss(pred, truth: np.ndarray, kind: np.ndarray):
    """Surface (pressure) plus volume (velocity) relative L2.

    Returns ``(total, surface, volume)``.
    """
    pred = dc.as_diff(pred)
    surf = np.flatnonzero(kind == SURFACE)
    vol = np.flatnonzero(kind == VOLUME)
    if surf.size == 0 or vol.size == 0:
        raise ShapeMismatchError("need at least one surface and one volume query")
    ls = rel_l2(pred[np.ix_(surf, [PRESSURE])], truth[np.ix_(surf, [PRESSURE])])
    lv = rel_l2(pred[np.ix_(vol, VELOCITY)], truth[np.ix_(vol, VELOCITY)])
    return dc.add(ls, lv), ls, lv


# ----------------------------------------------------------------------------
# subsampling


def subsample_rows(kind: np.ndarray, m_surface: int, m_volume: int, rng) -> np.ndarray:
    """Row indices: ``m_surface`` surface then ``m_volume`` volume rows, uniform w/o replacement."""
    rng = np.random.default_rng(rng)
    surf = np.flatnonzero(kind == SURFACE)
    vol = np.flatnonzero(kind == VOLUME)
    if m_surface > surf.size or m_volume > vol.size:
        raise SubsampleTooLargeError(
            f"requested {m_surface}/{m_volume} rows, have {surf.size} surface / {vol.size} volume"
        )
    return np.concatenate([rng.choice(surf, m_surface, replace=False), rng.choice(vol, m_volume, replace=False)])


def subsample_queries(sample: FieldSample, m_surface: int, m_volume: int, rng) -> FieldSample:
    return sample.select(subsample_rows(sample.queries.kind, m_surface, m_volume, rng))


# ----------------------------------------------------------------------------
# optimizer


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


class Lion:
    """Sign-of-interpolated-momentum optimizer.

    ``update = sign(beta1 m + (1 - beta1) g)``;
    ``theta -= lr (update + wd theta)``;
    ``m = beta2 m + (1 - beta2) g``.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.99, weight_decay: float = 0.0):
        if lr < 0:
            raise InvalidConfigError("lr must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` arrays in place."""
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {theta.shape}")
            m = self.state.get(name)
            if m is None:
                m = self.state[name] = np.zeros_like(theta)
            update = np.sign(self.beta1 * m + (1.0 - self.beta1) * g)
            theta -= self.lr * (update + self.weight_decay * theta)
            m *= self.beta2
            m += (1.0 - self.beta2) * g


def lion_step(params, grads, state, lr, beta1=0.9, beta2=0.99, weight_decay=0.0):
    """Functional form of one :class:`Lion` update (``state`` is mutated)."""
    opt = Lion(lr, beta1, beta2, weight_decay)
    opt.state = state
    opt.step(params, grads)
    return params, state


# ----------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_surface: float
    loss_volume: float
    loss_total: float


def train_step(
    model: SmartModel,
    sample: NormalizedSample,
    rows: np.ndarray,
    encoder_seed,
    opt: Lion,
    grad_clip=None,
    normalizer: Normalizer | None = None,
):
    """One optimizer step on the query rows ``rows`` of ``sample``.

    With a ``normalizer`` the loss compares denormalized predictions to
    physical targets. Relative errors of z-scored channels are badly
    conditioned: a sample whose field sits near the dataset mean has a
    near-zero normalized norm.
    """
    pred = model.forward(sample.geometry, sample.params, sample.queries[rows], encoder_seed)
    truth = sample.targets[rows]
    if normalizer is not None:
        pred = dc.add(dc.mul(pred, normalizer.target_std), normalizer.target_mean)
        truth = normalizer.targets_inverse(truth)
    total, ls, lv = total_loss(pred, truth, sample.kind[rows])
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(f"loss became {total.item()}")
    params = list(model.params.values())
    dc.backward(total, params)
    grads = {name: p.grad for name, p in model.params.items()}
    if grad_clip is not None:
        grads, _ = clip_grad_norm(grads, grad_clip)
    opt.step({name: p.data for name, p in model.params.items()}, grads)
    model.params.zero_grad()
    return total.item(), ls.item(), lv.item()


def fit(
    model: SmartModel,
    samples: list[NormalizedSample],
    cfg: TrainConfig,
    val: list[FieldSample] | None = None,
    normalizer: Normalizer | None = None,
    on_step=None,
) -> list[StepRecord]:
    """Train ``model`` in place on normalized samples; returns the step log.

    ``normalizer`` (the one that produced ``samples``) switches the loss to
    physical units; without it the loss is taken in model units.
    """
    if not samples:
        raise InvalidConfigError("no training samples")
    opt = Lion(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for i in order:
            s = samples[i]
            rows = subsample_rows(s.kind, cfg.m_surface, cfg.m_volume, rng)
            enc_seed = int(rng.integers(2**63))
            lt, ls, lv = train_step(model, s, rows, enc_seed, opt, cfg.grad_clip, normalizer)
            rec = StepRecord(epoch, step, ls, lv, lt)
            history.append(rec)
            epoch_losses.append(lt)
            if on_step is not None:
                on_step(rec)
            step += 1
        msg = f"epoch {epoch}: mean train loss {np.mean(epoch_losses):.5f}"
        if val and normalizer is not None:
            from .evaluation import evaluate_samples

            report = evaluate_samples(model, normalizer, val, chunk_size=cfg.val_chunk_size)
            msg += (
                f", held-out rel L2 surface {report.aggregate['rel_l2_surface_mean']:.5f}"
                f" volume {report.aggregate['rel_l2_volume_mean']:.5f}"
            )
        log.info(msg)
    return history


def write_loss_log(path: str | os.PathLike, history: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in history:
            writer.writerow([r.epoch, r.step, repr(r.loss_surface), repr(r.loss_volume), repr(r.loss_total)])


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_dir: str | os.PathLike,
    out: str | os.PathLike,
    log_path: str | os.PathLike | None = None,
) -> Checkpoint:
    """Train on every sample under ``dataset_dir`` and write a checkpoint to ``out``."""
    samples = load_dataset(dataset_dir)
    if samples[0].params.size != model_cfg.n_params:
        raise InvalidConfigError(
            f"dataset has {samples[0].params.size} simulation parameters, config says {model_cfg.n_params}"
        )
    normalizer = Normalizer.fit(samples)
    normalized = [normalizer.apply(s) for s in samples]
    val = load_dataset(train_cfg.val_dir) if train_cfg.val_dir else None
    model = SmartModel(model_cfg)
    history = fit(model, normalized, train_cfg, val=val, normalizer=normalizer)
    ckpt = Checkpoint(model=model, normalizer=normalizer, train_config=train_cfg.to_dict())
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    if log_path is not None:
        write_loss_log(log_path, history)
    return ckpt
