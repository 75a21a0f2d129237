"""Imitation learning: regress model actions onto expert actions.

A batch is a set of whole frames (every agent at one timestep), so each
sample keeps its own communication graph. The leader is masked out of the
loss because its label is the random-walk command, not flocking behavior.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .flocksim import EpisodeRecord
from .model import ModelConfig, build_model, save_model
from .numkit import ContractError, OptimState, Tensor, as_tensor, backward, no_grad, optim_step
from .seeding import rng_for

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class FrameSet:
    obs: np.ndarray  # (F, n, 6)
    adjacency: np.ndarray  # (F, n, n)
    actions: np.ndarray  # (F, n, 3)
    mask: np.ndarray  # (F, n) True for agents that count in the loss
    index: np.ndarray  # (F, 2) episode, t

    def __len__(self) -> int:
        return self.obs.shape[0]

    def subset(self, rows) -> FrameSet:
        rows = np.asarray(rows, dtype=np.int64)
        return FrameSet(self.obs[rows], self.adjacency[rows], self.actions[rows], self.mask[rows], self.index[rows])


def frames_from_episodes(episodes: list[EpisodeRecord]) -> FrameSet:
    obs, adj, act, mask, idx = [], [], [], [], []
    for e, ep in enumerate(episodes):
        T, n = ep.positions.shape[:2]
        obs.append(np.concatenate([ep.positions, ep.velocities], axis=-1))
        adj.append(ep.adjacency)
        act.append(ep.expert_actions)
        m = np.ones((T, n), dtype=bool)
        m[np.arange(T), ep.leader_index] = False
        mask.append(m)
        idx.append(np.stack([np.full(T, e), np.arange(T)], axis=1))
    if not obs:
        raise ContractError("no frames")
    return FrameSet(
        np.concatenate(obs), np.concatenate(adj), np.concatenate(act), np.concatenate(mask), np.concatenate(idx)
    )


def mse_loss(predicted, target, mask) -> Tensor:
    """Mean squared componentwise error over the unmasked agents."""
    predicted = as_tensor(predicted)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if predicted.shape != target.shape:
        raise ContractError(f"prediction {predicted.shape} and target {target.shape} differ")
    if mask.shape != target.shape[:-1]:
        raise ContractError(f"mask {mask.shape} does not match agents {target.shape[:-1]}")
    count = mask.sum() * target.shape[-1]
    if count == 0:
        raise ContractError("every agent is masked")
    diff = predicted - target
    return ((diff * diff) * mask[..., None].astype(np.float64)).sum() * (1.0 / count)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ContractError("val_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None
    schedule_digest: str = ""
    n_train_frames: int = 0
    n_val_frames: int = 0

    def to_dict(self) -> dict:
        """Serializable form; wall time is left out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("wall_time")
        return d


def split_frames(frames: FrameSet, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out whole episodes when there are several, otherwise single frames.

    With only one frame there is nothing to hold out and the validation set
    is the training frame itself.
    """
    rng = rng_for(seed, "split")
    episodes = np.unique(frames.index[:, 0])
    if len(episodes) >= 2:
        n_val = min(len(episodes) - 1, max(1, int(round(val_fraction * len(episodes)))))
        val_eps = rng.permutation(episodes)[:n_val]
        is_val = np.isin(frames.index[:, 0], val_eps)
    elif len(frames) >= 2:
        n_val = min(len(frames) - 1, max(1, int(round(val_fraction * len(frames)))))
        is_val = np.zeros(len(frames), dtype=bool)
        is_val[rng.permutation(len(frames))[:n_val]] = True
    else:
        all_rows = np.arange(len(frames))
        return all_rows, all_rows
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def batch_schedule(n_frames: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatches of training-frame positions for one epoch.

    Depends only on the seed, so every model variant sees the same batches.
    """
    order = rng_for(seed, "batches", epoch).permutation(n_frames)
    return [order[i : i + batch_size] for i in range(0, n_frames, batch_size)]


def evaluate_validation(model, frames: FrameSet, chunk: int = 256) -> float:
    """Pooled MSE over the held-out frames; parameters are not touched."""
    if len(frames) == 0:
        raise ContractError("no validation frames")
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(frames), chunk):
            part = frames.subset(np.arange(start, min(start + chunk, len(frames))))
            pred = model.forward(part.obs, part.adjacency).data
            sq = ((pred - part.actions) ** 2) * part.mask[..., None]
            total += float(sq.sum())
            count += int(part.mask.sum()) * part.actions.shape[-1]
    return total / count


def train(frames: FrameSet, cfg: TrainConfig, model=None) -> tuple[TrainReport, object]:
    """Minibatch Adam on the training split; returns the report and the model."""
    if len(frames) == 0:
        raise ContractError("empty dataset")
    if model is None:
        model = build_model(cfg.model)
    if frames.obs.shape[-1] != cfg.model.obs_dim or frames.actions.shape[-1] != cfg.model.action_dim:
        raise ContractError("frame widths do not match the model")
    train_rows, val_rows = split_frames(frames, cfg.val_fraction, cfg.seed)
    train_set, val_set = frames.subset(train_rows), frames.subset(val_rows)
    report = TrainReport(n_train_frames=len(train_set), n_val_frames=len(val_set))
    params = model.parameters()
    state = OptimState.for_params(params, learning_rate=cfg.learning_rate)
    digest = hashlib.sha256()
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        weighted = 0.0
        for rows in batch_schedule(len(train_set), cfg.batch_size, cfg.seed, epoch):
            digest.update(train_set.index[rows].tobytes())
            batch = train_set.subset(rows)
            for p in params:
                p.zero_grad()
            loss = mse_loss(model.forward(batch.obs, batch.adjacency), batch.actions, batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch} ({cfg.model.variant}, K={cfg.model.K})"
                )
            backward(loss)
            optim_step(state, params, [p.grad for p in params])
            weighted += value * len(rows)
        report.train_loss.append(weighted / len(train_set))
        report.val_loss.append(evaluate_validation(model, val_set))
        log.info(
            "%s K=%d epoch %d train %.5f val %.5f",
            cfg.model.variant, cfg.model.K, epoch, report.train_loss[-1], report.val_loss[-1],
        )
    report.wall_time = time.perf_counter() - started
    report.schedule_digest = digest.hexdigest()
    return report, model


def validation_frames(frames: FrameSet, cfg: TrainConfig) -> FrameSet:
    return frames.subset(split_frames(frames, cfg.val_fraction, cfg.seed)[1])


def smoothed_divergence(losses: list[float], window: int = 5, tolerance: float = 0.10) -> bool:
    """True when the moving-average loss ever rises more than ``tolerance``
    above its running minimum."""
    if len(losses) < window:
        return False
    avg = np.convolve(losses, np.ones(window) / window, mode="valid")
    running_min = np.minimum.accumulate(avg)
    return bool(np.any(avg > running_min * (1.0 + tolerance)))


def frozen_copy(model):
    return copy.deepcopy(model)


def write_report(path, report: TrainReport, run_config: dict) -> None:
    doc = {"format_version": REPORT_FORMAT_VERSION, "config": run_config, "report": report.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_loss_csv(path, report: TrainReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, (tr, va) in enumerate(zip(report.train_loss, report.val_loss)):
            writer.writerow([epoch, repr(tr), repr(va)])


def save_trained(path, model, cfg: TrainConfig, report: TrainReport) -> None:
    save_model(
        path,
        model,
        {
            "train_config": {k: v for k, v in asdict(cfg).items() if k != "model"},
            "schedule_digest": report.schedule_digest,
            "final_val_loss": report.val_loss[-1] if report.val_loss else None,
        },
    )
