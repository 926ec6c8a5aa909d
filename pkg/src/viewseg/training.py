"""Clamped binary cross-entropy, its gradient check, the prior map, and training loops."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .dataset import KNOWN_VIEWS, VIEW_SEED_OFFSET, DatasetIndex, DatasetSplit, MriSlice, SplitMode, ViewLabel
from .metrics import EvalResult, confusion, dice, SliceMetrics
from .model import LinkNet, LinkNetConfig, build_linknet, model_input

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    threshold: float = 0.5
    seed: int = 0
    clamp_epsilon: float = 1e-7
    concat_prior: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if not 0.0 < self.clamp_epsilon < 0.5:
            raise TrainingError(f"clamp_epsilon {self.clamp_epsilon} outside (0, 0.5)")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise TrainingError("max_epochs and patience must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise TrainingError(f"threshold {self.threshold} outside [0, 1]")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    best_epoch: int = -1  # 0-based
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def write_log(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_dice"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_dice), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Loss


def bce_loss(pred, target, eps: float = 1e-7):
    """Mean of -[y log p + (1-y) log(1-p)] with p clamped to [eps, 1-eps].

    Works on torch tensors (differentiable, returns a tensor) and on numpy
    arrays (returns a float).
    """
    if pred.shape != target.shape:
        raise TrainingError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        t = target.to(pred.dtype)
        if not torch.all((t == 0) | (t == 1)):
            raise TrainingError("target is not binary")
        p = pred.clamp(eps, 1.0 - eps)
        return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if not np.isin(t, (0.0, 1.0)).all():
        raise TrainingError("target is not binary")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def bce_grad(pred, target, eps: float = 1e-7) -> np.ndarray:
    """Closed-form d(bce_loss)/d(pred); zero where the clamp is active."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    q = np.clip(p, eps, 1.0 - eps)
    g = (-t / q + (1.0 - t) / (1.0 - q)) / p.size
    return np.where((p > eps) & (p < 1.0 - eps), g, 0.0)


def gradient_check(pred, target, step: float = 1e-6, eps: float = 1e-7) -> float:
    """Max relative error between :func:`bce_grad` and central differences."""
    if step <= 0:
        raise TrainingError("step must be positive")
    p = np.array(pred, dtype=np.float64)
    if not ((p > eps + step) & (p < 1.0 - eps - step)).all():
        raise TrainingError("pred must lie strictly inside the clamp interval")
    analytic = bce_grad(p, target, eps)
    numeric = np.empty_like(p)
    flat = p.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = bce_loss(p, target, eps)
        flat[i] = orig - step
        down = bce_loss(p, target, eps)
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric) / scale))


# ---------------------------------------------------------------------------
# Prior map


def compute_prior_map(train_masks: Sequence[np.ndarray], size: int | None = None) -> np.ndarray:
    """Per-pixel fraction of training masks marking tumor."""
    masks = list(train_masks)
    if not masks:
        raise TrainingError("cannot compute a prior from zero masks")
    shape = masks[0].shape
    if size is not None and shape != (size, size):
        raise TrainingError(f"masks are {shape}, expected {(size, size)}")
    acc = np.zeros(shape, dtype=np.float64)
    for m in masks:
        if m.shape != shape:
            raise TrainingError(f"mask shapes differ: {m.shape} vs {shape}")
        acc += m
    return (acc / len(masks)).astype(np.float32)


# ---------------------------------------------------------------------------
# Training loop


def _stack(slices: Sequence[MriSlice]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in slices]).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack([s.mask for s in slices]).astype(np.float32))[:, None]
    return x, y


def _batches(n: int, batch_size: int, gen: torch.Generator | None) -> list[torch.Tensor]:
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    chunks = list(order.split(batch_size))
    # a trailing batch of one breaks batch-norm statistics on small inputs
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat(chunks[-2:])
        chunks.pop()
    return chunks


Evaluator = Callable[[LinkNet, torch.Tensor, torch.Tensor, Sequence[MriSlice]], tuple[float, float]]


def default_evaluator(config: TrainConfig) -> Evaluator:
    """(val loss, val mean Dice) in evaluation mode."""

    @torch.no_grad()
    def run(model, x, y, slices):
        model.eval()
        losses, rows = [], []
        for idx in _batches(len(x), max(config.batch_size, 16), None):
            prob = model(model_input(model, x[idx]))
            losses.append(float(bce_loss(prob, y[idx], config.clamp_epsilon)) * len(idx))
            pred = (prob >= config.threshold).cpu().numpy()[:, 0]
            for j, i in enumerate(idx.tolist()):
                c = confusion(pred[j], slices[i].mask)
                rows.append(SliceMetrics(slices[i].slice_id, slices[i].view, c, dice(c)))
        return sum(losses) / len(x), EvalResult.from_slices(rows).mean_dice

    return run


def train_model(
    model: LinkNet,
    train: Sequence[MriSlice],
    val: Sequence[MriSlice],
    config: TrainConfig = TrainConfig(),
    evaluator: Evaluator | None = None,
) -> tuple[LinkNet, TrainReport]:
    """Adam on clamped BCE; keeps the parameters of the best-val-Dice epoch.

    Stops early after ``config.patience`` epochs without val-Dice improvement.
    """
    if not train or not val:
        raise TrainingError("train and validation sets must be non-empty")
    if config.concat_prior:
        if model.config.in_channels != 2:
            raise TrainingError("concat_prior needs a model built with in_channels=2")
        prior = compute_prior_map([s.mask for s in train])
        model.prior = torch.from_numpy(prior)[None, None]
    elif model.config.in_channels != 1:
        raise TrainingError(f"model expects {model.config.in_channels} input channels; enable concat_prior")

    device = torch.device(config.device)
    model.to(device)
    if model.prior is not None:
        model.prior = model.prior.to(device)
    evaluator = evaluator or default_evaluator(config)
    x_tr, y_tr = (t.to(device) for t in _stack(train))
    x_va, y_va = (t.to(device) for t in _stack(val))

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    report = TrainReport()
    best_dice, best_state, stale = -math.inf, None, 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        model.train()
        total = 0.0
        for idx in _batches(len(x_tr), config.batch_size, gen):
            opt.zero_grad()
            loss = bce_loss(model(model_input(model, x_tr[idx])), y_tr[idx], config.clamp_epsilon)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        report.train_loss.append(total / len(x_tr))
        val_loss, val_dice = evaluator(model, x_va, y_va, val)
        report.val_loss.append(float(val_loss))
        report.val_dice.append(float(val_dice))
        log.info("epoch %d: train %.4f val %.4f dice %.4f", epoch + 1, report.train_loss[-1], val_loss, val_dice)
        if val_dice > best_dice:
            best_dice, stale = val_dice, 0
            report.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    report.wall_time = time.perf_counter() - t0
    return model, report


def fit_batch(model: LinkNet, images: torch.Tensor, masks: torch.Tensor, steps: int, config: TrainConfig = TrainConfig()) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss before each step."""
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = bce_loss(model(model_input(model, images)), masks, config.clamp_epsilon)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def _model_config(base: LinkNetConfig, config: TrainConfig, init_seed: int) -> LinkNetConfig:
    return replace(base, in_channels=2 if config.concat_prior else 1, init_seed=init_seed)


def train_single(
    index: DatasetIndex,
    split: DatasetSplit,
    config: TrainConfig = TrainConfig(),
    model_config: LinkNetConfig = LinkNetConfig(),
) -> tuple[LinkNet, TrainReport]:
    split = split.merged()
    model = build_linknet(_model_config(model_config, config, config.seed))
    part = split.partition()
    return train_model(model, index.select(part.train), index.select(part.val), config)


def train_per_view(
    index: DatasetIndex,
    split: DatasetSplit,
    config: TrainConfig = TrainConfig(),
    model_config: LinkNetConfig = LinkNetConfig(),
) -> dict[ViewLabel, tuple[LinkNet, TrainReport]]:
    """One model per view; each view's seed is ``config.seed`` plus a fixed offset."""
    if split.mode is not SplitMode.PER_VIEW:
        raise TrainingError("train_per_view needs a per-view split")
    parts = {v: split.partition(v) for v in KNOWN_VIEWS}
    for v, p in parts.items():
        if not p.train:
            raise TrainingError(f"view {v.value} has no training slices")
        if not p.val:
            raise TrainingError(f"view {v.value} has no validation slices")
    out = {}
    for v in KNOWN_VIEWS:
        seed = config.seed + VIEW_SEED_OFFSET[v]
        model = build_linknet(_model_config(model_config, config, seed))
        p = parts[v]
        out[v] = train_model(model, index.select(p.train), index.select(p.val), replace(config, seed=seed))
    return out
