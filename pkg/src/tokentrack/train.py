"""Clip-based training with two learning-rate groups and a step decay."""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import tensor as T
from .losses import (GIOU_WEIGHT, L1_WEIGHT, LossBreakdown, focal_loss, giou_loss, l1_loss,
                     make_target_map, target_peak, total_loss)
from .boxes import BBox
from .model import TrackerModel
from .world import ClipBatch, SamplerConfig, SyntheticSequence, sample_clips

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr_backbone: float = 4e-5
    lr_other: float = 4e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    decay_fraction: float = 0.8
    decay_factor: float = 10.0

    def __post_init__(self):
        if not self.lr_backbone < self.lr_other:
            raise ValueError("lr_backbone must be smaller than lr_other")
        if not 1 <= self.decay_epoch <= self.epochs:
            raise ValueError("decay epoch outside [1, epochs]")

    @property
    def decay_epoch(self) -> int:
        return max(1, int(round(self.decay_fraction * self.epochs)))


def lr_schedule(epoch: int, cfg: OptimConfig) -> tuple[float, float]:
    """Base rates before the decay epoch; divided by ``decay_factor`` at and after it.

    Epochs are 1-based and the decay epoch is ``round(decay_fraction * epochs)``:
    epoch 120 of 150, epoch 32 of 40, epoch 8 of 10.
    """
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch >= cfg.decay_epoch:
        return cfg.lr_backbone / cfg.decay_factor, cfg.lr_other / cfg.decay_factor
    return cfg.lr_backbone, cfg.lr_other


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    last: LossBreakdown | None = None


def optimizer_step(named_params: Iterable, state: TrainState, cfg: OptimConfig,
                   lrs: dict[str, float]) -> None:
    """One decoupled-weight-decay adaptive-moment update.

    ``named_params`` yields ``(name, param, group)``; ``lrs`` maps each group
    to its learning rate. Parameters without a gradient are left untouched.
    """
    items = [(n, p, g) for n, p, g in named_params if p.grad is not None]
    bad = [n for n, p, _ in items if not np.all(np.isfinite(p.grad))]
    if bad:
        raise TrainingAborted(f"non-finite gradients in {bad[:5]} (step {state.step})")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p, group in items:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lrs[group]
        p.data = p.data - lr * ((m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data)


def clip_loss(model: TrackerModel, clip: ClipBatch, giou_weight: float = GIOU_WEIGHT,
              l1_weight: float = L1_WEIGHT) -> LossBreakdown:
    """Mean per-frame ``cls + 2 giou + 5 l1`` over all ``n*m`` frames of the clips.

    Box regression is read at the ground-truth peak cell.
    """
    out = model.clip_forward(clip.template, clip.search)
    G = model.cfg.grid
    gt = clip.boxes.reshape(-1, 4)
    B = gt.shape[0]
    boxes = [BBox.from_array(b) for b in gt]
    targets = np.stack([make_target_map(b, G) for b in boxes])
    peaks = np.array([target_peak(b, G) for b in boxes])
    rows, I, J = np.arange(B), peaks[:, 0], peaks[:, 1]
    off = out.maps.offset[rows, I, J]
    size = out.maps.size[rows, I, J]
    center = (off + np.stack([J, I], axis=-1).astype(float)) * (1.0 / G)
    pred = T.concat([center, size], axis=-1)
    cls = focal_loss(out.maps.score, targets).mean()
    giou = giou_loss(pred, gt).mean()
    l1 = l1_loss(pred, gt).mean()
    return total_loss(cls, giou, l1, giou_weight, l1_weight)


def _param_groups(model: TrackerModel):
    for name, p in model.named_parameters():
        yield name, p, ("backbone" if name.startswith("backbone.") else "other")


@dataclass(frozen=True)
class TrainConfig:
    clips_per_unit: int = 4          # n
    pairs_per_epoch: int = 2000
    accumulate: int = 1
    prefetch: bool = True
    giou_weight: float = GIOU_WEIGHT
    l1_weight: float = L1_WEIGHT

    def steps_per_epoch(self, m: int) -> int:
        return math.ceil(self.pairs_per_epoch / (self.clips_per_unit * m * self.accumulate))


def _batches(sequences, n, m, seed, sampler, count, start_index):
    for k in range(start_index, start_index + count):
        yield k, sample_clips(sequences, n, m, seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]),
                              cfg=sampler)


def _prefetched(gen, size: int = 2):
    """Run ``gen`` in a producer thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()

    def produce():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surface in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


class Trainer:
    def __init__(self, model: TrackerModel, sequences: Sequence[SyntheticSequence],
                 optim: OptimConfig = OptimConfig(), train: TrainConfig = TrainConfig(),
                 sampler: SamplerConfig = SamplerConfig(), seed: int = 0,
                 log_file: TextIO | None = None, state: TrainState | None = None):
        self.model = model
        self.sequences = sequences
        self.optim = optim
        self.train_cfg = train
        self.sampler = sampler
        self.seed = seed
        self.log_file = log_file
        self.state = state or TrainState()
        self.history: list[LossBreakdown] = []

    @property
    def m(self) -> int:
        return self.model.cfg.window

    def step(self, clips: Sequence[ClipBatch], lrs: tuple[float, float]) -> LossBreakdown:
        """Accumulate gradients over ``clips`` (one batch unit each) and update once."""
        self.model.zero_grad()
        parts = []
        for clip in clips:
            lb = clip_loss(self.model, clip, self.train_cfg.giou_weight, self.train_cfg.l1_weight)
            T.scale(lb.total, 1.0 / len(clips)).backward()
            parts.append(lb.floats())
        k = len(parts)
        br = total_loss(sum(p.cls for p in parts) / k, sum(p.giou for p in parts) / k,
                        sum(p.l1 for p in parts) / k, self.train_cfg.giou_weight, self.train_cfg.l1_weight)
        if not math.isfinite(br.total):
            raise TrainingAborted(f"non-finite loss at step {self.state.step}")
        optimizer_step(_param_groups(self.model), self.state, self.optim,
                       {"backbone": lrs[0], "other": lrs[1]})
        self.state.last = br
        self.history.append(br)
        if self.log_file is not None:
            self.log_file.write(f"{self.state.step} {self.state.epoch} {float(lrs[1])!r} " +
                                " ".join(repr(float(v)) for v in (br.cls, br.giou, br.l1, br.total)) + "\n")
            self.log_file.flush()
        return br

    def run_epoch(self, on_step: Callable[[int, LossBreakdown], None] | None = None) -> None:
        cfg = self.train_cfg
        per_epoch = cfg.steps_per_epoch(self.m)
        lrs = lr_schedule(self.state.epoch, self.optim)
        first = (self.state.epoch - 1) * per_epoch * cfg.accumulate
        gen = _batches(self.sequences, cfg.clips_per_unit, self.m, self.seed, self.sampler,
                       per_epoch * cfg.accumulate, first)
        if cfg.prefetch:
            gen = _prefetched(gen)
        pending = []
        for _, clip in gen:
            pending.append(clip)
            if len(pending) == cfg.accumulate:
                br = self.step(pending, lrs)
                pending = []
                if on_step:
                    on_step(self.state.step, br)
        self.state.epoch += 1

    def fit(self, on_step=None) -> list[LossBreakdown]:
        while self.state.epoch <= self.optim.epochs:
            self.run_epoch(on_step)
        return self.history
