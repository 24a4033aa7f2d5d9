"""Cosine embedding loss, labelled pair sampling, and the local/global contrastive pretraining stages."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .checkpoint import Checkpoint, Provenance
from .data import Dataset
from .errors import SamplingError, SpecError, TrainingError, ValidationError
from .network import BlockStack, embed_global, forward_block, tap
from .optim import Adam, make_schedule
from .tensor import Tensor, cosine_similarity, mean, mul, no_grad, relu

SAMPLING_MODES = ("balanced", "uniform")
LOCAL_SCHEDULES = ("joint", "sequential")


def cosine_embedding_loss(e1: Tensor, e2: Tensor, same_class, reduction: str = "mean") -> Tensor:
    """Per pair: 1 - cos if the labels agree, max(0, cos) otherwise (no margin).

    ``reduction="none"`` returns the per-pair losses [B] instead of their mean.
    """
    if not (np.isfinite(e1.data).all() and np.isfinite(e2.data).all()):
        raise ValidationError("cosine_embedding_loss: embeddings contain NaN or Inf")
    same = np.asarray(same_class, dtype=bool).reshape(-1)
    if same.shape[0] != e1.shape[0]:
        raise ValidationError(f"{same.shape[0]} flags for {e1.shape[0]} pairs")
    cos = cosine_similarity(e1, e2)
    m = Tensor(same, dtype=cos.dtype)
    per_pair = mul(1 - cos, m) + mul(relu(cos), Tensor(~same, dtype=cos.dtype))
    if reduction == "none":
        return per_pair
    return mean(per_pair)


# -- pair sampling ----------------------------------------------------------------------
@dataclass
class PairBatch:
    x1: np.ndarray
    x2: np.ndarray
    same_class: np.ndarray
    i1: np.ndarray
    i2: np.ndarray

    def __len__(self) -> int:
        return len(self.same_class)


def _draw_other(rng, members: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    """Uniform draw from ``members`` skipping each ``exclude`` entry (which must be a member)."""
    pos = np.searchsorted(members, exclude)
    j = rng.integers(0, len(members) - 1, size=len(exclude))
    return members[j + (j >= pos)]


def sample_pair_indices(labels, count: int, positive_fraction: float = 0.5, seed=0,
                        sampling: str = "balanced") -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i1, i2) with i1 != i2.

    ``balanced``: exactly round(count * positive_fraction) same-class pairs in
    shuffled order; x1 is uniform over the eligible samples and x2 uniform over
    the required class. ``uniform``: both uniform over all samples.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise SamplingError("need at least two samples to form pairs")
    if count < 1:
        raise SamplingError("count must be positive")
    rng = np.random.default_rng(seed)
    if sampling == "uniform":
        i1 = rng.integers(0, n, size=count)
        j = rng.integers(0, n - 1, size=count)
        return i1, j + (j >= i1)
    if sampling != "balanced":
        raise SpecError(f"unknown sampling mode {sampling!r}")
    if not 0 < positive_fraction <= 1:
        raise SamplingError(f"positive_fraction must be in (0, 1], got {positive_fraction}")

    members = [np.flatnonzero(labels == c) for c in (0, 1)]
    n_pos = int(round(count * positive_fraction))
    same = np.zeros(count, dtype=bool)
    same[:n_pos] = True
    same = rng.permutation(same)
    i1 = np.empty(count, dtype=np.int64)
    i2 = np.empty(count, dtype=np.int64)

    if n_pos:
        eligible = np.concatenate([m for m in members if len(m) >= 2])
        if eligible.size == 0:
            raise SamplingError("no class has two samples; cannot form same-class pairs")
        eligible.sort()
        a = eligible[rng.integers(0, eligible.size, size=n_pos)]
        b = np.empty_like(a)
        for c in (0, 1):
            sel = labels[a] == c
            if sel.any():
                b[sel] = _draw_other(rng, members[c], a[sel])
        i1[same], i2[same] = a, b
    if n_pos < count:
        if any(len(m) == 0 for m in members):
            raise SamplingError("dataset has a single class; cannot form different-class pairs")
        a = rng.integers(0, n, size=count - n_pos)
        other = 1 - labels[a]
        b = np.empty_like(a)
        for c in (0, 1):
            sel = other == c
            b[sel] = members[c][rng.integers(0, len(members[c]), size=int(sel.sum()))]
        i1[~same], i2[~same] = a, b
    return i1, i2


def sample_pairs(ds: Dataset, count: int, positive_fraction: float = 0.5, seed=0,
                 batch_size: int = 10, sampling: str = "balanced") -> Iterator[PairBatch]:
    i1, i2 = sample_pair_indices(ds.labels, count, positive_fraction, seed, sampling)
    for start in range(0, count, batch_size):
        a, b = i1[start:start + batch_size], i2[start:start + batch_size]
        yield PairBatch(ds.images[a], ds.images[b], ds.labels[a] == ds.labels[b], a, b)


# -- stages -----------------------------------------------------------------------------------
@dataclass
class ContrastiveStageConfig:
    epochs: int = 5
    pairs_per_epoch: int | None = None  # None -> size of the training split
    batch_size: int = 10
    learning_rate: float = 1e-4
    positive_fraction: float = 0.5
    seed: int = 0
    sampling: str = "balanced"
    local_schedule: str = "joint"
    anneal: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise SpecError(f"invalid contrastive stage config {self}")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise SpecError("pairs_per_epoch must be positive")
        if self.sampling not in SAMPLING_MODES:
            raise SpecError(f"sampling must be one of {SAMPLING_MODES}")
        if self.local_schedule not in LOCAL_SCHEDULES:
            raise SpecError(f"local_schedule must be one of {LOCAL_SCHEDULES}")


@dataclass
class LossRecord:
    stage: str
    block_index: int  # -1 for whole-network losses
    epoch: int
    batch: int
    loss: float


@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list[LossRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        if not self.losses:
            return None
        last = max(r.epoch for r in self.losses)
        vals = [r.loss for r in self.losses if r.epoch == last]
        return float(np.mean(vals))


def write_loss_csv(path, records: list[LossRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "block_index", "epoch", "batch", "loss"])
        for r in records:
            w.writerow([r.stage, r.block_index, r.epoch, r.batch, repr(r.loss)])


def _epoch_batches(ds: Dataset, cfg: ContrastiveStageConfig, epoch: int) -> Iterator[PairBatch]:
    count = cfg.pairs_per_epoch or len(ds)
    seed = np.random.SeedSequence([cfg.seed, epoch])
    return sample_pairs(ds, count, cfg.positive_fraction, seed, cfg.batch_size, cfg.sampling)


def _steps_per_epoch(ds: Dataset, cfg: ContrastiveStageConfig) -> int:
    return -(-(cfg.pairs_per_epoch or len(ds)) // cfg.batch_size)


def _pair_loss(model: BlockStack, h_out: Tensor, same: np.ndarray, where: str) -> Tensor:
    e = tap(model, h_out)
    b = len(same)
    loss = cosine_embedding_loss(e[:b], e[b:], same)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite contrastive loss ({where})")
    return loss


def _stacked(batch: PairBatch, dtype) -> Tensor:
    return Tensor(np.concatenate([batch.x1, batch.x2]), dtype=dtype)


def local_pretrain(stack: BlockStack, ds: Dataset, cfg: ContrastiveStageConfig,
                   parent: Checkpoint | None = None, config_digest: str | None = None) -> StageResult:
    """Per-block contrastive training; block i only ever sees the gradient of its own loss.

    Works on a copy of ``stack``. With the joint schedule every block is
    updated on every batch, each by its own Adam instance.
    """
    model = stack.copy()
    dtype = model.blocks[0].weight.dtype
    n = model.n
    total = cfg.epochs * _steps_per_epoch(ds, cfg)
    opts = [Adam(model.block_parameters(i), lr=cfg.learning_rate) for i in range(n)]
    scheds = [make_schedule(cfg.learning_rate, total, cfg.anneal) for _ in range(n)]
    records: list[LossRecord] = []

    def update(i: int, h_in: Tensor, batch: PairBatch, epoch: int, b: int) -> Tensor:
        where = f"stage local, block {i}, epoch {epoch}, batch {b}"
        h_out = forward_block(model, i, h_in, detach_input=True)
        loss = _pair_loss(model, h_out, batch.same_class, where)
        loss.backward()
        opts[i].step(lr=scheds[i].lr(), context=where)
        scheds[i].advance()
        records.append(LossRecord("local", i, epoch, b, float(loss.data)))
        return h_out

    if cfg.local_schedule == "joint":
        for epoch in range(cfg.epochs):
            for b, batch in enumerate(_epoch_batches(ds, cfg, epoch)):
                h = _stacked(batch, dtype)
                for i in range(n):
                    h = update(i, h, batch, epoch, b)
    else:
        for i in range(n):
            for epoch in range(cfg.epochs):
                for b, batch in enumerate(_epoch_batches(ds, cfg, epoch)):
                    h = _stacked(batch, dtype)
                    with no_grad():
                        for j in range(i):
                            h = forward_block(model, j, h)
                    update(i, h, batch, epoch, b)

    prov = Provenance("local", cfg.seed, parent.id if parent else None, config_digest)
    return StageResult(Checkpoint(model, prov), records)


def global_pretrain(stack: BlockStack, ds: Dataset, cfg: ContrastiveStageConfig,
                    parent: Checkpoint | None = None, config_digest: str | None = None) -> StageResult:
    """End-to-end contrastive training on the final embedding with one optimizer."""
    model = stack.copy()
    dtype = model.blocks[0].weight.dtype
    total = cfg.epochs * _steps_per_epoch(ds, cfg)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    sched = make_schedule(cfg.learning_rate, total, cfg.anneal)
    records: list[LossRecord] = []
    for epoch in range(cfg.epochs):
        for b, batch in enumerate(_epoch_batches(ds, cfg, epoch)):
            where = f"stage global, epoch {epoch}, batch {b}"
            e = embed_global(model, _stacked(batch, dtype))
            k = len(batch)
            loss = cosine_embedding_loss(e[:k], e[k:], batch.same_class)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite contrastive loss ({where})")
            loss.backward()
            opt.step(lr=sched.lr(), context=where)
            sched.advance()
            records.append(LossRecord("global", -1, epoch, b, float(loss.data)))
    prov = Provenance("global", cfg.seed, parent.id if parent else None, config_digest)
    return StageResult(Checkpoint(model, prov), records)
