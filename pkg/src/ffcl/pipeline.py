"""Stage orchestration: classification fine-tuning, the five pipeline modes, run manifests and the ablation grid."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, Provenance, check_compatible, load_checkpoint, save_checkpoint
from .config import GRID_MODES, FinetuneConfig, IdxSource, InitSpec, PipelineConfig, PipelineMode
from .contrastive import LossRecord, StageResult, global_pretrain, local_pretrain, write_loss_csv
from .data import Dataset, gen_synthetic, load_idx, normalize, resize, split
from .errors import ConfigError, FFCLError, SpecError, TrainingError
from .metrics import MetricsReport, ResultRow, ResultsTable, emit_report, evaluate
from .network import BlockStack, ClassifierHead, build_model, classify, embed_global, init_head
from .optim import Adam, make_schedule
from .tensor import Tensor, bce_loss, no_grad

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1


class OutputDirError(FFCLError, OSError):
    """The output directory exists and is not empty."""


class PipelineFailed(FFCLError, RuntimeError):
    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


# -- data ---------------------------------------------------------------------------------
@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    dataset_digest: str


def build_data(cfg: PipelineConfig) -> Splits:
    """Load or generate, then resize, normalize and split."""
    dc = cfg.data
    if isinstance(dc.source, IdxSource):
        ds = load_idx(dc.source.images, dc.source.labels, dc.source.classes)
    else:
        ds = gen_synthetic(dc.source)
    if dc.resize:
        ds = resize(ds, *dc.resize)
    if dc.normalization == "zero_one":
        ds = normalize(ds, "zero_one")
    elif isinstance(dc.normalization, dict):
        ms = dc.normalization["mean_std"]
        ds = normalize(ds, "mean_std", ms["mean"], ms["std"])
    train, val, test = split(ds, dc.split)
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty")
    return Splits(train, val, test, ds.digest)


# -- fine-tuning ------------------------------------------------------------------------------
def select_best_epoch(val_accuracies: Sequence[float]) -> int:
    """1-based epoch with the highest validation accuracy; ties go to the earliest."""
    best, best_acc = 0, -1.0
    for epoch, acc in enumerate(val_accuracies, start=1):
        if acc > best_acc:
            best, best_acc = epoch, acc
    return best


def predict(model: BlockStack, head: ClassifierHead, ds: Dataset, batch_size: int = 128) -> np.ndarray:
    dtype = model.blocks[0].weight.dtype
    out = []
    with no_grad():
        for start in range(0, len(ds), batch_size):
            x = Tensor(ds.images[start:start + batch_size], dtype=dtype)
            out.append(classify(head, embed_global(model, x)).data)
    return np.concatenate(out).astype(np.float64)


@dataclass
class FinetuneResult(StageResult):
    report: MetricsReport | None = None
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0


def finetune_classify(model: BlockStack, train: Dataset, val: Dataset, test: Dataset, cfg: FinetuneConfig,
                      seed: int, parent: Checkpoint | None = None,
                      config_digest: str | None = None) -> FinetuneResult:
    """Attach a fresh head and train everything with BCE, Adam and cosine annealing.

    Keeps the parameters of the epoch with the best validation accuracy and
    reports test metrics for them.
    """
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            raise ConfigError(f"finetune: {name} split is empty")
    model = model.copy()
    dtype = model.blocks[0].weight.dtype
    head = init_head(model.embedding_dim, seed=[seed, 1])
    params = model.parameters() + head.parameters()
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    opt = Adam(params, lr=cfg.learning_rate)
    sched = make_schedule(cfg.learning_rate, cfg.epochs * steps_per_epoch, cfg.anneal)

    records: list[LossRecord] = []
    val_acc: list[float] = []
    best_state = [p.data.copy() for p in params]
    best_acc = -1.0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 2, epoch]).permutation(len(train))
        for b, start in enumerate(range(0, len(train), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            where = f"stage finetune, epoch {epoch}, batch {b}"
            probs = classify(head, embed_global(model, Tensor(train.images[idx], dtype=dtype)))
            loss = bce_loss(probs, train.labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite classification loss ({where})")
            loss.backward()
            opt.step(lr=sched.lr(), context=where)
            sched.advance()
            records.append(LossRecord("finetune", -1, epoch, b, float(loss.data)))
        scores = predict(model, head, val)
        acc = float(np.mean((scores >= cfg.threshold) == (val.labels == 1)))
        val_acc.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_state = [p.data.copy() for p in params]

    for p, saved in zip(params, best_state):
        p.data = saved
    report = evaluate(predict(model, head, test), test.labels, cfg.threshold, test.digest)
    prov = Provenance("finetune", seed, parent.id if parent else None, config_digest)
    return FinetuneResult(Checkpoint(model, prov, head), records, report, val_acc, select_best_epoch(val_acc))


# -- runs -------------------------------------------------------------------------------------
@dataclass
class StageRecord:
    stage: str
    input_checkpoint: str
    output_checkpoint: str | None = None
    wall_time: float = 0.0
    final_loss: float | None = None
    status: str = "ok"
    error: str | None = None


@dataclass
class RunManifest:
    run_id: str
    config_digest: str
    mode: str
    config: dict
    dataset_digest: str = ""
    stages: list[StageRecord] = field(default_factory=list)
    init_checkpoint: str | None = None
    metrics_path: str | None = None
    metrics: dict | None = None
    status: str = "ok"
    schema_version: int = MANIFEST_SCHEMA

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        d["stages"] = [StageRecord(**s) for s in d["stages"]]
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def chain_ok(self) -> bool:
        prev = self.init_checkpoint
        for s in self.stages:
            if s.input_checkpoint != prev:
                return False
            prev = s.output_checkpoint
        return True


def prepare_output(out: Path) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise OutputDirError(f"output directory {out} exists and is not empty")
    (out / "ckpt").mkdir(parents=True, exist_ok=True)


def initial_checkpoint(cfg: PipelineConfig, digest: str) -> Checkpoint:
    m = cfg.model
    if cfg.init.kind == "warm":
        warm = load_checkpoint(cfg.init.path)
        try:
            check_compatible(warm, m.blocks, m.input_shape, m.embedding)
        except SpecError as exc:
            raise ConfigError(f"warm start {cfg.init.path}: {exc}") from exc
        return Checkpoint(warm.model.copy(), Provenance("init", cfg.seed, warm.id, digest))
    model = build_model(m.blocks, m.input_shape, cfg.seed, m.embedding)
    return Checkpoint(model, Provenance("init", cfg.seed, None, digest))


def run_pipeline(cfg: PipelineConfig, out_dir=None, splits: Splits | None = None) -> RunManifest:
    """Run every stage of ``cfg.mode`` in order, chaining checkpoints, and write all artifacts to ``out_dir``."""
    out = Path(out_dir or cfg.output or "")
    if not str(out_dir or cfg.output or ""):
        raise ConfigError("no output directory given")
    prepare_output(out)
    digest = cfg.digest()
    manifest = RunManifest(uuid.uuid4().hex, digest, cfg.mode.value, cfg.to_dict())

    splits = splits or build_data(cfg)
    manifest.dataset_digest = splits.dataset_digest
    if tuple(splits.train.image_shape) != tuple(cfg.model.input_shape):
        raise ConfigError(
            f"model.input_shape {list(cfg.model.input_shape)} does not match data shape {list(splits.train.image_shape)}"
        )

    current = initial_checkpoint(cfg, digest)
    save_checkpoint(current, out / "ckpt" / "init.ffclckpt")
    manifest.init_checkpoint = current.id
    stage_cfgs = {
        "local": dataclasses.replace(cfg.stages.local, seed=cfg.seed),
        "global": dataclasses.replace(cfg.stages.global_, seed=cfg.seed),
    }

    for stage in cfg.mode.stages:
        record = StageRecord(stage, current.id)
        manifest.stages.append(record)
        start = time.perf_counter()
        try:
            if stage == "local":
                result = local_pretrain(current.model, splits.train, stage_cfgs["local"], current, digest)
            elif stage == "global":
                result = global_pretrain(current.model, splits.train, stage_cfgs["global"], current, digest)
            else:
                result = finetune_classify(current.model, splits.train, splits.val, splits.test,
                                           cfg.stages.finetune, cfg.seed, current, digest)
        except FFCLError as exc:
            record.status, record.error = "failed", str(exc)
            record.wall_time = time.perf_counter() - start
            manifest.status = "failed"
            manifest.write(out / "manifest.json")
            raise PipelineFailed(f"stage {stage} failed: {exc}", manifest) from exc
        record.wall_time = time.perf_counter() - start
        record.final_loss = result.final_loss
        current = result.checkpoint
        record.output_checkpoint = save_checkpoint(current, out / "ckpt" / f"{stage}.ffclckpt")
        write_loss_csv(out / f"loss_{stage}.csv", result.losses)
        log.info("%s: stage %s done in %.1fs (loss %s)", cfg.mode.value, stage, record.wall_time, record.final_loss)
        if isinstance(result, FinetuneResult):
            emit_report(result.report, out / "metrics.json")
            manifest.metrics_path = "metrics.json"
            manifest.metrics = result.report.to_dict()

    manifest.write(out / "manifest.json")
    return manifest


# -- ablation grid --------------------------------------------------------------------------------
def _row_dir(init: InitSpec, mode: PipelineMode) -> str:
    return f"{init.label}_{mode.value}"


def _run_row(cfg: PipelineConfig, out: Path, splits: Splits) -> ResultRow:
    row = ResultRow(cfg.mode.approach, cfg.mode.contrastive, cfg.init.label, dataset_digest=splits.dataset_digest)
    try:
        manifest = run_pipeline(cfg, out, splits)
        row.report = MetricsReport.from_dict(manifest.metrics)
    except FFCLError as exc:
        row.status = f"failed: {exc}"
    return row


def ablation_grid(base: PipelineConfig, out_dir, inits: Sequence[InitSpec] | None = None,
                  modes: Sequence[PipelineMode] = GRID_MODES, jobs: int = 1) -> ResultsTable:
    """Every mode x init on the same data and seed; writes grid.csv and one run directory per row."""
    out = Path(out_dir)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise OutputDirError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    inits = list(inits or [base.init])
    splits = build_data(base)
    jobs_list = [(base.replace(mode=m, init=i), out / _row_dir(i, m)) for i in inits for m in modes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_row, c, o, splits) for c, o in jobs_list]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_row(c, o, splits) for c, o in jobs_list]
    table = ResultsTable(rows)
    emit_report(table, out / "grid.csv", "csv")
    return table
