"""Pipeline configuration: dataclasses, strict parsing from YAML/JSON, and digests.

Config file layout (YAML or JSON)::

    model:    {blocks: [{kind, out, kernel, stride, use_residual}], input_shape: [C, H, W], embedding: gap}
    data:     {source: {synthetic: {...}} | {idx: {images, labels, classes}},
               normalization: zero_one | {mean_std: {mean, std}}, split: {...}, resize: [H, W] | null}
    stages:   {local: {...}, global: {...}, finetune: {...}}
    pipeline: {mode, init: random | {warm_start: PATH}, seed}
    output:   {directory: PATH}

Unknown keys anywhere are rejected. ``pipeline.seed`` is mandatory.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .contrastive import ContrastiveStageConfig
from .data import SplitSpec, SyntheticSpec
from .errors import ConfigError, FFCLError
from .network import DEFAULT_BACKBONE, BlockSpec


class PipelineMode(str, enum.Enum):
    RBP = "RBP"
    LOCAL_THEN_GLOBAL = "LocalThenGlobal"
    GLOBAL_THEN_LOCAL = "GlobalThenLocal"
    LOCAL_ONLY = "LocalOnly"
    GLOBAL_ONLY = "GlobalOnly"

    @property
    def stages(self) -> tuple[str, ...]:
        return {
            "RBP": ("finetune",),
            "LocalOnly": ("local", "finetune"),
            "GlobalOnly": ("global", "finetune"),
            "LocalThenGlobal": ("local", "global", "finetune"),
            "GlobalThenLocal": ("global", "local", "finetune"),
        }[self.value]

    @property
    def approach(self) -> str:
        return "RBP" if self is PipelineMode.RBP else "FFCL"

    @property
    def contrastive(self) -> str:
        return {
            "RBP": "--",
            "LocalThenGlobal": "Local->Global",
            "GlobalThenLocal": "Global->Local",
            "GlobalOnly": "Global only",
            "LocalOnly": "Local only",
        }[self.value]

    @classmethod
    def parse(cls, value: str) -> "PipelineMode":
        for m in cls:
            if value.lower() in (m.value.lower(), m.name.lower()):
                return m
        raise ConfigError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")


# Table 1 row order
GRID_MODES = (
    PipelineMode.RBP,
    PipelineMode.LOCAL_THEN_GLOBAL,
    PipelineMode.GLOBAL_THEN_LOCAL,
    PipelineMode.GLOBAL_ONLY,
    PipelineMode.LOCAL_ONLY,
)


@dataclass(frozen=True)
class InitSpec:
    kind: str = "random"  # "random" | "warm"
    path: str | None = None

    @property
    def label(self) -> str:
        return self.kind

    @classmethod
    def parse(cls, value) -> "InitSpec":
        if value in (None, "random"):
            return cls()
        if isinstance(value, str) and value.startswith("warm:"):
            return cls("warm", value[5:])
        if isinstance(value, dict) and set(value) == {"warm_start"}:
            return cls("warm", str(value["warm_start"]))
        raise ConfigError(f"init must be 'random', 'warm:PATH' or {{warm_start: PATH}}, got {value!r}")

    def to_config(self):
        return "random" if self.kind == "random" else {"warm_start": self.path}


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 1e-4
    anneal: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError(f"invalid finetune config {self}")


@dataclass
class ModelConfig:
    blocks: list[BlockSpec] = field(default_factory=lambda: list(DEFAULT_BACKBONE))
    input_shape: list[int] = field(default_factory=lambda: [1, 32, 32])
    embedding: str = "gap"


@dataclass
class IdxSource:
    images: str
    labels: str
    classes: list[int] = field(default_factory=lambda: [0, 1])


@dataclass
class DataConfig:
    source: SyntheticSpec | IdxSource = field(default_factory=SyntheticSpec)
    normalization: Any = "zero_one"  # "zero_one" | "none" | {"mean_std": {"mean": .., "std": ..}}
    split: SplitSpec = field(default_factory=SplitSpec)
    resize: list[int] | None = None


@dataclass
class StagesConfig:
    local: ContrastiveStageConfig = field(default_factory=ContrastiveStageConfig)
    global_: ContrastiveStageConfig = field(default_factory=ContrastiveStageConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


@dataclass
class PipelineConfig:
    seed: int
    mode: PipelineMode = PipelineMode.LOCAL_THEN_GLOBAL
    init: InitSpec = field(default_factory=InitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    output: str | None = None

    def to_dict(self) -> dict:
        src = self.data.source
        source = ({"synthetic": dataclasses.asdict(src)} if isinstance(src, SyntheticSpec)
                  else {"idx": dataclasses.asdict(src)})
        return {
            "model": {
                "blocks": [b.to_dict() for b in self.model.blocks],
                "input_shape": list(self.model.input_shape),
                "embedding": self.model.embedding,
            },
            "data": {
                "source": source,
                "normalization": copy.deepcopy(self.data.normalization),
                "split": dataclasses.asdict(self.data.split),
                "resize": list(self.data.resize) if self.data.resize else None,
            },
            "stages": {
                "local": _stage_dict(self.stages.local),
                "global": _stage_dict(self.stages.global_),
                "finetune": dataclasses.asdict(self.stages.finetune),
            },
            "pipeline": {"mode": self.mode.value, "init": self.init.to_config(), "seed": self.seed},
            "output": {"directory": self.output},
        }

    def digest(self) -> str:
        """sha256 of the canonical config, ignoring the output directory."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)


def _stage_dict(cfg: ContrastiveStageConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("seed")  # always the pipeline seed
    return d


# -- parsing -----------------------------------------------------------------------------
def _section(raw: Any, where: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(raw)
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")
    return raw


def _build(cls, raw: Any, where: str, skip: tuple[str, ...] = ()):
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    required = {f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING}
    values = _section(raw, where, names, required)
    try:
        return cls(**values)
    except FFCLError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_file(path: str, where: str, base: Path | None) -> str:
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ConfigError(f"{where}: file not found: {p}")
    return str(p)


def parse_config(raw: Any, base_dir: Path | None = None) -> PipelineConfig:
    """Build a PipelineConfig from a parsed document.

    Relative input file paths resolve against ``base_dir``; the output
    directory is taken as given (relative to the working directory).
    """
    top = _section(raw, "config", {"model", "data", "stages", "pipeline", "output"}, {"pipeline"})

    m = _section(top.get("model"), "model", {"blocks", "input_shape", "embedding"})
    model = ModelConfig()
    if "blocks" in m:
        if not isinstance(m["blocks"], list) or not m["blocks"]:
            raise ConfigError("model.blocks: expected a non-empty list")
        model.blocks = [_build(BlockSpec, b, f"model.blocks[{i}]") for i, b in enumerate(m["blocks"])]
    if "input_shape" in m:
        shape = m["input_shape"]
        if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) and v > 0 for v in shape)):
            raise ConfigError(f"model.input_shape: expected [C, H, W] positive ints, got {shape!r}")
        model.input_shape = shape
    if "embedding" in m:
        model.embedding = m["embedding"]

    d = _section(top.get("data"), "data", {"source", "normalization", "split", "resize"})
    data = DataConfig()
    if "source" in d:
        src = _section(d["source"], "data.source", {"synthetic", "idx"})
        if len(src) != 1:
            raise ConfigError("data.source: give exactly one of 'synthetic' or 'idx'")
        if "synthetic" in src:
            data.source = _build(SyntheticSpec, src["synthetic"], "data.source.synthetic")
        else:
            idx = _build(IdxSource, src["idx"], "data.source.idx")
            idx.images = _check_file(idx.images, "data.source.idx.images", base_dir)
            idx.labels = _check_file(idx.labels, "data.source.idx.labels", base_dir)
            if len(idx.classes) != 2 or idx.classes[0] == idx.classes[1]:
                raise ConfigError("data.source.idx.classes: need two distinct class labels")
            data.source = idx
    if "normalization" in d:
        norm = d["normalization"]
        if norm not in ("zero_one", "none"):
            body = _section(norm, "data.normalization", {"mean_std"}, {"mean_std"})
            _section(body["mean_std"], "data.normalization.mean_std", {"mean", "std"}, {"mean", "std"})
        data.normalization = norm
    if "split" in d:
        data.split = _build(SplitSpec, d["split"], "data.split")
    if d.get("resize") is not None:
        r = d["resize"]
        if not (isinstance(r, list) and len(r) == 2 and all(isinstance(v, int) and v > 0 for v in r)):
            raise ConfigError(f"data.resize: expected [H, W], got {r!r}")
        data.resize = r

    s = _section(top.get("stages"), "stages", {"local", "global", "finetune"})
    stages = StagesConfig(
        local=_build(ContrastiveStageConfig, s.get("local"), "stages.local", skip=("seed",)),
        global_=_build(ContrastiveStageConfig, s.get("global"), "stages.global", skip=("seed",)),
        finetune=_build(FinetuneConfig, s.get("finetune"), "stages.finetune"),
    )

    p = _section(top.get("pipeline"), "pipeline", {"mode", "init", "seed"}, {"seed"})
    if not isinstance(p["seed"], int) or isinstance(p["seed"], bool):
        raise ConfigError("pipeline.seed: expected an integer")
    init = InitSpec.parse(p.get("init", "random"))
    if init.kind == "warm":
        init = InitSpec("warm", _check_file(init.path, "pipeline.init.warm_start", base_dir))
    mode = PipelineMode.parse(p["mode"]) if "mode" in p else PipelineMode.LOCAL_THEN_GLOBAL

    o = _section(top.get("output"), "output", {"directory"})
    output = o.get("directory")

    return PipelineConfig(seed=p["seed"], mode=mode, init=init, model=model, data=data,
                          stages=stages, output=output)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    return parse_config(raw, path.parent)


def load_synthetic_spec(path) -> SyntheticSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    if isinstance(raw, dict) and set(raw) == {"synthetic"}:
        raw = raw["synthetic"]
    return _build(SyntheticSpec, raw, str(path))
