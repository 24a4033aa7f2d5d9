"""``ffcl`` command line: run | ablate | gradcheck | datagen | report.

Exit codes: 0 ok, 2 config error, 3 runtime/training error, 4 I/O error,
5 ablation grid finished with failed rows. Messages go to stderr; stdout only
carries human-readable tables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checks import CHECK_NAMES, run_suite
from .config import GRID_MODES, InitSpec, PipelineMode, load_config, load_synthetic_spec
from .data import gen_synthetic, load_idx, normalize, write_idx
from .errors import CheckpointError, ConfigError, FFCLError, IdxError, SpecError, TrainingError
from .metrics import GRID_COLUMNS, MetricsReport, ResultRow, ResultsTable, load_report, read_grid_csv
from .pipeline import OutputDirError, PipelineFailed, ablation_grid, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO, EXIT_PARTIAL = 0, 2, 3, 4, 5

IMAGES_FILE = "images-idx3-ubyte"
LABELS_FILE = "labels-idx1-ubyte"
DIGEST_FILE = "digest.json"

log = logging.getLogger("ffcl")


def _err(msg: str) -> None:
    print(f"ffcl: {msg}", file=sys.stderr)


def _effective_config(args):
    """Config file values, overridden by any flag given on the command line."""
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = PipelineMode.parse(args.mode)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["output"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _effective_config(args)
    if not cfg.output:
        raise ConfigError("no output directory: set output.directory or pass --out")
    try:
        manifest = run_pipeline(cfg, cfg.output)
    except PipelineFailed as exc:
        for s in exc.manifest.stages:
            _err(f"stage {s.stage}: {s.status}{' (' + s.error + ')' if s.error else ''}")
        raise
    print(f"run {manifest.run_id}  mode {manifest.mode}  config {manifest.config_digest}  "
          f"data {manifest.dataset_digest}")
    print(f"  init      {manifest.init_checkpoint}")
    for s in manifest.stages:
        loss = "-" if s.final_loss is None else f"{s.final_loss:.6f}"
        print(f"  {s.stage:<9} {s.input_checkpoint} -> {s.output_checkpoint}  loss {loss}  {s.wall_time:.1f}s")
    report = MetricsReport.from_dict(manifest.metrics)
    print("metrics " + " ".join(f"{k}={v}" for k, v in zip(GRID_COLUMNS[3:], report.percent_row())))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    if not cfg.output:
        raise ConfigError("no output directory: set output.directory or pass --out")
    inits = []
    for item in (args.inits or "random").split(","):
        init = InitSpec.parse(item.strip())
        if init.kind == "warm" and not Path(init.path).is_file():
            raise ConfigError(f"warm start checkpoint not found: {init.path}")
        inits.append(init)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    table = ablation_grid(cfg, cfg.output, inits, GRID_MODES, jobs=args.jobs)
    print(table.render())
    failed = [r for r in table.rows if r.status != "ok"]
    for r in failed:
        _err(f"row {r.initialization} {r.contrastive}: {r.status}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.check or list(CHECK_NAMES)
    unknown = sorted(set(names) - set(CHECK_NAMES))
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; available: {list(CHECK_NAMES)}")
    start = time.perf_counter()
    results = run_suite(args.seed, args.min_probes, names)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status:<4}  max_rel_error {r.max_rel_error:.2e}  probes {r.probes}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    for r in failed:
        _err(f"gradient check failed for {r.name}: {r.failure}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_datagen(args) -> int:
    spec = load_synthetic_spec(args.spec)
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise OutputDirError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    # IDX holds unsigned bytes: stretch the generated range onto 0..255
    ds = normalize(gen_synthetic(spec), "zero_one")
    ds = dataclasses.replace(ds, images=ds.images * np.float32(255))
    write_idx(out / IMAGES_FILE, out / LABELS_FILE, ds)
    # digest of what a later run will actually load (pixels quantized to bytes)
    reloaded = load_idx(out / IMAGES_FILE, out / LABELS_FILE)
    record = {"digest": reloaded.digest, "n": len(reloaded), "image_shape": list(reloaded.image_shape),
              "class_counts": list(reloaded.class_counts()), "images": IMAGES_FILE, "labels": LABELS_FILE}
    (out / DIGEST_FILE).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(reloaded)} images {list(reloaded.image_shape)} to {out}  digest {reloaded.digest}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise FileNotFoundError(f"no such report: {path}")
    if path.suffix == ".csv":
        rows = read_grid_csv(path)
        header = ["Approach", "Contrastive", "Init", "Accuracy", "F1", "Precision", "Recall", "AUC"]
        lines = [header] + [[r[c] for c in GRID_COLUMNS] for r in rows]
        widths = [max(len(line[k]) for line in lines) for k in range(len(header))]
        for k, line in enumerate(lines):
            print("  ".join(cell.ljust(wd) for cell, wd in zip(line, widths)).rstrip())
            if k == 0:
                print("  ".join("-" * wd for wd in widths))
        return EXIT_OK
    try:
        report = load_report(path)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{path}: not a metrics report: {exc}") from exc
    table = ResultsTable([ResultRow("-", "-", "-", report)])
    print(table.render())
    print(f"n={report.n}  threshold={report.threshold}  confusion={report.confusion}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffcl", description="Forward-forward contrastive learning engine")
    parser.add_argument("--version", action="version", version=f"ffcl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one pipeline mode")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", help="RBP | LocalThenGlobal | GlobalThenLocal | LocalOnly | GlobalOnly")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (must be empty or absent)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run every mode x initialization and write grid.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--inits", default="random", help="comma list of random | warm:PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-probes", type=int, default=100)
    p.add_argument("--check", action="append", help="run only this check (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("datagen", help="write a synthetic dataset as IDX files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("report", help="render metrics.json or grid.csv")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except (TrainingError, PipelineFailed) as exc:
        _err(f"runtime error: {exc}")
        return EXIT_RUNTIME
    except (OutputDirError, CheckpointError, IdxError, OSError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO
    except FFCLError as exc:
        _err(f"runtime error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
