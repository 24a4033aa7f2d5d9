"""Fine-tuning, run manifests, stage chaining and the ablation grid."""

import json

import numpy as np
import pytest

import ffcl.pipeline as pipeline_mod
from ffcl.checkpoint import Checkpoint, Provenance, load_checkpoint, save_checkpoint
from ffcl.config import FinetuneConfig, InitSpec, PipelineMode, parse_config
from ffcl.data import Dataset
from ffcl.errors import ConfigError, TrainingError
from ffcl.network import BlockSpec, build_model, param_fingerprint
from ffcl.pipeline import (
    OutputDirError,
    PipelineFailed,
    RunManifest,
    ablation_grid,
    build_data,
    finetune_classify,
    run_pipeline,
    select_best_epoch,
)


def two_feature_set(n, seed):
    """Two well separated clusters; the hand rule ``x0 > 0`` labels them perfectly."""
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = r.normal(0, 0.3, size=(n, 2))
    x[:, 0] += np.where(y == 1, 2.0, -2.0)
    return Dataset(x.reshape(n, 2, 1, 1).astype(np.float32), y)


def _volatile(d):
    d = dict(d)
    d.pop("run_id")
    d["stages"] = [{k: v for k, v in s.items() if k != "wall_time"} for s in d["stages"]]
    return d


class TestFinetune:
    def test_best_epoch_tie_goes_to_earliest(self):
        assert select_best_epoch([0.7, 0.9, 0.9, 0.8]) == 2
        assert select_best_epoch([]) == 0

    def test_zero_epochs_keeps_parameters(self, small_stack, tiny_dataset):
        parts = tiny_dataset.subset(np.arange(0, 24, 2)), tiny_dataset.subset(np.arange(1, 24, 2))
        res = finetune_classify(small_stack, parts[0], parts[1], parts[1], FinetuneConfig(epochs=0), seed=1)
        assert param_fingerprint(res.checkpoint.model) == param_fingerprint(small_stack)
        assert res.report is not None and res.report.n == len(parts[1])
        assert res.val_accuracy == [] and res.losses == []

    def test_separable_two_features(self):
        train, val, test = two_feature_set(60, 0), two_feature_set(20, 1), two_feature_set(20, 2)
        for ds in (train, val, test):
            assert np.all((ds.images[:, 0, 0, 0] > 0) == (ds.labels == 1))
        model = build_model([BlockSpec("linear", 8)], (2, 1, 1), seed=0)
        res = finetune_classify(model, train, val, test, FinetuneConfig(epochs=10, learning_rate=1e-2), seed=0)
        assert res.report.accuracy == 1.0
        assert 1 <= res.best_epoch <= 10

    def test_restores_best_epoch(self, small_stack, tiny_dataset, monkeypatch):
        train = tiny_dataset.subset(np.arange(0, 24, 2))
        val = tiny_dataset.subset(np.arange(1, 24, 2))
        res = finetune_classify(small_stack, train, val, val, FinetuneConfig(epochs=4, learning_rate=1e-2), seed=0)
        assert res.best_epoch == select_best_epoch(res.val_accuracy)
        assert res.report.accuracy == max(res.val_accuracy)

    def test_empty_split(self, small_stack, tiny_dataset):
        empty = tiny_dataset.subset(np.array([], dtype=int))
        with pytest.raises(ConfigError):
            finetune_classify(small_stack, tiny_dataset, empty, tiny_dataset, FinetuneConfig(epochs=1), 0)


class TestRunPipeline:
    def test_rbp_single_stage(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config).replace(mode=PipelineMode.RBP)
        m = run_pipeline(cfg, tmp_path / "run")
        assert [s.stage for s in m.stages] == ["finetune"]
        assert (tmp_path / "run" / "metrics.json").is_file()
        assert m.metrics["n"] == 8

    @pytest.mark.parametrize("mode", list(PipelineMode))
    def test_stage_tags_match_mode(self, tiny_config, tmp_path, mode):
        cfg = parse_config(tiny_config).replace(mode=mode)
        m = run_pipeline(cfg, tmp_path / "run")
        assert tuple(s.stage for s in m.stages) == mode.stages
        assert m.chain_ok()
        for s in m.stages:
            assert (tmp_path / "run" / "ckpt" / f"{s.stage}.ffclckpt").is_file()
            assert (tmp_path / "run" / f"loss_{s.stage}.csv").is_file()

    def test_local_then_global_chain(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        m = run_pipeline(parse_config(tiny_config), out)
        ids = [m.init_checkpoint] + [s.output_checkpoint for s in m.stages]
        assert [s.input_checkpoint for s in m.stages] == ids[:-1]
        local = load_checkpoint(out / "ckpt" / "local.ffclckpt")
        glob = load_checkpoint(out / "ckpt" / "global.ffclckpt")
        assert local.id == m.stages[0].output_checkpoint
        assert glob.provenance.parent == local.id
        reread = RunManifest.read(out / "manifest.json")
        assert reread == m and reread.chain_ok()
        assert reread.config["pipeline"]["mode"] == "LocalThenGlobal"

    def test_deterministic(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config)
        a = run_pipeline(cfg, tmp_path / "a")
        b = run_pipeline(cfg, tmp_path / "b")
        assert a.run_id != b.run_id
        assert _volatile(a.to_dict()) == _volatile(b.to_dict())
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    def test_refuses_non_empty_output(self, tiny_config, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        with pytest.raises(OutputDirError):
            run_pipeline(parse_config(tiny_config), tmp_path)

    def test_warm_start(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config)
        donor = build_model(cfg.model.blocks, cfg.model.input_shape, 99)
        path = tmp_path / "donor.ffclckpt"
        donor_id = save_checkpoint(Checkpoint(donor, Provenance("global", 99)), path)
        m = run_pipeline(cfg.replace(mode=PipelineMode.RBP, init=InitSpec("warm", str(path))), tmp_path / "run")
        init = load_checkpoint(tmp_path / "run" / "ckpt" / "init.ffclckpt")
        assert init.provenance.parent == donor_id
        assert param_fingerprint(init.model) == param_fingerprint(donor)
        assert m.stages[0].input_checkpoint == init.id

    def test_warm_start_architecture_mismatch(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config)
        other = build_model([BlockSpec("conv", 2, 3, 2)], cfg.model.input_shape, 0)
        path = tmp_path / "other.ffclckpt"
        save_checkpoint(Checkpoint(other, Provenance("init", 0)), path)
        with pytest.raises(ConfigError):
            run_pipeline(cfg.replace(init=InitSpec("warm", str(path))), tmp_path / "run")

    def test_input_shape_mismatch(self, tiny_config, tmp_path):
        tiny_config["model"]["input_shape"] = [1, 8, 8]
        with pytest.raises(ConfigError):
            run_pipeline(parse_config(tiny_config), tmp_path / "run")

    def test_failed_stage_is_recorded(self, tiny_config, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise TrainingError("non-finite contrastive loss (stage global, epoch 0, batch 0)")

        monkeypatch.setattr(pipeline_mod, "global_pretrain", boom)
        with pytest.raises(PipelineFailed) as info:
            run_pipeline(parse_config(tiny_config), tmp_path / "run")
        m = info.value.manifest
        assert m.status == "failed"
        assert [s.status for s in m.stages] == ["ok", "failed"]
        on_disk = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert on_disk["stages"][1]["error"].startswith("non-finite")


class TestAblationGrid:
    def test_five_rows_shared_test_split(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config)
        table = ablation_grid(cfg, tmp_path / "grid")
        assert [(r.approach, r.contrastive) for r in table.rows] == [
            ("RBP", "--"), ("FFCL", "Local->Global"), ("FFCL", "Global->Local"),
            ("FFCL", "Global only"), ("FFCL", "Local only")]
        assert len({r.report.split_digest for r in table.rows}) == 1
        assert table.dataset_digest == build_data(cfg).dataset_digest
        assert (tmp_path / "grid" / "grid.csv").is_file()
        assert all(r.status == "ok" for r in table.rows)

    def test_parallel_matches_serial(self, tiny_config, tmp_path):
        cfg = parse_config(tiny_config)
        ablation_grid(cfg, tmp_path / "serial")
        ablation_grid(cfg, tmp_path / "parallel", jobs=2)
        assert (tmp_path / "serial" / "grid.csv").read_bytes() == (tmp_path / "parallel" / "grid.csv").read_bytes()

    def test_failed_row_reported(self, tiny_config, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise TrainingError("diverged")

        monkeypatch.setattr(pipeline_mod, "local_pretrain", boom)
        table = ablation_grid(parse_config(tiny_config), tmp_path / "grid")
        statuses = {r.contrastive: r.status for r in table.rows}
        assert statuses["--"] == "ok" and statuses["Global only"] == "ok"
        assert statuses["Local only"].startswith("failed")
        assert "failed" in (tmp_path / "grid" / "grid.csv").read_text()
