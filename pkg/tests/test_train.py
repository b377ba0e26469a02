"""Training harness tests: config plumbing, deterministic runs, early
stopping, divergence handling, and the ablation driver."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from traitreg.checkpoint import load_checkpoint
from traitreg.data import (
    Sample,
    SplitSpec,
    TraitVector,
    prepare_dataset,
)
from traitreg.errors import ConfigError, TrainingDiverged
from traitreg.metrics import evaluate_model
from traitreg.models import ModelConfig
from traitreg.train import (
    ARCH_ROWS,
    TrainConfig,
    _clip_gradients,
    arch_label,
    run_ablation,
    run_label,
    run_training,
    train_model,
)


def tiny_train_config(**overrides):
    model = ModelConfig(encoder="tiny", head_hidden=8, seed=2)
    base = dict(model=model, max_epochs=2, batch_size=4, patience=0, seed=1)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_protocol_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 5e-4
        assert cfg.batch_size == 16
        assert cfg.max_epochs == 300
        assert cfg.patience == 30
        assert cfg.sampler == "random"
        assert cfg.augment is not None
        assert cfg.clip_grad_norm is None

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(lr=0.0),
            dict(lr=-1e-4),
            dict(batch_size=0),
            dict(max_epochs=-1),
            dict(patience=-1),
            dict(max_epochs=10, patience=11),
        ],
    )
    def test_invalid_settings_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = tiny_train_config(lr=1e-3, clip_grad_norm=5.0, sampler="variety_stratified")
        clone = TrainConfig.from_dict(cfg.to_dict())
        assert clone == cfg

    def test_round_trip_without_augmentation(self):
        cfg = tiny_train_config(augment=None)
        clone = TrainConfig.from_dict(cfg.to_dict())
        assert clone.augment is None
        assert clone == cfg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown training config keys"):
            TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})


class TestClipGradients:
    def test_large_gradient_scaled_to_max_norm(self):
        params = [
            SimpleNamespace(grad=np.array([3.0, 0.0])),
            SimpleNamespace(grad=np.array([0.0, 4.0])),
        ]
        _clip_gradients(params, max_norm=1.0)
        total = np.sqrt(sum(float((p.grad**2).sum()) for p in params))
        assert total == pytest.approx(1.0)
        np.testing.assert_allclose(params[0].grad, [0.6, 0.0])
        np.testing.assert_allclose(params[1].grad, [0.0, 0.8])

    def test_small_gradient_untouched(self):
        params = [SimpleNamespace(grad=np.array([0.3, 0.4]))]
        _clip_gradients(params, max_norm=1.0)
        np.testing.assert_array_equal(params[0].grad, [0.3, 0.4])

    def test_none_gradients_skipped(self):
        params = [SimpleNamespace(grad=None), SimpleNamespace(grad=np.array([6.0, 8.0]))]
        _clip_gradients(params, max_norm=5.0)
        np.testing.assert_allclose(params[1].grad, [3.0, 4.0])


class TestTrainModel:
    def test_run_produces_artifacts_and_record(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config()
        record, model = run_training(tiny_dataset, cfg, out_dir=tmp_path)
        assert len(record.history) == 2
        assert record.best_epoch in (0, 1)
        assert np.isfinite(record.best_val_nmse)
        assert record.val_report is not None
        assert record.test_report is not None
        for name in ("config.json", "metrics.csv", "log.jsonl", "best.ckpt", "report.json"):
            assert (tmp_path / name).exists(), name
        meta, _ = load_checkpoint(tmp_path / "best.ckpt")
        for key in ("stats", "split", "train_config", "best_epoch", "best_val_nmse", "model"):
            assert key in meta, key
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["best_val_nmse"] == record.best_val_nmse
        assert "epoch_seconds" not in report  # timings stay out of artifacts

    def test_model_ends_holding_best_parameters(self, tiny_dataset):
        cfg = tiny_train_config(max_epochs=3)
        record, model = run_training(tiny_dataset, cfg)
        rescored = evaluate_model(model, tiny_dataset.val, batch_size=cfg.eval_batch_size)
        assert rescored.nmse == record.best_val_nmse

    def test_rerun_is_bit_identical(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config()
        a, b = tmp_path / "a", tmp_path / "b"
        run_training(tiny_dataset, cfg, out_dir=a)
        run_training(tiny_dataset, cfg, out_dir=b)
        for name in ("metrics.csv", "best.ckpt", "report.json", "config.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_different_seed_changes_history(self, tiny_dataset):
        rec1, _ = run_training(tiny_dataset, tiny_train_config(seed=1))
        rec2, _ = run_training(tiny_dataset, tiny_train_config(seed=2))
        assert rec1.history != rec2.history

    def test_test_split_read_exactly_once(self, tiny_dataset):
        assert tiny_dataset.test_read_count == 0
        run_training(tiny_dataset, tiny_train_config())
        assert tiny_dataset.test_read_count == 1

    def test_early_stopping_fires(self, tiny_dataset, tmp_path):
        # A huge step size makes validation bounce, so patience runs out.
        cfg = tiny_train_config(max_epochs=40, patience=2, lr=0.5)
        record, _ = run_training(tiny_dataset, cfg, out_dir=tmp_path)
        assert len(record.history) < 40
        events = [
            json.loads(line)["event"]
            for line in (tmp_path / "log.jsonl").read_text().splitlines()
        ]
        assert "early_stop" in events

    def test_patience_zero_never_stops_early(self, tiny_dataset):
        cfg = tiny_train_config(max_epochs=3, patience=0, lr=0.5)
        record, _ = run_training(tiny_dataset, cfg)
        assert len(record.history) == 3

    def test_divergence_reported_with_location(self):
        gen = np.random.default_rng(0)
        samples = []
        for i in range(6):
            traits = TraitVector(np.nan, 0.1, 10.0, 20.0, 100.0)
            samples.append(
                Sample(
                    rgb=gen.uniform(0, 255, (3, 16, 16)),
                    depth=gen.uniform(0, 30, (1, 16, 16)),
                    traits=traits,
                    source_id=f"s{i}",
                    variety="aurora",
                )
            )
        dataset = prepare_dataset(
            samples, SplitSpec(train_fraction=0.8, test_count=1, seed=0)
        )
        with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
            run_training(dataset, tiny_train_config())

    def test_zero_epochs_evaluates_untrained_model(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(max_epochs=0)
        record, _ = run_training(tiny_dataset, cfg, out_dir=tmp_path)
        assert record.history == []
        assert record.best_epoch == -1
        assert record.best_val_nmse is None
        assert record.val_report is not None
        assert record.test_report is not None
        assert (tmp_path / "best.ckpt").exists()

    def test_gradient_clipping_config_is_exercised(self, tiny_dataset):
        cfg = tiny_train_config(clip_grad_norm=0.01)
        record, _ = run_training(tiny_dataset, cfg)
        assert len(record.history) == 2


class TestLabels:
    def test_arch_labels(self):
        assert arch_label(ModelConfig()) == "MIMO"
        assert arch_label(ModelConfig(outputs=("height",))) == "MISO"
        assert arch_label(ModelConfig(inputs=("rgb",))) == "SIMO-RGB"
        assert arch_label(ModelConfig(inputs=("depth",))) == "SIMO-D"
        assert arch_label(ModelConfig(inputs=("rgb",), outputs=("height",))) == "SISO-RGB"
        assert arch_label(ModelConfig(inputs=("depth",), outputs=("height",))) == "SISO-D"
        assert set(arch_label(c) for c in [ModelConfig()]) <= set(ARCH_ROWS)

    def test_run_labels_are_unique_across_grid(self):
        from traitreg.models import enumerate_ablation

        labels = [run_label(c) for c in enumerate_ablation("standard")]
        labels += [run_label(c) for c in enumerate_ablation("deformable")]
        assert len(labels) == len(set(labels)) == 36
        assert "standard_siso_rgb_height" in labels
        assert "deformable_mimo" in labels


class TestRunAblation:
    @pytest.fixture()
    def result_and_dir(self, tiny_dataset, tmp_path):
        base = tiny_train_config(max_epochs=0)
        result = run_ablation(tiny_dataset, ["standard"], base, out_dir=tmp_path)
        return result, tmp_path

    def test_grid_runs_and_rows(self, result_and_dir):
        result, _ = result_and_dir
        assert result["errors"] == {}
        assert len(result["runs"]) == 18
        rows = result["rows"]
        assert [r["architecture"] for r in rows] == list(ARCH_ROWS)
        assert all(r["conv_kind"] == "standard" for r in rows)
        for row in rows:
            assert row["nmse"] is not None
            assert sorted(row["mse"]) == sorted(
                ("fresh_weight", "dry_weight", "height", "diameter", "leaf_area")
            )
        assert result["eval_split"] == "test"

    def test_single_output_rows_merge_additively(self, result_and_dir):
        result, _ = result_and_dir
        runs = result["runs"]
        siso_rgb = [
            runs[k]["test_report"] for k in runs if k.startswith("standard_siso_rgb")
        ]
        assert len(siso_rgb) == 5
        row = next(r for r in result["rows"] if r["architecture"] == "SISO-RGB")
        assert row["nmse"] == pytest.approx(sum(r["nmse"] for r in siso_rgb), rel=1e-12)
        for rep in siso_rgb:
            (trait, mse), = rep["mse"].items()
            assert row["mse"][trait] == mse

    def test_summary_files_written(self, result_and_dir):
        _, out = result_and_dir
        csv_lines = (out / "summary.csv").read_text().splitlines()
        assert len(csv_lines) == 1 + len(ARCH_ROWS)
        assert csv_lines[0].startswith("architecture,conv_kind,fresh_weight_mse")
        md = (out / "summary.md").read_text()
        assert "CNN Fresh Wt MSE" in md
        assert md.count("\n") == 2 + len(ARCH_ROWS)
        assert (out / "nmse_by_architecture.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        doc = json.loads((out / "ablation.json").read_text())
        assert "runs" not in doc
        assert len(doc["rows"]) == len(ARCH_ROWS)
        run_dirs = sorted(p.name for p in (out / "runs").iterdir())
        assert len(run_dirs) == 18

    def test_failures_are_isolated(self, tiny_dataset, tmp_path, monkeypatch):
        import traitreg.train as train_mod

        real_train = train_mod.train_model
        calls = {"n": 0}

        def flaky(model, dataset, cfg, out_dir=None, checkpoint_meta=None):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("boom")
            return real_train(model, dataset, cfg, out_dir=out_dir)

        monkeypatch.setattr(train_mod, "train_model", flaky)
        base = tiny_train_config(max_epochs=0)
        result = run_ablation(tiny_dataset, ["standard"], base, out_dir=tmp_path)
        assert len(result["errors"]) == 1
        assert "RuntimeError: boom" in next(iter(result["errors"].values()))
        assert len(result["runs"]) == 17
        # the failed run's cells are empty, the table still has all rows
        assert len(result["rows"]) == len(ARCH_ROWS)
