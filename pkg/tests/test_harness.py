import json
import re

import numpy as np
import pytest

from dualmem.cli import main as cli_main
from dualmem.harness import DEFAULT_HPARAMS
from dualmem.harness import (
    ARCHITECTURE,
    CHECKPOINT_MAGIC,
    ExperimentConfig,
    config_hash,
    default_hparams,
    emit_report,
    load_checkpoint,
    load_records,
    read_report_csv,
    run_experiment,
    run_seed,
    save_checkpoint,
    split_validation,
    sweep,
)
from dualmem.streams import RawDataset, build_s_mnist

from conftest import DATA_ROOT


def synthetic_dataset(per_class=40, seed=0):
    rng = np.random.default_rng(seed)
    n = per_class * 10
    return RawDataset(
        train_x=rng.random((n, 784), dtype=np.float32),
        train_y=np.repeat(np.arange(10), per_class),
        test_x=rng.random((100, 784), dtype=np.float32),
        test_y=np.tile(np.arange(10), 10),
    )


@pytest.fixture(scope="module")
def tiny():
    return synthetic_dataset()


def tiny_config(**kw):
    base = dict(protocol="s-mnist", learner="cls-er", buffer_sizes=[500],
                seeds=[0], eval_cadence="final")
    base.update(kw)
    return ExperimentConfig(**base)


class TestDefaults:
    def test_split_protocol_dual_memory_row(self):
        p = default_hparams("s-mnist", "cls-er", 500)
        assert p["lr"] == 0.1
        assert p["batch_size"] == 10
        assert p["memory_batch_size"] == 32
        assert p["lam"] == 2.0
        assert p["memory_pair"] == {"alpha_P": 0.99, "alpha_S": 0.99,
                                    "rate_P": 1.0, "rate_S": 0.9}

    def test_rotation_protocol_row_separates_memories_by_decay(self):
        p = default_hparams("r-mnist", "cls-er", 500)
        pair = p["memory_pair"]
        assert pair["rate_P"] == pair["rate_S"] == 1.0
        assert pair["alpha_P"] < pair["alpha_S"]

    def test_unknown_combinations_rejected(self):
        with pytest.raises(ValueError, match="no default"):
            default_hparams("cifar", "cls-er", 500)
        with pytest.raises(ValueError, match="buffer size"):
            default_hparams("s-mnist", "cls-er", 123)

    def test_every_default_yields_a_valid_learner_config(self):
        for (protocol, learner), entry in DEFAULT_HPARAMS.items():
            buffers = sorted(entry.get("by_buffer", {500: None}))
            for b in buffers:
                cfg = ExperimentConfig(protocol, learner, [b], seeds=[0])
                cfg.learner_config(b)  # must not raise


class TestConfig:
    def test_overrides_take_precedence(self):
        cfg = tiny_config(lr=0.5, lam=9.0)
        resolved = cfg.resolved(500)
        assert resolved["lr"] == 0.5
        assert resolved["lam"] == 9.0
        assert resolved["memory_batch_size"] == 32  # untouched default

    def test_non_replay_learners_get_no_buffer(self):
        cfg = tiny_config(learner="sgd")
        assert cfg.learner_config(500).buffer_budget == 0

    def test_with_base_seed(self):
        cfg = ExperimentConfig.with_base_seed("s-mnist", "er", [200],
                                              base_seed=5, n_seeds=3)
        assert cfg.seeds == [5, 6, 7]

    def test_hash_sensitivity(self):
        a = config_hash(tiny_config(), 500, seed=0)
        assert a == config_hash(tiny_config(), 500, seed=0)
        assert a != config_hash(tiny_config(), 200, seed=0)
        assert a != config_hash(tiny_config(), 500, seed=1)
        assert a != config_hash(tiny_config(lr=0.5), 500, seed=0)
        assert re.fullmatch(r"[0-9a-f]{16}", a)


class TestCheckpointFile:
    def test_roundtrip_preserves_arrays_and_scalars(self, tmp_path):
        payload = {
            "a": np.arange(12, dtype=np.float64).reshape(3, 4),
            "nested": {"b": np.array([1, 2], dtype=np.int64), "c": "text"},
            "n": 7, "x": 1.5, "flag": True, "nothing": None,
            "seq": [np.float64(2.0), np.int64(3)],
        }
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, payload)
        out = load_checkpoint(path)
        np.testing.assert_array_equal(out["a"], payload["a"])
        assert out["a"].dtype == np.float64
        np.testing.assert_array_equal(out["nested"]["b"], payload["nested"]["b"])
        assert out["nested"]["c"] == "text"
        assert out["n"] == 7 and out["x"] == 1.5 and out["flag"] is True
        assert out["nothing"] is None
        assert out["seq"] == [2.0, 3]

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(path)
        assert len(CHECKPOINT_MAGIC) == 16


class TestRunSeed:
    def test_bit_exact_repeatability(self, tiny):
        a = run_seed(tiny_config(), 500, 0, tiny)
        b = run_seed(tiny_config(), 500, 0, tiny)
        assert a["final"] == b["final"]
        assert a["config_hash"] == b["config_hash"]
        np.testing.assert_array_equal(
            a["_learner"].working.params.values,
            b["_learner"].working.params.values)

    def test_reports_every_component(self, tiny):
        result = run_seed(tiny_config(), 500, 0, tiny)
        assert set(result["final"]) == {"working", "plastic", "stable"}
        assert result["default_component"] == "stable"
        for comp in result["final"]:
            assert len(result["final"][comp]["per_task"]) == 5

    def test_task_cadence_fills_lower_triangle(self, tiny):
        result = run_seed(tiny_config(eval_cadence="task"), 500, 0, tiny)
        m = np.array([[np.nan if v is None else v for v in row]
                      for row in result["matrices"]["stable"]])
        assert m.shape == (5, 5)
        assert not np.any(np.isnan(m[np.tril_indices(5)]))
        assert np.all(np.isnan(m[np.triu_indices(5, k=1)]))

    def test_checkpoint_resume_matches_uninterrupted_run(self, tiny, tmp_path):
        cfg = tiny_config(eval_cadence="task", checkpoint_dir=str(tmp_path))
        full = run_seed(cfg, 500, 0, tiny)
        chash = full["config_hash"]
        partial_cfg = tiny_config(eval_cadence="task", checkpoint_dir=str(tmp_path))
        run_seed(partial_cfg, 500, 0, tiny, stop_after_task=1)
        resumed = run_seed(partial_cfg, 500, 0, tiny,
                           resume_from=tmp_path / f"{chash}_seed0_task1.ckpt")
        assert resumed["final"] == full["final"]
        assert resumed["matrices"] == full["matrices"]

    def test_resume_rejects_foreign_checkpoint(self, tiny, tmp_path):
        cfg = tiny_config(checkpoint_dir=str(tmp_path), eval_cadence="task")
        result = run_seed(cfg, 500, 0, tiny, stop_after_task=0)
        path = tmp_path / f"{result['config_hash']}_seed0_task0.ckpt"
        other = tiny_config(lr=0.123, eval_cadence="task")
        with pytest.raises(ValueError, match="different configuration"):
            run_seed(other, 500, 0, tiny, resume_from=path)

    def test_joint_branch(self, tiny):
        result = run_seed(tiny_config(learner="joint"), 0, 0, tiny)
        assert result["matrices"] is None
        assert set(result["final"]) == {"working"}


class TestRunExperiment:
    def test_aggregates_with_unbiased_std(self, tiny):
        cfg = tiny_config(learner="er", seeds=[0, 1, 2], buffer_sizes=[200])
        records = run_experiment(cfg, tiny)
        assert len(records) == 1
        r = records[0]
        means = [s["final"]["working"]["mean"] for s in r.per_seed]
        assert r.mean == pytest.approx(np.mean(means))
        assert r.std == pytest.approx(np.std(means, ddof=1))
        assert re.fullmatch(r"\d+\.\d\d±\d+\.\d\d", r.cell())

    def test_memoryless_learners_collapse_buffer_axis(self, tiny):
        cfg = tiny_config(learner="sgd", buffer_sizes=[200, 500])
        records = run_experiment(cfg, tiny)
        assert [r.buffer_size for r in records] == [0]

    def test_one_record_per_buffer(self, tiny):
        cfg = tiny_config(learner="er", buffer_sizes=[200, 500])
        records = run_experiment(cfg, tiny)
        assert [r.buffer_size for r in records] == [200, 500]


class TestReporting:
    def _records(self, tiny):
        cfg = tiny_config(learner="er", seeds=[0, 1], buffer_sizes=[200])
        return run_experiment(cfg, tiny)

    def test_emitted_files_roundtrip(self, tiny, tmp_path):
        records = self._records(tiny)
        paths = emit_report(records, tmp_path)
        loaded = load_records(paths["json"])
        assert loaded[0].mean == records[0].mean
        assert loaded[0].config_hash == records[0].config_hash
        rows = read_report_csv(paths["csv"])
        assert rows[0]["protocol"] == "s-mnist"
        assert float(rows[0]["mean"]) == pytest.approx(records[0].mean)
        assert rows[0]["cell"] == records[0].cell()
        text = open(paths["txt"]).read()
        assert "s-mnist" in text and records[0].cell() in text


class TestSweep:
    def test_validation_split_sizes_and_disjointness(self, tiny):
        stream = build_s_mnist(tiny, seed=0)
        carved, val_sets = split_validation(stream, 0.25, seed=0)
        for orig, task, (vx, vy) in zip(stream.tasks, carved.tasks, val_sets):
            assert vy.size == round(0.25 * orig.n_train)
            assert task.n_train + vy.size == orig.n_train
        # same draw is reproducible
        carved2, val_sets2 = split_validation(stream, 0.25, seed=0)
        np.testing.assert_array_equal(val_sets[0][1], val_sets2[0][1])

    def test_grid_evaluates_feasible_and_skips_infeasible(self, tiny):
        cfg = tiny_config(seeds=[0], buffer_sizes=[200])
        points = sweep(cfg, {"lam": [0.5], "rate_S": [0.9, 1.0]}, tiny)
        assert len(points) == 2
        evaluated = [p for p in points if p.record is not None]
        skipped = [p for p in points if p.record is None]
        # rate_S=1.0 ties both rate and decay with the plastic memory
        assert len(evaluated) == 1 and len(skipped) == 1
        assert skipped[0].params["rate_S"] == 1.0
        assert "adapt faster" in skipped[0].skipped_reason
        assert evaluated[0].validation_mean is not None

    def test_unsweepable_axis_rejected(self, tiny):
        with pytest.raises(ValueError, match="cannot sweep"):
            sweep(tiny_config(), {"lr": [0.1]}, tiny)


@pytest.mark.slow
class TestCli:
    def test_run_report_datagen_analyze(self, mnist, tmp_path, capsys):
        data_root = str(DATA_ROOT)
        out = tmp_path / "results"
        ckpt = tmp_path / "ckpt"
        ckpt.mkdir()
        rc = cli_main([
            "run", "--protocol", "s-mnist", "--learner", "sgd",
            "--n-seeds", "1", "--eval-cadence", "final",
            "--checkpoint-dir", str(ckpt),
            "--data-root", data_root, "--out", str(out),
        ])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "s-mnist sgd buffer=0" in printed
        assert (out / "records.json").exists()

        rc = cli_main(["report", str(out / "records.json"),
                       "--out", str(tmp_path / "rereport")])
        assert rc == 0
        assert "s-mnist" in capsys.readouterr().out

        rc = cli_main(["datagen", "--protocol", "s-mnist", "--seed", "0",
                       "--data-root", data_root, "--out", str(tmp_path)])
        assert rc == 0
        manifest = json.loads(
            (tmp_path / "manifest_s-mnist_seed0.json").read_text())
        assert manifest["n_tasks"] == 5

        ckpts = sorted(ckpt.glob("*_task4.ckpt"))
        assert len(ckpts) == 1
        rc = cli_main(["analyze", "--checkpoint", str(ckpts[0]),
                       "--probe-size", "200", "--draws", "2",
                       "--data-root", data_root, "--out", str(tmp_path / "analysis")])
        assert rc == 0
        assert (tmp_path / "analysis" / "calibration.csv").exists()
        assert (tmp_path / "analysis" / "task_probabilities.json").exists()
        assert (tmp_path / "analysis" / "perturbation.csv").exists()

    def test_partial_memory_override_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            cli_main(["run", "--protocol", "s-mnist", "--learner", "cls-er",
                      "--alpha-p", "0.9", "--out", str(tmp_path)])
