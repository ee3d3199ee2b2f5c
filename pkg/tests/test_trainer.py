import json

import numpy as np
import pytest

from featrehearse.checkpoint import read_checkpoint, write_checkpoint
from featrehearse.config import ConfigError, load_config
from featrehearse.data import split_tasks
from featrehearse.losses import OrchestrationError
from featrehearse.memory import ConsistencyError, CorruptArtifactError
from featrehearse.nn import param_digest
from featrehearse.trainer import IncrementalTrainer, run, task_seed, train_first_task, train_incremental_task

from .conftest import make_blobs

TINY = ["arch=conv:4:3,relu,pool,flatten,dense:16", "feature_dim=16", "epochs=3", "milestones=2",
        "L=8", "adapter_epochs=3", "adapter_hidden=32", "svm_epochs=20", "batch_size=16"]


def _cfg(*extra):
    return load_config(None, TINY + list(extra))


def _stream(classes=6, M=2, seed=0):
    return split_tasks(make_blobs(20, classes, seed=0), make_blobs(6, classes, seed=1), M, seed)


class TestOrchestration:
    def test_full_run(self, tmp_path):
        stream = _stream()
        metrics = run(_cfg("track_provenance_images=true"), stream, out_dir=tmp_path)
        assert [c["classes_seen"] for c in metrics.curve] == [2, 4, 6]
        assert all(0 <= c["accuracy"] <= 1 for c in metrics.curve)
        assert metrics.omega_prev[0] is None and all(-1 <= w <= 1 for w in metrics.omega_prev[1:])
        assert metrics.omega_first[0] == pytest.approx(1.0, abs=1e-5)
        for name in ("metrics.json", "curve.csv", "footprint.json", "memory.frmem",
                     "task_003.ckpt", "memory_task_001.frmem"):
            assert (tmp_path / name).exists()

    def test_memory_invariants(self):
        stream = _stream()
        tr = IncrementalTrainer(_cfg(), stream)
        for t, split in enumerate(stream.tasks, start=1):
            tr.train_task(split)
            mem = tr.state.memory
            mem.check()
            assert set(mem.classes) == set(tr.state.seen)
            assert all(n <= 8 for n in mem.counts().values())
            for k, task in enumerate(stream.tasks[:t], start=1):
                for c in task.classes:
                    assert np.all(mem.slots[c].adapt_count == t - k)
            assert tr.state.model.head.n_classes == 2 * t

    def test_only_current_task_data(self):
        stream = _stream()
        log = stream.enable_access_log()
        tr = IncrementalTrainer(_cfg(), stream)

        def forbidden(rows):
            raise AssertionError("raw images of past tasks touched")

        stream.source_images = forbidden
        for split in stream.tasks:
            start = len(log)
            tr.train_task(split)
            assert {t for t, _ in log[start:]} == {split.task_index}

    def test_frozen_model_untouched(self, monkeypatch):
        stream = _stream()
        tr = IncrementalTrainer(_cfg(), stream)
        tr.train_task(stream.tasks[0])
        digests = []
        import featrehearse.trainer as trainer_mod
        real = trainer_mod.adaptation.build_pairs

        def spy(old, new, *a, **k):
            digests.append(param_digest(old))
            return real(old, new, *a, **k)

        before = param_digest(tr.state.model.extractor)
        monkeypatch.setattr(trainer_mod.adaptation, "build_pairs", spy)
        tr.train_task(stream.tasks[1])
        assert digests == [before]
        assert tr.state.frozen is None

    def test_task_order_enforced(self):
        stream = _stream()
        tr = IncrementalTrainer(_cfg(), stream)
        with pytest.raises(OrchestrationError):
            tr.train_task(stream.tasks[1])
        with pytest.raises(OrchestrationError):
            train_incremental_task(tr, stream.tasks[0])
        train_first_task(tr, stream.tasks[0])
        with pytest.raises(OrchestrationError):
            train_first_task(tr, stream.tasks[1])

    def test_seed_purposes_differ(self):
        assert len({task_seed(0, 1, p) for p in ("init", "head", "batches", "adapter", "svm", "augment")}) == 6


class TestModes:
    def test_hybrid_stores_images(self):
        stream = _stream()
        tr = IncrementalTrainer(_cfg("P=3"), stream)
        for split in stream.tasks:
            tr.train_task(split)
        assert tr.state.exemplars.counts() == {c: 3 for c in range(6)}
        fp = tr.state.metrics.footprint[-1]
        assert fp["image_bytes"] == 18 * 8 * 8
        assert fp["feature_bytes"] == 6 * 8 * 16 * 4

    def test_lwf_baseline(self):
        m = run(_cfg("L=0", "classifier=network_head"), _stream())
        assert len(m.curve) == 3
        assert m.footprint[-1]["total_bytes"] == 0

    def test_images_only(self):
        m = run(_cfg("L=0", "P=4"), _stream())
        assert len(m.curve) == 3

    def test_unbalanced_pool(self):
        m = run(_cfg("balanced=false", "unbalanced_full_pool=true"), _stream())
        assert len(m.curve) == 3

    def test_remainder_task(self):
        m = run(_cfg("M=4"), _stream(M=4))
        assert [c["classes_seen"] for c in m.curve] == [4, 6]

    def test_config_errors(self):
        with pytest.raises(ConfigError) as err:
            load_config(None, ["nonsense=1"])
        assert err.value.key == "nonsense"
        with pytest.raises(ConfigError):
            load_config(None, ["L=0", "P=0"])


class TestDeterminismAndResume:
    def test_two_runs_identical(self, tmp_path):
        run(_cfg(), _stream(), out_dir=tmp_path / "a")
        run(_cfg(), _stream(), out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "memory.frmem").read_bytes() == (tmp_path / "b" / "memory.frmem").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = _cfg()
        full = run(cfg, _stream(), out_dir=tmp_path / "full")
        run(cfg, _stream(), out_dir=tmp_path / "part", stop_after=2)
        resumed = run(cfg, _stream(), out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "task_002.ckpt")
        assert resumed.to_json() == full.to_json()
        assert (tmp_path / "full" / "memory.frmem").read_bytes() == (tmp_path / "part" / "memory.frmem").read_bytes()

    def test_resume_wrong_order(self, tmp_path):
        run(_cfg(), _stream(), out_dir=tmp_path, stop_after=1)
        with pytest.raises(ConsistencyError):
            run(_cfg(), _stream(seed=9), resume_from=tmp_path / "task_001.ckpt")


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.array([1, 2], np.int32),
                  "c": np.array([7], np.int64), "d": np.zeros((2, 2), np.uint8)}
        write_checkpoint(tmp_path / "x.ckpt", {"k": [1, 2]}, arrays)
        raw = (tmp_path / "x.ckpt").read_bytes()
        assert raw[:8] == b"FRCKPT1\x00"
        meta, back = read_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"k": [1, 2]}
        assert back["a"].dtype == np.float32
        for k, v in arrays.items():
            np.testing.assert_array_equal(back[k], v)

    def test_corrupt(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {}, {"a": np.ones(4)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
        (tmp_path / "t.ckpt").write_bytes(raw[:20])
        (tmp_path / "s.ckpt").write_bytes(raw[:-4])
        for name in ("m.ckpt", "t.ckpt", "s.ckpt"):
            with pytest.raises(CorruptArtifactError):
                read_checkpoint(tmp_path / name)

    def test_checkpoint_meta(self, tmp_path):
        run(_cfg(), _stream(), out_dir=tmp_path, stop_after=1)
        meta, arrays = read_checkpoint(tmp_path / "task_001.ckpt")
        assert meta["task"] == 1 and meta["config"]["L"] == 8
        assert "clf/weights" in arrays and "norm/mean" in arrays
        json.dumps(meta)
