"""Checkpoint container, training loop behavior, and eval reports."""

import csv
import json

import numpy as np
import pytest

from spatea import checkpoint as ckpt
from spatea import compress as cp
from spatea import model as mdl
from spatea import nbody
from spatea import train as tr

TINY = mdl.ModelConfig(d=2, chi=2, sigma=2, chi_t=2, layers=2,
                       msg_width=4, msg_hidden=8, hyper_hidden=8)


def make_dataset(path, n_traj=24, seed=5, n_particles=4, steps=30):
    nbody.generate_dataset(n_traj, n_particles, "ES", 1e-3, steps, seed,
                           str(path))
    return str(path)


def metrics_sans_wall(path):
    with open(path, newline="") as fh:
        return [row[:4] for row in csv.reader(fh)]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = mdl.init_params(TINY, 3)
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, params, extra={"epoch": 7})
        config, loaded, doc = ckpt.load_checkpoint(path)
        assert config == TINY
        assert doc["extra"]["epoch"] == 7
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k])

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"magic": "nope", "arrays": {}}))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_checkpoint(str(path))
        path.write_text("not json at all")
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_checkpoint(str(path))

    def test_magic_string_in_file(self, tmp_path):
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, mdl.init_params(TINY, 0))
        assert b"SPATEA-CKPT-v1" in open(path, "rb").read()

    def test_missing_array_rejected(self, tmp_path):
        params = mdl.init_params(TINY, 0)
        params.pop("head.b")
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, params)
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = mdl.init_params(TINY, 0)
        params["head.b"] = np.zeros(5)
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, params)
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_checkpoint(path)

    def test_chain_section_roundtrip(self, tmp_path, rng):
        sites = [rng.standard_normal((1, 2, 3)) + 1j * rng.standard_normal((1, 2, 3)),
                 rng.standard_normal((3, 2, 1)) + 1j * rng.standard_normal((3, 2, 1))]
        chain = cp.MPSChain(sites)
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, mdl.init_params(TINY, 0),
                             chain=ckpt.chain_payload(chain))
        _, _, doc = ckpt.load_checkpoint(path)
        back = ckpt.chain_restore(doc["chain"])
        for a, b in zip(back.sites, sites):
            assert np.array_equal(a, b)


class TestRunConfig:
    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            tr.RunConfig(dataset="d", out_dir="o", lr=0.0)
        with pytest.raises(ValueError):
            tr.RunConfig(dataset="d", out_dir="o", epochs=0)
        with pytest.raises(ValueError):
            tr.RunConfig(dataset="d", out_dir="o", batch_size=0)
        with pytest.raises(ValueError):
            tr.RunConfig(dataset="d", out_dir="o", lr_factor=1.5)

    def test_dict_roundtrip(self):
        rc = tr.RunConfig(dataset="d", out_dir="o", model=TINY, epochs=3)
        back = tr.RunConfig.from_dict(rc.to_dict())
        assert back == rc


class TestTrain:
    def test_loss_decreases(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / "r"),
                          model=TINY, epochs=4, batch_size=8, seed=0)
        res = tr.train(rc, log=lambda *a: None)
        assert not res.aborted
        assert res.rows[-1].train_mse < res.rows[0].train_mse
        assert res.best_val_mse <= res.rows[0].val_mse

    def test_deterministic_given_seed(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        outs = []
        for name in ("a", "b"):
            rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / name),
                              model=TINY, epochs=3, batch_size=8, seed=1)
            res = tr.train(rc, log=lambda *a: None)
            outs.append(res)
        assert metrics_sans_wall(outs[0].metrics_path) == \
            metrics_sans_wall(outs[1].metrics_path)
        assert open(outs[0].checkpoint_path, "rb").read() == \
            open(outs[1].checkpoint_path, "rb").read()

    def test_seed_changes_run(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        vals = []
        for seed in (0, 1):
            rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / f"s{seed}"),
                              model=TINY, epochs=2, batch_size=8, seed=seed)
            vals.append(tr.train(rc, log=lambda *a: None).best_val_mse)
        assert vals[0] != vals[1]

    def test_metrics_file_schema(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / "r"),
                          model=TINY, epochs=3, batch_size=8, seed=0)
        res = tr.train(rc, log=lambda *a: None)
        rows = tr.read_metrics(res.metrics_path)
        assert [r.epoch for r in rows] == [1, 2, 3]
        assert all(r.train_mse >= 0 and r.val_mse >= 0 for r in rows)
        with open(res.metrics_path) as fh:
            assert fh.readline().strip() == "epoch,train_mse,val_mse,lr,wall_seconds"

    def test_read_metrics_validates(self, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("epoch,train_mse,val_mse,lr,wall_seconds\n"
                       "1,0.5,0.5,0.001,1.0\n1,0.4,0.4,0.001,2.0\n")
        with pytest.raises(ValueError):
            tr.read_metrics(str(bad))
        bad.write_text("epoch,mse\n")
        with pytest.raises(ValueError):
            tr.read_metrics(str(bad))

    def test_nan_target_aborts_with_checkpoint(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl", n_traj=8)
        samples = nbody.read_dataset(data)
        for s in samples:
            s["target_positions"][0][0] = float("nan")
        poisoned = tmp_path / "bad.jsonl"
        with open(poisoned, "w") as fh:
            for s in samples:
                fh.write(json.dumps(s) + "\n")
        rc = tr.RunConfig(dataset=str(poisoned), out_dir=str(tmp_path / "r"),
                          model=TINY, epochs=3, batch_size=4, seed=0)
        res = tr.train(rc, log=lambda *a: None)
        assert res.aborted
        config, params, doc = ckpt.load_checkpoint(res.checkpoint_path)
        assert doc["extra"]["epoch"] == 0  # the pre-training snapshot survives
        for k, v in mdl.init_params(TINY, 0).items():
            assert np.array_equal(params[k], v)

    def test_plateau_halves_lr(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl", n_traj=8)
        # lr far below float resolution: params never move, val never
        # improves after the first epoch, so the scheduler must kick in
        rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / "r"),
                          model=TINY, epochs=4, batch_size=8, seed=0,
                          lr=1e-30, min_lr=1e-40, patience=1)
        res = tr.train(rc, log=lambda *a: None)
        lrs = [r.lr for r in res.rows]
        assert lrs[-1] < lrs[0]

    def test_min_lr_floor(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl", n_traj=8)
        rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / "r"),
                          model=TINY, epochs=6, batch_size=8, seed=0,
                          lr=1e-30, min_lr=1e-30, patience=1)
        res = tr.train(rc, log=lambda *a: None)
        assert all(r.lr >= 1e-30 for r in res.rows)

    def test_baseline_variant_trains(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        base_cfg = mdl.ModelConfig(d=2, chi=2, sigma=2, chi_t=2, layers=2,
                                   msg_width=4, msg_hidden=8,
                                   variant="baseline")
        rc = tr.RunConfig(dataset=data, out_dir=str(tmp_path / "r"),
                          model=base_cfg, epochs=2, batch_size=8, seed=0)
        res = tr.train(rc, log=lambda *a: None)
        assert not res.aborted and len(res.rows) == 2


class TestEvaluate:
    def test_identity_model_predicts_inputs(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        cfg = mdl.ModelConfig(d=2, chi=2, sigma=1, chi_t=2, layers=1,
                              msg_width=4, msg_hidden=4, hyper_hidden=4)
        zeros = {k: np.zeros_like(v) for k, v in mdl.init_params(cfg, 0).items()}
        path = str(tmp_path / "zero.json")
        ckpt.save_checkpoint(path, cfg, zeros)
        report = tr.evaluate_checkpoint(path, data, split="test")
        test = nbody.split_dataset(nbody.read_dataset(data))["test"]
        want = float(np.mean([
            (np.array(s["positions"]) - np.array(s["target_positions"])) ** 2
            for s in test]))
        assert abs(report["test_mse"] - want) <= 1e-12
        assert report["n_samples"] == len(test)
        assert report["field"] == "ES"

    def test_eval_deterministic(self, tmp_path):
        data = make_dataset(tmp_path / "d.jsonl")
        path = str(tmp_path / "c.json")
        ckpt.save_checkpoint(path, TINY, mdl.init_params(TINY, 2))
        a = tr.evaluate_checkpoint(path, data)
        b = tr.evaluate_checkpoint(path, data)
        assert a == b
