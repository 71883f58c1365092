import json
import zipfile

import numpy as np
import pytest
import torch
from PIL import Image

from pyramid_unet.checkpoint import CheckpointError, decode_tensor, load_checkpoint, save_checkpoint
from pyramid_unet.data import SampleRecord, preprocess
from pyramid_unet.engine import (
    CHECKPOINT_DIR_ENV,
    ConfigMismatchError,
    RunLog,
    TrainConfig,
    TrainingError,
    evaluate,
    poly_lr,
    predict,
    train,
)
from pyramid_unet.losses import LossWeights, total_loss
from pyramid_unet.network import NetworkConfig, build_network

from synthetic import fundus_like

SMALL = NetworkConfig(depth=2, base_channels=8, input_size=(64, 64))


def synthetic_records(n, size=64, offset=0):
    out = []
    for i in range(n):
        rgb, vessel, fov = fundus_like(96, 96, seed=offset + i)
        rec = SampleRecord(f"{offset + i:02d}_synthetic", rgb.astype(np.float32) / 255, vessel, fov)
        out.append(preprocess(rec, (size, size), crop_to_fov=True))
    return out


@pytest.fixture(scope="module")
def records():
    return synthetic_records(4)


def small_config(tmp_path, **kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("val_count", 0)
    return TrainConfig(network=SMALL, checkpoint_dir=str(tmp_path), **kw)


class TestSchedule:
    def test_formula(self):
        for epoch in range(300):
            assert abs(poly_lr(1e-3, epoch, 300) - 1e-3 * (1 - epoch / 300) ** 0.9) <= 1e-12

    def test_non_increasing(self):
        values = [poly_lr(1e-3, e, 50) for e in range(50)]
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(network=SMALL, losses=LossWeights(lambda_aux=0.25), epochs=3)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        back = TrainConfig.load(path)
        assert back.to_dict() == cfg.to_dict()

    def test_env_overrides_checkpoint_dir(self, tmp_path, monkeypatch):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(TrainConfig(network=SMALL).to_dict()))
        monkeypatch.setenv(CHECKPOINT_DIR_ENV, str(tmp_path / "elsewhere"))
        assert TrainConfig.load(path).checkpoint_dir == str(tmp_path / "elsewhere")

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1})

    def test_dataset_size_must_match_network(self, tmp_path):
        with pytest.raises(ValueError, match="target_size"):
            TrainConfig.from_dict({"dataset": {"kind": "drive", "root": str(tmp_path)}, "network": SMALL.to_dict()})

    def test_training_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4 and cfg.weight_decay == 1e-4 and cfg.betas == (0.9, 0.999)


class TestTrain:
    def test_one_epoch_one_checkpoint(self, tmp_path, records):
        path, log = train(small_config(tmp_path), records)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["last.ckpt"]
        assert path == tmp_path / "last.ckpt"
        assert len(log.entries) == 1
        assert len(RunLog.read(tmp_path / "runlog.jsonl").entries) == 1

    def test_seeded_runs_identical(self, tmp_path, records):
        _, a = train(small_config(tmp_path / "a", seed=3), records)
        _, b = train(small_config(tmp_path / "b", seed=3), records)
        assert a.entries[-1]["train_loss"] == b.entries[-1]["train_loss"]
        net_a, _ = load_checkpoint(tmp_path / "a" / "last.ckpt")
        net_b, _ = load_checkpoint(tmp_path / "b" / "last.ckpt")
        assert all(torch.equal(p, q) for p, q in zip(net_a.state_dict().values(), net_b.state_dict().values()))

    def test_validation_and_best(self, tmp_path, records):
        _, log = train(small_config(tmp_path, epochs=2), records[:2], records[2:])
        assert (tmp_path / "best.ckpt").exists()
        assert all("val" in e for e in log.entries)
        assert log.entries[0].get("best")
        lrs = [e["lr"] for e in log.entries]
        assert lrs == sorted(lrs, reverse=True)

    def test_non_finite_loss_aborts(self, tmp_path, records):
        bad = SampleRecord("nan", np.full_like(records[0].image, np.nan), records[0].vessel_mask, records[0].fov_mask)
        with pytest.raises(TrainingError, match="batch 0"):
            train(small_config(tmp_path, batch_size=1, augment=False), [bad])

    def test_unwritable_checkpoint_dir(self, tmp_path, records):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(TrainingError):
            train(small_config(blocker / "sub"), records)

    def test_fixed_batch_loss_decreases(self, records):
        torch.manual_seed(0)
        net = build_network(SMALL, seed=0).train()
        for m in net.modules():
            if isinstance(m, torch.nn.Dropout):
                m.p = 0.0
        opt = torch.optim.AdamW(net.parameters(), lr=1e-3, weight_decay=1e-4)
        image = torch.from_numpy(np.stack([r.image.transpose(2, 0, 1) for r in records]))
        gt = torch.from_numpy(np.stack([r.vessel_mask for r in records]).astype(np.float32))[:, None]
        losses = []
        for _ in range(21):
            loss = total_loss(net(image), gt, LossWeights())
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert losses[1] < losses[0]
        assert all(b <= a for a, b in zip(losses[1:], losses[2:]))

    def test_weight_decay_shrinks_norms(self):
        net = build_network(SMALL, seed=0)
        # large enough that one decay step is visible in float32
        opt = torch.optim.AdamW(net.parameters(), lr=1e-2, weight_decay=1e-1)
        previous = [p.detach().norm().item() for p in net.parameters()]
        for _ in range(3):
            opt.zero_grad()
            (sum(p.sum() for p in net.parameters()) * 0.0).backward()
            opt.step()
            current = [p.detach().norm().item() for p in net.parameters()]
            assert all(c < p for c, p in zip(current, previous) if p > 0)
            previous = current


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        net = build_network(SMALL, seed=4)
        net.train()
        net(torch.rand(2, 3, 64, 64))  # move batch-norm running stats off their defaults
        net.eval()
        path = save_checkpoint(net, tmp_path / "x.ckpt", {"epoch": 3})
        back, meta = load_checkpoint(path)
        assert meta == {"epoch": 3}
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            assert torch.equal(net(x).main, back(x).main)

    def test_archive_layout(self, tmp_path):
        net = build_network(SMALL, seed=4)
        path = save_checkpoint(net, tmp_path / "x.ckpt")
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            assert manifest["version"] == 1
            assert manifest["network"]["base_channels"] == 8
            name = "head.weight"
            arr = decode_tensor(zf.read(f"tensors/{name}"))
        assert arr.dtype == np.dtype("<f4")
        np.testing.assert_array_equal(arr, net.state_dict()[name].numpy())

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "missing.ckpt")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


@pytest.fixture(scope="module")
def fresh_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "fresh.ckpt"
    return save_checkpoint(build_network(SMALL, seed=9), path)


class TestEvaluatePredict:
    def test_report_rows(self, fresh_checkpoint, records, tmp_path):
        report = evaluate(fresh_checkpoint, records, SMALL, tmp_path)
        assert len(report["images"]) == len(records)
        assert 0.0 <= report["aggregate"]["auc"] <= 1.0
        lines = (tmp_path / "report.jsonl").read_text().splitlines()
        assert len(lines) == len(records) + 1
        assert json.loads(lines[-1])["id"] == "aggregate"

    @pytest.mark.xfail(
        reason="an untrained network is a fixed function of intensity, not a random scorer; "
        "measured AUC spans roughly 0.2 to 0.9 across seeds",
        strict=False,
    )
    def test_fresh_network_auc_near_chance(self, records, tmp_path):
        aucs = []
        for seed in range(6):
            path = save_checkpoint(build_network(SMALL, seed=seed), tmp_path / f"{seed}.ckpt")
            aucs.append(evaluate(path, records)["aggregate"]["auc"])
        assert all(0.3 <= a <= 0.7 for a in aucs), aucs

    def test_config_mismatch_names_field(self, fresh_checkpoint, records):
        other = NetworkConfig(depth=2, base_channels=16, input_size=(64, 64))
        with pytest.raises(ConfigMismatchError, match="base_channels"):
            evaluate(fresh_checkpoint, records, other)

    def test_evaluate_does_not_modify_checkpoint(self, fresh_checkpoint, records):
        before = fresh_checkpoint.read_bytes()
        evaluate(fresh_checkpoint, records)
        assert fresh_checkpoint.read_bytes() == before

    def test_predict_outputs(self, fresh_checkpoint, tmp_path):
        rgb, _, _ = fundus_like(80, 70, seed=1)
        src = tmp_path / "eye.png"
        Image.fromarray(rgb).save(src)
        prob_path, bin_path = predict(fresh_checkpoint, src, tmp_path / "a")
        prob = np.asarray(Image.open(prob_path))
        binary = np.asarray(Image.open(bin_path))
        assert prob.shape == binary.shape == (64, 64)
        assert prob.dtype == np.uint16
        assert set(np.unique(binary)) <= {0, 255}
        assert np.array_equal(binary == 255, prob >= 32768)
        again, _ = predict(fresh_checkpoint, src, tmp_path / "b")
        assert prob_path.read_bytes() == again.read_bytes()

    def test_predict_undecodable(self, fresh_checkpoint, tmp_path):
        src = tmp_path / "broken.png"
        src.write_bytes(b"nope")
        with pytest.raises(Exception, match="broken.png"):
            predict(fresh_checkpoint, src, tmp_path)
