"""Training, evaluation and prediction."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import DatasetSpec, SampleRecord, augment, normalize_channels, prepare_records, read_image, resize_image
from .losses import LossWeights, total_loss
from .metrics import evaluate_dataset, format_report
from .network import NetworkConfig, PyramidUNet, build_network

logger = logging.getLogger(__name__)

CHECKPOINT_DIR_ENV = "PYRAMID_UNET_CHECKPOINT_DIR"


class TrainingError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: Optional[DatasetSpec] = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 300
    lr_power: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_dir: str = "runs/pyramid_unet"
    val_count: int = 2
    augment: bool = True
    threshold: float = 0.5
    num_workers: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.val_count < 0:
            raise ValueError("val_count must be >= 0")
        self.betas = tuple(self.betas)
        if self.dataset is not None and tuple(self.dataset.target_size) != tuple(self.network.input_size):
            raise ValueError(
                f"dataset target_size {tuple(self.dataset.target_size)} differs from "
                f"network input_size {tuple(self.network.input_size)}"
            )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dataset"] = self.dataset.to_dict() if self.dataset else None
        d["network"] = self.network.to_dict()
        d["losses"] = asdict(self.losses)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if d.get("dataset") is not None:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        if "losses" in d:
            d["losses"] = LossWeights(**d["losses"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        """Read a JSON config; ``$PYRAMID_UNET_CHECKPOINT_DIR`` overrides ``checkpoint_dir``."""
        with open(path) as fh:
            cfg = cls.from_dict(json.load(fh))
        env = os.environ.get(CHECKPOINT_DIR_ENV)
        if env:
            cfg.checkpoint_dir = env
        return cfg


def poly_lr(base_lr: float, epoch: int, epochs: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - epoch / epochs) ** power


@dataclass
class RunLog:
    entries: List[dict] = field(default_factory=list)

    def append(self, entry: dict, path: Optional[Path] = None) -> None:
        if self.entries and entry["epoch"] <= self.entries[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.entries.append(entry)
        if path is not None:
            with open(path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")

    @classmethod
    def read(cls, path) -> "RunLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def record_to_tensors(record: SampleRecord):
    image = torch.from_numpy(np.ascontiguousarray(record.image.transpose(2, 0, 1)))
    vessel = torch.from_numpy(record.vessel_mask.astype(np.float32))[None]
    fov = torch.from_numpy(record.fov_mask.astype(np.float32))[None]
    return image, vessel, fov


class SegmentationDataset(Dataset):
    """Records as tensors, flipped with an RNG keyed on (seed, epoch, index).

    Keying the RNG on the item rather than the worker makes augmentation
    independent of the number of loader workers.
    """

    def __init__(self, records: Sequence[SampleRecord], seed: int = 0, augment: bool = True):
        self.records = list(records)
        self.seed = seed
        self.augment = augment
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        rec = self.records[index]
        if self.augment:
            rec = augment(rec, np.random.default_rng([self.seed, self.epoch, index]))
        return record_to_tensors(rec)


def _worker_init(base_seed: int):
    def init(worker_index: int):
        seed = base_seed + worker_index
        np.random.seed(seed)
        torch.manual_seed(seed)

    return init


@torch.no_grad()
def predict_probabilities(net: PyramidUNet, records: Sequence[SampleRecord], device="cpu") -> List[np.ndarray]:
    net.eval()
    out = []
    for rec in records:
        image, _, _ = record_to_tensors(rec)
        out.append(net(image[None].to(device)).main[0, 0].cpu().numpy())
    return out


def train(
    cfg: TrainConfig,
    train_records: Optional[Sequence[SampleRecord]] = None,
    val_records: Optional[Sequence[SampleRecord]] = None,
) -> Tuple[Path, RunLog]:
    """Train a network and return ``(last checkpoint path, run log)``.

    Without explicit records the configured dataset is loaded and split; the
    last ``val_count`` training images become the validation set used for
    best-checkpoint selection. ``last.ckpt`` is rewritten every epoch and
    ``best.ckpt`` whenever validation accuracy improves.
    """
    if train_records is None:
        if cfg.dataset is None:
            raise TrainingError("no dataset configured and no records given")
        train_records, _ = prepare_records(cfg.dataset)
        if val_records is None and cfg.val_count:
            train_records, val_records = train_records[: -cfg.val_count], train_records[-cfg.val_count:]
    train_records = list(train_records)
    val_records = list(val_records or [])
    if not train_records:
        raise TrainingError("no training records")

    out_dir = Path(cfg.checkpoint_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
        log_path = out_dir / "runlog.jsonl"
        log_path.write_text("")
    except OSError as exc:
        raise TrainingError(f"cannot write to checkpoint dir {out_dir}: {exc}") from exc

    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    device = torch.device(cfg.device)
    net = build_network(cfg.network, seed=cfg.seed).to(device)
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    dataset = SegmentationDataset(train_records, seed=cfg.seed, augment=cfg.augment)
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=cfg.num_workers,
        worker_init_fn=_worker_init(cfg.seed) if cfg.num_workers else None,
    )

    runlog = RunLog()
    best_acc = -math.inf
    last_path = out_dir / "last.ckpt"
    for epoch in range(cfg.epochs):
        lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        dataset.epoch = epoch
        net.train()
        losses = []
        for batch_index, (image, vessel, _) in enumerate(loader):
            image, vessel = image.to(device), vessel.to(device)
            loss = total_loss(net(image), vessel, cfg.losses)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch} batch {batch_index}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "time": time.time()}
        metadata = {"epoch": epoch, "train_loss": entry["train_loss"]}
        if val_records:
            probs = predict_probabilities(net, val_records, device)
            agg = evaluate_dataset(probs, val_records, cfg.threshold)["aggregate"]
            entry["val"] = {k: agg[k] for k in ("sen", "spec", "acc", "auc")}
            metadata["val"] = entry["val"]
        try:
            save_checkpoint(net, last_path, metadata)
            if val_records and entry["val"]["acc"] > best_acc:
                best_acc = entry["val"]["acc"]
                save_checkpoint(net, out_dir / "best.ckpt", metadata)
                entry["best"] = True
            runlog.append(entry, log_path)
        except OSError as exc:
            raise TrainingError(f"failed to write checkpoint or log in {out_dir}: {exc}") from exc
        logger.info("epoch %d lr %.3g loss %.4f", epoch, lr, entry["train_loss"])
    return last_path, runlog


def check_network_config(checkpoint, expected: NetworkConfig) -> None:
    stored = read_manifest(checkpoint)["network"]
    current = expected.to_dict()
    for key in sorted(set(stored) | set(current)):
        if stored.get(key) != current.get(key):
            raise ConfigMismatchError(
                f"checkpoint {checkpoint} has network.{key} = {stored.get(key)!r}, "
                f"current build uses {current.get(key)!r}"
            )


def evaluate(
    checkpoint,
    records: Sequence[SampleRecord],
    expected_network: Optional[NetworkConfig] = None,
    out_dir=None,
    threshold: float = 0.5,
) -> Dict:
    """Score a checkpoint on records; optionally write ``report.jsonl`` and ``report.txt``."""
    if expected_network is not None:
        check_network_config(checkpoint, expected_network)
    net, _ = load_checkpoint(checkpoint)
    probs = predict_probabilities(net, records)
    report = evaluate_dataset(probs, records, threshold)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w") as fh:
            for row in report["images"] + [report["aggregate"]]:
                fh.write(json.dumps(row) + "\n")
        (out / "report.txt").write_text(format_report(report) + "\n")
    return report


def load_for_prediction(image_path, size: Tuple[int, int]) -> np.ndarray:
    return normalize_channels(resize_image(read_image(Path(image_path)), size))


def predict(checkpoint, image_path, out_dir, threshold: float = 0.5) -> Tuple[Path, Path]:
    """Write ``<stem>_prob.png`` (16-bit, [0,1] -> [0,65535]) and ``<stem>_bin.png``."""
    net, _ = load_checkpoint(checkpoint)
    image = load_for_prediction(image_path, net.cfg.input_size)
    with torch.no_grad():
        prob = net(torch.from_numpy(image.transpose(2, 0, 1).copy())[None]).main[0, 0].numpy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    prob_path, bin_path = out / f"{stem}_prob.png", out / f"{stem}_bin.png"
    encoded = np.round(np.clip(prob, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(encoded).save(prob_path)
    Image.fromarray(((prob >= threshold) * 255).astype(np.uint8)).save(bin_path)
    return prob_path, bin_path
