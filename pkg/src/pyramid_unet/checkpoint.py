"""Portable checkpoint archive.

A checkpoint is a zip file with two kinds of members:

``manifest.json``
    ``{"format": "pyramid-unet", "version": 1, "network": {...NetworkConfig...},
    "tensors": [names in state_dict order], "metadata": {...}}``

``tensors/<parameter name>``
    ``b"PUT1"``, uint32 ndim, ndim x uint32 dims, then the values as
    little-endian float32 in C order. Integer buffers (batch-norm counters)
    are stored as float32 too and cast back on load.

Nothing in the format depends on Python or torch pickling.
"""
from __future__ import annotations

import json
import struct
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .network import NetworkConfig, PyramidUNet

FORMAT_NAME = "pyramid-unet"
FORMAT_VERSION = 1
_MAGIC = b"PUT1"


class CheckpointError(RuntimeError):
    pass


def encode_tensor(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).numpy()
    header = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != _MAGIC:
        raise CheckpointError("tensor entry has a bad magic header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    data = np.frombuffer(blob, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor payload has {data.size} values, header says {shape}")
    return data.reshape(shape)


def save_checkpoint(net: PyramidUNet, path, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "network": net.cfg.to_dict(),
        "tensors": list(state),
        "metadata": metadata or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, tensor in state.items():
            zf.writestr(f"tensors/{name}", encode_tensor(tensor))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} is not a valid checkpoint: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format {manifest.get('format')!r} v{manifest.get('version')}"
        )
    return manifest


def load_checkpoint(path) -> Tuple[PyramidUNet, dict]:
    """Rebuild the network stored at ``path``; returns ``(net, metadata)``."""
    path = Path(path)
    manifest = read_manifest(path)
    net = PyramidUNet(NetworkConfig.from_dict(manifest["network"]))
    own = net.state_dict()
    state: Dict[str, torch.Tensor] = {}
    with zipfile.ZipFile(path) as zf:
        for name in manifest["tensors"]:
            if name not in own:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            arr = decode_tensor(zf.read(f"tensors/{name}"))
            if tuple(arr.shape) != tuple(own[name].shape):
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(own[name].shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(own[name].dtype)
    missing = set(own) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    net.load_state_dict(state)
    net.eval()
    return net, manifest.get("metadata", {})
