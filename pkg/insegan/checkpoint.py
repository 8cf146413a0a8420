"""Checkpoint container (format ``insegan-ckpt/1``).

A checkpoint is a zip archive, stored uncompressed with fixed timestamps so
identical state always gives identical bytes:

    manifest.json        format id, epoch, step, tensor index, optimizer
                         param groups, numpy RNG state
    config.json          TrainConfig snapshot
    tensors/<name>.bin   uint32 LE ndim, uint32 LE dims, then the data;
                         parameters and optimizer moments as LE float32,
                         the torch RNG state as uint8
"""

import hashlib
import io
import json
import logging
import os
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from .config import CHECKPOINT_FORMAT, TrainConfig
from .nets import Networks, build_networks

logger = logging.getLogger(__name__)

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1")}


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt or of an unsupported format."""


@dataclass
class LoadedCheckpoint:
    networks: Networks
    config: TrainConfig
    epoch: int
    step: int
    checkpoint_id: str
    optimizer_states: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    torch_rng_state: Optional[torch.Tensor] = None
    numpy_rng_state: Optional[Dict[str, Any]] = None


def checkpoint_id(path: Path) -> str:
    """First 12 hex digits of the file's SHA-256."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _encode(array: np.ndarray, kind: str) -> bytes:
    array = np.ascontiguousarray(array, dtype=_DTYPES[kind])
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes()


def _decode(blob: bytes, kind: str) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    data = np.frombuffer(blob, dtype=_DTYPES[kind], offset=4 + 4 * ndim)
    return data.reshape(shape).astype(_DTYPES[kind].newbyteorder("="))


def _writestr(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, data)


def _optimizer_entries(
    name: str, optimizer: torch.optim.Optimizer
) -> Tuple[List[Dict[str, Any]], List[Tuple[str, np.ndarray]]]:
    state = optimizer.state_dict()
    blobs = []
    for index in sorted(state["state"]):
        for key in sorted(state["state"][index]):
            value = state["state"][index][key]
            tensor = torch.as_tensor(value, dtype=torch.float32).detach().cpu()
            blobs.append((f"optim/{name}/{index}/{key}", tensor.numpy()))
    return state["param_groups"], blobs


def save_checkpoint(
    path: Path,
    networks: Networks,
    config: TrainConfig,
    epoch: int,
    step: int,
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    torch_rng: Optional[torch.Generator] = None,
    numpy_rng: Optional[np.random.Generator] = None,
) -> str:
    """Write a checkpoint atomically (temp file, then rename).

    Returns:
        The checkpoint id of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: List[Tuple[str, np.ndarray, str]] = []
    for net_name, module in networks.named_modules():
        for key, value in module.state_dict().items():
            tensors.append((f"{net_name}/{key}", value.detach().cpu().float().numpy(), "f4"))

    param_groups: Dict[str, Any] = {}
    for net_name, optimizer in (optimizers or {}).items():
        groups, blobs = _optimizer_entries(net_name, optimizer)
        param_groups[net_name] = groups
        tensors.extend((blob_name, array, "f4") for blob_name, array in blobs)
    if torch_rng is not None:
        tensors.append(("rng/torch", torch_rng.get_state().numpy(), "u1"))

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "step": step,
        "tensors": [
            {"name": name, "shape": list(array.shape), "dtype": kind} for name, array, kind in tensors
        ],
        "optimizers": param_groups,
        "numpy_rng": numpy_rng.bit_generator.state if numpy_rng is not None else None,
    }

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        _writestr(archive, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        _writestr(archive, "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True).encode())
        for name, array, kind in tensors:
            _writestr(archive, f"tensors/{name}.bin", _encode(array, kind))

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    os.replace(tmp, path)
    ckpt_id = hashlib.sha256(buffer.getvalue()).hexdigest()[:12]
    logger.info("Saved checkpoint %s (epoch %d, step %d, id %s)", path, epoch, step, ckpt_id)
    return ckpt_id


def load_checkpoint(path: Path, device: str = "cpu") -> LoadedCheckpoint:
    """Read a checkpoint and rebuild its networks.

    Raises:
        CheckpointError: On unreadable files, wrong format or missing tensors.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
        archive = zipfile.ZipFile(io.BytesIO(raw))
        manifest = json.loads(archive.read("manifest.json"))
        config_data = json.loads(archive.read("config.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")

    config = TrainConfig.from_dict(config_data)
    arrays: Dict[str, np.ndarray] = {}
    with archive:
        for entry in manifest["tensors"]:
            try:
                blob = archive.read(f"tensors/{entry['name']}.bin")
            except KeyError as exc:
                raise CheckpointError(f"{path}: missing tensor {entry['name']}") from exc
            arrays[entry["name"]] = _decode(blob, entry["dtype"])

    networks = build_networks(config.variant, config.nets, config.n_instances, config.latent_dim)
    for net_name, module in networks.named_modules():
        prefix = f"{net_name}/"
        state = {
            key[len(prefix):]: torch.from_numpy(value.copy())
            for key, value in arrays.items()
            if key.startswith(prefix)
        }
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: {net_name} weights do not fit: {exc}") from exc
    networks.to(device)

    optimizer_states: Dict[str, Dict[str, Any]] = {}
    for net_name, groups in manifest.get("optimizers", {}).items():
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        prefix = f"optim/{net_name}/"
        for key, value in arrays.items():
            if key.startswith(prefix):
                index, slot = key[len(prefix):].split("/")
                state.setdefault(int(index), {})[slot] = torch.from_numpy(value.copy())
        optimizer_states[net_name] = {"state": state, "param_groups": groups}

    torch_rng = arrays.get("rng/torch")
    return LoadedCheckpoint(
        networks=networks,
        config=config,
        epoch=int(manifest["epoch"]),
        step=int(manifest["step"]),
        checkpoint_id=hashlib.sha256(raw).hexdigest()[:12],
        optimizer_states=optimizer_states,
        torch_rng_state=torch.from_numpy(torch_rng.copy()) if torch_rng is not None else None,
        numpy_rng_state=manifest.get("numpy_rng"),
    )
