"""Portable checkpoints: a zip of named float32 .npy arrays plus a JSON manifest.

Entries are written uncompressed with a pinned timestamp and sorted names, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on malformed or incomplete checkpoint files."""


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o600 << 16
    zf.writestr(info, payload)


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(
    path: str | Path,
    model_state: dict[str, torch.Tensor],
    config: RunConfig,
    step: int,
    optimizer_state: dict[str, dict[str, np.ndarray]] | None = None,
) -> None:
    """Write all parameters as float32 arrays under ``params/``; optimizer
    moments under ``optim/``; config and step in ``manifest.json``."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model_state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype in (np.float64, np.float32, np.float16):
            arr = arr.astype(np.float32)
        arrays[f"params/{name}.npy"] = arr
    if optimizer_state:
        for pname, slots in optimizer_state.items():
            for slot, arr in slots.items():
                arrays[f"optim/{pname}/{slot}.npy"] = np.asarray(arr, dtype=np.float32)

    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config.to_dict(),
        "arrays": sorted(arrays),
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json", payload)
        for name in sorted(arrays):
            _write_entry(zf, name, _array_bytes(arrays[name]))


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint into plain Python/numpy structures.

    Returns ``{"config": RunConfig, "step": int, "model_state": {name: tensor},
    "optimizer_state": {param: {slot: array}}}``.
    """
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise CheckpointError("checkpoint missing manifest.json")
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {manifest.get('format_version')}")
        model_state: dict[str, torch.Tensor] = {}
        optimizer_state: dict[str, dict[str, np.ndarray]] = {}
        for entry in manifest["arrays"]:
            if entry not in names:
                raise CheckpointError(f"manifest lists missing array {entry}")
            arr = np.load(io.BytesIO(zf.read(entry)), allow_pickle=False)
            if entry.startswith("params/"):
                pname = entry[len("params/") : -len(".npy")]
                model_state[pname] = torch.from_numpy(arr.copy())
            elif entry.startswith("optim/"):
                rest = entry[len("optim/") : -len(".npy")]
                pname, slot = rest.rsplit("/", 1)
                optimizer_state.setdefault(pname, {})[slot] = arr.copy()
    return {
        "config": RunConfig.from_dict(manifest["config"]),
        "step": int(manifest["step"]),
        "model_state": model_state,
        "optimizer_state": optimizer_state,
    }


def adam_state_to_arrays(
    optimizer: torch.optim.Adam, named_params: list[tuple[str, torch.nn.Parameter]]
) -> dict[str, dict[str, np.ndarray]]:
    """Extract Adam moments keyed by parameter name for checkpointing."""
    out: dict[str, dict[str, np.ndarray]] = {}
    state = optimizer.state
    for name, param in named_params:
        if param in state and "exp_avg" in state[param]:
            slots = state[param]
            out[name] = {
                "exp_avg": slots["exp_avg"].detach().cpu().numpy(),
                "exp_avg_sq": slots["exp_avg_sq"].detach().cpu().numpy(),
                "step_count": np.asarray([float(slots["step"])], dtype=np.float32),
            }
    return out


def arrays_to_adam_state(
    optimizer: torch.optim.Adam,
    named_params: list[tuple[str, torch.nn.Parameter]],
    arrays: dict[str, dict[str, np.ndarray]],
) -> None:
    """Restore Adam moments saved by :func:`adam_state_to_arrays`."""
    for name, param in named_params:
        if name in arrays:
            slots = arrays[name]
            optimizer.state[param] = {
                "step": torch.tensor(float(slots["step_count"][0])),
                "exp_avg": torch.from_numpy(slots["exp_avg"].copy()).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(slots["exp_avg_sq"].copy()).to(param.dtype),
            }
