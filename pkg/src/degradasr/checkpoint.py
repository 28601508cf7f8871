"""Self-describing checkpoint container: named arrays + JSON metadata.

One .npz file per checkpoint; torch state dicts are stored as prefixed
numpy arrays so checkpoints stay framework-portable and diffable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    payload = {f"arr/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    with np.load(p) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        arrays = {k[4:]: data[k] for k in data.files if k.startswith("arr/")}
    return arrays, meta


def state_dict_to_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_state_dict_from_arrays(prefix: str, arrays: dict[str, np.ndarray],
                                module: torch.nn.Module) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v))
             for k, v in arrays.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state)


def params_checksum(module: torch.nn.Module) -> float:
    """Cheap fingerprint used to assert parameters did not change."""
    return float(sum(p.detach().double().abs().sum().item()
                     for p in module.parameters()))
