"""Checkpoint archive: one zip mapping parameter names to shape-prefixed
little-endian float arrays plus a JSON manifest with config and stage.
Loading verifies name/shape agreement and fails loudly otherwise."""

import hashlib
import json
import zipfile

import numpy as np
import torch

from .arrayio import array_from_bytes, array_to_bytes


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: torch.nn.Module, config: dict, stage: str,
                    extra: dict = None) -> None:
    state = model.state_dict()
    manifest = {
        "config": config,
        "stage": stage,
        "parameters": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, tensor in state.items():
            zf.writestr(f"arrays/{name}.bin",
                        array_to_bytes(tensor.detach().cpu().numpy().astype("<f4")))


def load_checkpoint(path, model: torch.nn.Module) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        state = model.state_dict()
        saved = manifest["parameters"]
        if set(saved) != set(state):
            missing = set(state) - set(saved)
            surplus = set(saved) - set(state)
            raise CheckpointError(f"parameter name mismatch (missing={sorted(missing)}, "
                                  f"surplus={sorted(surplus)})")
        new_state = {}
        for name, tensor in state.items():
            arr = array_from_bytes(zf.read(f"arrays/{name}.bin"))
            if list(arr.shape) != list(tensor.shape):
                raise CheckpointError(f"shape mismatch for {name}: "
                                      f"{list(arr.shape)} vs {list(tensor.shape)}")
            new_state[name] = torch.from_numpy(arr.astype(np.float32)).to(tensor.dtype)
        model.load_state_dict(new_state)
    return manifest


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def state_hash(model: torch.nn.Module, names=None) -> str:
    """Stable hash of (a subset of) the model state, for freezing checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if names is not None and not any(name.startswith(p) for p in names):
            continue
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
