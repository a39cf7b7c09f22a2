"""Checkpoint directories: ``manifest.json`` plus one raw float32 file per tensor.

Every floating-point tensor of a ``state_dict`` is written C-ordered as
little-endian IEEE-754 float32 to ``tensors/<name>.f32``.  Integer buffers
(BatchNorm's batch counters) are small and live in the manifest.  Loading
reproduces the saved float32 values bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DependencyError, FormatError

FORMAT = "pnpseg-checkpoint/1"
F32 = np.dtype("<f4")


def save_checkpoint(directory: str | Path, state: dict[str, torch.Tensor], meta: dict) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    tensors, ints = [], {}
    for name, t in state.items():
        t = t.detach().cpu()
        if not t.is_floating_point():
            ints[name] = t.tolist()
            continue
        arr = np.ascontiguousarray(t.to(torch.float32).numpy(), dtype=F32)
        fname = f"{name}.f32"
        (directory / "tensors" / fname).write_bytes(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "file": fname, "dtype": F32.str})
    manifest = {"format": FORMAT, **meta, "tensors": tensors, "integer_buffers": ints}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DependencyError(f"no checkpoint at {directory}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    state: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        raw = (directory / "tensors" / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * F32.itemsize
        if len(raw) != expected:
            raise FormatError(f"{entry['file']}: expected {expected} bytes, found {len(raw)}")
        state[entry["name"]] = torch.from_numpy(np.frombuffer(raw, dtype=F32).reshape(shape).copy())
    for name, value in manifest.get("integer_buffers", {}).items():
        state[name] = torch.tensor(value, dtype=torch.long)
    return state, manifest


def save_segmenter(model, directory: str | Path, iteration: int = 0, extra: dict | None = None) -> Path:
    from .segnet import LAYER_NAMES

    meta = {
        "kind": "segmenter",
        "layer_names": list(LAYER_NAMES),
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "iteration": iteration,
        **(extra or {}),
    }
    return save_checkpoint(directory, model.state_dict(), meta)


def load_segmenter(directory: str | Path):
    from .segnet import NetworkConfig, SegNet

    state, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "segmenter":
        raise FormatError(f"{directory} is not a segmenter checkpoint")
    model = SegNet(NetworkConfig.from_dict(manifest["config"]), manifest.get("seed", 0))
    model.load_state_dict(state)
    model.eval()
    return model
