"""Self-describing checkpoint container.

Layout (a zip archive):
    manifest.json         version, model config, step, rng state (base64),
                          and per-array name/shape/dtype records
    params/<name>.bin     raw little-endian float32 data, C order
    opt/<name>.bin        optimizer moment arrays, same encoding (optional)

Round-trips are bit-exact: arrays are written from and restored to float32
without conversion.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Transformer

FORMAT_VERSION = 1


def _array_bytes(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().numpy()
    return np.ascontiguousarray(a).astype("<f4", copy=False).tobytes()


def _record(name: str, t: torch.Tensor) -> dict:
    return {"name": name, "shape": list(t.shape), "dtype": "float32"}


def save_checkpoint(
    path: str | Path,
    model: Transformer,
    step: int = 0,
    optimizer_state: dict[str, torch.Tensor] | None = None,
    rng_state: torch.Tensor | None = None,
    extra: dict | None = None,
) -> None:
    """Write model (and optional optimizer) state atomically via temp + rename."""
    path = Path(path)
    state = model.state_dict()
    manifest = {
        "version": FORMAT_VERSION,
        "config": {k: (v.value if hasattr(v, "value") else v)
                   for k, v in dataclasses.asdict(model.cfg).items()},
        "step": int(step),
        "params": [_record(n, t) for n, t in state.items()],
        "opt": [_record(n, t) for n, t in (optimizer_state or {}).items()],
        "rng_state": base64.b64encode(
            rng_state.numpy().tobytes()).decode() if rng_state is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, t in state.items():
            zf.writestr(f"params/{name}.bin", _array_bytes(t))
        for name, t in (optimizer_state or {}).items():
            zf.writestr(f"opt/{name}.bin", _array_bytes(t))
    tmp.replace(path)


def _read_arrays(zf: zipfile.ZipFile, prefix: str, records: list[dict]):
    out = {}
    for rec in records:
        raw = zf.read(f"{prefix}/{rec['name']}.bin")
        a = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
        out[rec["name"]] = torch.from_numpy(a)
    return out


def load_checkpoint(path: str | Path):
    """Load a checkpoint; returns (model, info dict).

    info carries step, optimizer_state, rng_state, and the raw manifest.
    """
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        cfg = ModelConfig(**manifest["config"])
        model = Transformer(cfg)
        params = _read_arrays(zf, "params", manifest["params"])
        model.load_state_dict(params)
        opt_state = _read_arrays(zf, "opt", manifest["opt"]) if manifest["opt"] else None
        rng_state = None
        if manifest.get("rng_state"):
            rng_state = torch.from_numpy(np.frombuffer(
                base64.b64decode(manifest["rng_state"]), dtype=np.uint8).copy())
    info = {
        "step": manifest["step"],
        "optimizer_state": opt_state,
        "rng_state": rng_state,
        "extra": manifest.get("extra", {}),
        "manifest": manifest,
    }
    return model, info
