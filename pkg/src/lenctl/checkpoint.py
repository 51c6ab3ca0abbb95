"""Binary checkpoint format.

Little-endian layout::

    b"LCTL" | u32 version | u32 len | config JSON | u32 n_arrays
    then per array: u32 len | name utf-8 | u32 ndim | u32 dims... | f32 data
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"LCTL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path: str | os.PathLike, config: dict, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_arrays(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an LCTL checkpoint")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        config = json.loads(take(u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt config block") from e
    arrays = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return config, arrays


def save_checkpoint(model: nn.Module, path: str | os.PathLike, extra: dict[str, Any] | None = None) -> None:
    """Write a model's config and parameters; ``extra`` rides along in the config block."""
    config = {"kind": model.kind, "model": model.cfg.to_dict(), "extra": extra or {}}
    if hasattr(model, "checkpoint_config"):
        config.update(model.checkpoint_config())
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_arrays(path, config, arrays)


def _build(config: dict) -> nn.Module:
    from .model import CriticModel, ModelConfig, PolicyModel

    kind = config.get("kind")
    cfg = ModelConfig.from_dict(config["model"])
    if kind == "policy":
        return PolicyModel(cfg)
    if kind == "critic":
        return CriticModel(cfg, **config.get("critic", {}))
    if kind == "extractor":
        from .spe import ExtractorConfig, ExtractorModel

        return ExtractorModel(cfg, ExtractorConfig(**config["extractor"]))
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    """Rebuild a model from its checkpoint; returns ``(model, extra)``."""
    config, arrays = read_arrays(path)
    model = _build(config)
    _assign(model, arrays, path)
    return model, config.get("extra", {})


def load_into(model: nn.Module, path: str | os.PathLike) -> dict:
    """Load parameters into an existing model whose architecture must match the file."""
    config, arrays = read_arrays(path)

    def arch(d: dict) -> dict:
        return {k: v for k, v in d.items() if k != "seed"}

    if config.get("kind") != model.kind or arch(config.get("model", {})) != arch(model.cfg.to_dict()):
        raise CheckpointError(f"{path}: config does not match the target model")
    _assign(model, arrays, path)
    return config.get("extra", {})


def _assign(model: nn.Module, arrays: dict[str, np.ndarray], path) -> None:
    state = model.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    with torch.no_grad():
        for k, v in state.items():
            if tuple(v.shape) != arrays[k].shape:
                raise CheckpointError(f"{path}: shape mismatch for {k}")
            v.copy_(torch.from_numpy(arrays[k]))
