"""Model checkpoints: a self-describing binary container.

Layout (little-endian):

    magic       8 bytes  b"FLOWCKPT"
    version     uint32   currently 1
    header_len  uint64
    header      JSON (utf-8): model config, step counter, rng state (hex),
                tensor index [{name, shape, offset, numel}] in payload order
    payload     concatenated float32 tensor data

Besides model parameters the container may carry optimizer moments (named
``opt.<slot>.<param>``) so training resumes bit-exactly. Loading rejects
magic/version mismatches explicitly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation
from .model import FlowSLM, ModelConfig

MAGIC = b"FLOWCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, tensors: dict, step: int,
                    rng_state: bytes = b"", meta: dict | None = None) -> None:
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": len(payload), "numel": int(arr.size)})
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": config.to_dict(),
        "step": int(step),
        "rng_state": rng_state.hex(),
        "tensors": index,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(bytes(payload))


def load_checkpoint(path):
    """Returns (config, tensors dict, step, rng_state bytes, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise ContractViolation(
            f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[20:20 + hlen].decode())
    if header["format_version"] != FORMAT_VERSION:
        raise ContractViolation("header/container version mismatch")
    base = 20 + hlen
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=entry["numel"],
                            offset=base + entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(
            arr.copy().reshape(entry["shape"]))
    config = ModelConfig.from_dict(header["model_config"])
    return config, tensors, header["step"], bytes.fromhex(header["rng_state"]), header["meta"]


def save_model(path, model: FlowSLM, step: int = 0, rng_state: bytes = b"",
               optimizer_state: dict | None = None, meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer_state:
        tensors.update(optimizer_state)
    save_checkpoint(path, model.config, tensors, step, rng_state, meta)


def load_model(path, dtype=torch.float32):
    """Rebuilds the model; returns (model, step, rng_state, opt tensors, meta)."""
    config, tensors, step, rng_state, meta = load_checkpoint(path)
    model = FlowSLM(config)
    state = {k[len("model."):]: v for k, v in tensors.items()
             if k.startswith("model.")}
    model.load_state_dict(state)
    model = model.to(dtype)
    opt = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, step, rng_state, opt, meta
