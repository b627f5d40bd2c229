"""Checkpoint files.

Layout: ``b"PDCKPT"`` magic, u16 format version, u64 header length, UTF-8
JSON header (config echo, step counters, RNG states, tensor table), then the
raw tensors as little-endian float32, in table order.
"""

import base64
import io
import json
import struct

import numpy as np
import torch

from .config import RunConfig, from_dict
from .errors import ConfigError, DatasetFormatError
from .model import AssemblyModel

MAGIC = b"PDCKPT"
VERSION = 1


def _tensor_table(named):
    table, chunks, offset = [], [], 0
    for name, t in named:
        raw = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def save_checkpoint(path, model, cfg, step=0, epoch=0, rng=None, optimizer=None):
    named = list(model.state_dict().items())
    opt_named = []
    if optimizer is not None:
        for i, p in enumerate(model.parameters()):
            for key, val in optimizer.state.get(p, {}).items():
                if isinstance(val, torch.Tensor) and val.dim() > 0:
                    opt_named.append((f"optim.{i}.{key}", val))
    table, blob = _tensor_table(named + opt_named)
    header = {
        "config": cfg.to_dict(),
        "step": int(step),
        "epoch": int(epoch),
        "numpy_rng": rng.bit_generator.state if rng is not None else None,
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        "optim_steps": ({str(i): float(optimizer.state[p]["step"]) for i, p in enumerate(model.parameters())
                         if p in optimizer.state and "step" in optimizer.state[p]} if optimizer else {}),
        "tensors": table,
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HQ", VERSION, len(hb)) + hb + blob)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("not a checkpoint file", 0)
    version, hlen = struct.unpack_from("<HQ", data, len(MAGIC))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    start = len(MAGIC) + struct.calcsize("<HQ")
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    tensors = {}
    for t in header["tensors"]:
        lo = base + t["offset"]
        raw = data[lo:lo + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise DatasetFormatError(f"truncated tensor {t['name']}", lo + len(raw))
        tensors[t["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy())
    return header, tensors


def load_checkpoint(path, cfg=None):
    """Rebuild the model from a checkpoint; ``cfg`` (if given) must agree on shapes."""
    header, tensors = read_checkpoint(path)
    saved_cfg = from_dict(RunConfig, header["config"])
    cfg = cfg or saved_cfg
    model = AssemblyModel(cfg)
    state = model.state_dict()
    for name, ref in state.items():
        if name not in tensors:
            raise ConfigError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ConfigError(f"shape mismatch for {name}: checkpoint {tuple(tensors[name].shape)} "
                              f"vs config {tuple(ref.shape)}")
    model.load_state_dict({k: tensors[k].to(v.dtype) for k, v in state.items()})
    return model, saved_cfg, header, tensors


def restore_rng(header):
    rng = np.random.default_rng()
    if header.get("numpy_rng"):
        rng.bit_generator.state = header["numpy_rng"]
    if header.get("torch_rng"):
        torch.set_rng_state(torch.from_numpy(np.frombuffer(base64.b64decode(header["torch_rng"]), dtype=np.uint8).copy()))
    return rng


def restore_optimizer(optimizer, model, header, tensors):
    for i, p in enumerate(model.parameters()):
        st = {}
        for key in ("sum", "exp_avg", "exp_avg_sq", "momentum_buffer"):
            name = f"optim.{i}.{key}"
            if name in tensors:
                st[key] = tensors[name].to(p.dtype)
        if str(i) in header.get("optim_steps", {}):
            st["step"] = torch.tensor(header["optim_steps"][str(i)])
        if st:
            optimizer.state[p].update(st)
