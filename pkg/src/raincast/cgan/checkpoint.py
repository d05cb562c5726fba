"""Versioned binary checkpoint container.

Layout (little-endian):
    bytes 0-3   magic ``GCK1``
    u32         container version (1)
    u64         step counter
    u32         config JSON length, then that many UTF-8 bytes
                (training config + architecture snapshot)
    u32         tensor count, then per tensor:
                u16 name length, name bytes, u8 ndim, ndim x u32 dims,
                f32 data

Tensor names are ``gen.<layer>.w``, ``disc.<layer>.b``, and optimizer
moments ``optg.m.<layer>.w`` / ``optd.v.<layer>.b``. Values are stored as
float32; loading casts back to float64 working precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, IoFailure, TruncatedPayload, UnsupportedVersion
from .train import Adam, GanState, config_from_dict, config_to_dict

MAGIC = b"GCK1"
VERSION = 1


def _named_tensors(state: GanState) -> dict[str, np.ndarray]:
    out = {}
    for prefix, net in (("gen", state.generator), ("disc", state.discriminator)):
        for name, arr in net.named_params().items():
            out[f"{prefix}.{name}"] = arr
    for prefix, opt in (("optg", state.opt_g), ("optd", state.opt_d)):
        for name, arr in opt.m.items():
            out[f"{prefix}.m.{name}"] = arr
        for name, arr in opt.v.items():
            out[f"{prefix}.v.{name}"] = arr
    return out


def save_checkpoint(state: GanState, path: str | Path) -> None:
    config_blob = dict(config_to_dict(state.config, state.arch))
    config_blob["opt_t"] = {"g": state.opt_g.t, "d": state.opt_d.t}
    config_json = json.dumps(config_blob, sort_keys=True).encode("utf-8")
    tensors = _named_tensors(state)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, state.step))
            fh.write(struct.pack("<I", len(config_json)))
            fh.write(config_json)
            fh.write(struct.pack("<I", len(tensors)))
            for name in sorted(tensors):
                raw = name.encode("utf-8")
                arr = tensors[name]
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> GanState:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint from {path}: {exc}") from exc

    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    off = 4
    version, step = struct.unpack_from("<IQ", raw, off)
    off += 12
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version} not supported")
    (json_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config_blob = json.loads(raw[off:off + json_len].decode("utf-8"))
    off += json_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4

    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
            data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off)
            off += nbytes
            tensors[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise TruncatedPayload(f"{path}: checkpoint payload ends early: {exc}") from exc

    cfg, arch = config_from_dict(config_blob)
    state = GanState.initialize(cfg, arch)
    state.step = step
    state.generator.load_params(
        {k[4:]: v for k, v in tensors.items() if k.startswith("gen.")})
    state.discriminator.load_params(
        {k[5:]: v for k, v in tensors.items() if k.startswith("disc.")})
    for prefix, opt in (("optg", state.opt_g), ("optd", state.opt_d)):
        opt.m = {k[len(prefix) + 3:]: v for k, v in tensors.items()
                 if k.startswith(f"{prefix}.m.")}
        opt.v = {k[len(prefix) + 3:]: v for k, v in tensors.items()
                 if k.startswith(f"{prefix}.v.")}
    opt_t = config_blob.get("opt_t", {})
    state.opt_g.t = int(opt_t.get("g", step))
    state.opt_d.t = int(opt_t.get("d", step))
    return state


__all__ = ["save_checkpoint", "load_checkpoint", "Adam"]
