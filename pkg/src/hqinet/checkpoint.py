"""Checkpoint format for exact training-state round trips.

Layout: magic "HQIC", u16 format version, u32 header length, canonical
JSON header (sorted keys, no whitespace), then raw little-endian array
blobs in header order: parameters, optimizer first moments, optimizer
second moments, batch-norm buffers. Canonical JSON plus raw blobs makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "CheckpointState",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model_state",
    "restore_optimizer_state",
    "check_model_config",
]

MAGIC = b"HQIC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(Exception):
    """Base for malformed or incompatible checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointState:
    """Decoded checkpoint: header fields plus named arrays."""

    def __init__(self, config, epoch, step, best_val, rng_state, adam,
                 params, moments_m, moments_v, buffers):
        self.config = config
        self.epoch = epoch
        self.step = step
        self.best_val = best_val
        self.rng_state = rng_state
        self.adam = adam
        self.params = params
        self.moments_m = moments_m
        self.moments_v = moments_v
        self.buffers = buffers


def _le_dtype(arr):
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt), dt.str


def save_checkpoint(path, model, optimizer, config_dict, epoch, step,
                    rng_state, best_val=None):
    params = [(name, p.data) for name, p in model.named_parameters()]
    buffers = list(model.named_buffers())
    blobs = []
    param_meta = []
    for name, arr in params:
        arr, dts = _le_dtype(arr)
        param_meta.append([name, list(arr.shape), dts])
        blobs.append(arr)
    for store in (optimizer.m, optimizer.v):
        for name, _ in params:
            arr, _ = _le_dtype(store[name])
            blobs.append(arr)
    buffer_meta = []
    for name, arr in buffers:
        arr, dts = _le_dtype(arr)
        buffer_meta.append([name, list(arr.shape), dts])
        blobs.append(arr)
    header = {
        "config": config_dict,
        "epoch": int(epoch),
        "step": int(step),
        "best_val": best_val,
        "rng": rng_state,
        "adam": {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "step_count": optimizer.step_count,
        },
        "params": param_meta,
        "buffers": buffer_meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(
            f"{path}: {len(raw)} bytes is shorter than the {_PREFIX.size}-byte prefix")
    magic, version, head_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    if len(raw) < _PREFIX.size + head_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointTruncatedError(f"{path}: unreadable header: {exc}") from exc
    offset = _PREFIX.size + head_len

    def take(meta):
        nonlocal offset
        name, shape, dts = meta
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dts).itemsize
        if offset + nbytes > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: blob for {name} runs past end of file")
        arr = np.frombuffer(raw, dtype=dts, count=count, offset=offset)
        offset += nbytes
        return name, arr.reshape(shape).copy()

    params = {}
    for meta in header["params"]:
        name, arr = take(meta)
        params[name] = arr
    moments_m = {}
    for meta in header["params"]:
        name, arr = take(meta)
        moments_m[name] = arr
    moments_v = {}
    for meta in header["params"]:
        name, arr = take(meta)
        moments_v[name] = arr
    buffers = {}
    for meta in header["buffers"]:
        name, arr = take(meta)
        buffers[name] = arr
    if offset != len(raw):
        raise CheckpointTruncatedError(
            f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return CheckpointState(
        config=header["config"], epoch=header["epoch"], step=header["step"],
        best_val=header["best_val"], rng_state=header["rng"], adam=header["adam"],
        params=params, moments_m=moments_m, moments_v=moments_v, buffers=buffers)


def restore_model_state(model, state: CheckpointState):
    """Copy checkpoint parameters and buffers into the model, rejecting
    the first name or shape that does not line up."""
    model_params = list(model.named_parameters())
    for name, p in model_params:
        if name not in state.params:
            raise CheckpointShapeError(f"parameter {name} missing from checkpoint")
        arr = state.params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointShapeError(
                f"parameter {name}: checkpoint shape {tuple(arr.shape)} "
                f"does not match model shape {tuple(p.data.shape)}")
    model_names = {name for name, _ in model_params}
    for name in state.params:
        if name not in model_names:
            raise CheckpointShapeError(f"parameter {name} not present in model")
    for name, p in model_params:
        p.data = state.params[name].astype(p.data.dtype, copy=True)
        p.grad = None
    for name, _ in model.named_buffers():
        if name not in state.buffers:
            raise CheckpointShapeError(f"buffer {name} missing from checkpoint")
        model.set_buffer(name, state.buffers[name].copy())


def restore_optimizer_state(optimizer, state: CheckpointState):
    names = [n for n, _ in optimizer.params]
    for store, saved in ((optimizer.m, state.moments_m),
                         (optimizer.v, state.moments_v)):
        for name in names:
            if name not in saved:
                raise CheckpointShapeError(
                    f"optimizer state for {name} missing from checkpoint")
            if saved[name].shape != store[name].shape:
                raise CheckpointShapeError(
                    f"optimizer state {name}: checkpoint shape {saved[name].shape} "
                    f"does not match {store[name].shape}")
            store[name] = saved[name].astype(store[name].dtype, copy=True)
    adam = state.adam
    for key in ("lr", "beta1", "beta2", "epsilon"):
        if key in adam:
            setattr(optimizer, key, adam[key])
    optimizer.step_count = int(adam["step_count"])


def check_model_config(config_dict, state: CheckpointState):
    """Raise ConfigError when the checkpoint's model section differs."""
    saved = state.config.get("model")
    if saved != config_dict.get("model"):
        raise ConfigError(
            "checkpoint was produced with a different model configuration; "
            f"saved {saved}, requested {config_dict.get('model')}")
