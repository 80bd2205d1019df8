"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic "MNCK" | u32 version
    u32 len | config text (canonical key = value lines)
    u32 len | JSON metadata (epoch, RNG state, optimizer scalars, curves, ...)
    u32 blob count
    per blob: u16 name len | name | u8 ndim | u32 * ndim shape | float32 data
    u32 CRC32 of everything above

Blob names are prefixed ``param/``, ``bn/``, ``opt/``, ``best/param/``
and ``best/bn/``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNormState
from .config import ExperimentConfig, dump_config, parse_config_text
from .errors import CorruptionError, FormatError, MigrationNeededError, StructureError
from .model import MaskNet

MAGIC = b"MNCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict
    bn: dict
    optimizer_scalars: dict = field(default_factory=dict)
    optimizer_arrays: dict = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = None
    curves: dict = field(default_factory=dict)
    best_val_wer: float = float("inf")
    best_epoch: int = -1
    best: dict = None  # {"params": ..., "bn": ...} or None
    version: int = VERSION


def _bn_blobs(prefix, bn):
    out = {}
    for name, s in bn.items():
        out[f"{prefix}{name}/running_mean"] = s.running_mean
        out[f"{prefix}{name}/running_var"] = s.running_var
    return out


def _bn_meta(bn):
    return {name: {"num_batches": s.num_batches} for name, s in bn.items()}


def save_checkpoint(ckpt: Checkpoint, path):
    blobs = {f"param/{k}": v for k, v in ckpt.params.items()}
    blobs.update(_bn_blobs("bn/", ckpt.bn))
    blobs.update({f"opt/{k}": v for k, v in ckpt.optimizer_arrays.items()})
    meta = {
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer": ckpt.optimizer_scalars,
        "curves": ckpt.curves,
        "best_val_wer": ckpt.best_val_wer,
        "best_epoch": ckpt.best_epoch,
        "bn": _bn_meta(ckpt.bn),
        "has_best": ckpt.best is not None,
    }
    if ckpt.best is not None:
        blobs.update({f"best/param/{k}": v for k, v in ckpt.best["params"].items()})
        blobs.update(_bn_blobs("best/bn/", ckpt.best["bn"]))
        meta["best_bn"] = _bn_meta(ckpt.best["bn"])

    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    for text in (dump_config(ckpt.config), json.dumps(meta, sort_keys=True)):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    # write-then-rename so a crash never leaves a half-written checkpoint
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; nothing is returned unless all of it checks out."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a masknet checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise MigrationNeededError(
            f"{path}: checkpoint format version {version}, this build reads version {VERSION}; "
            "convert it with a matching release first"
        )
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or damaged file)")

    r = _Reader(body, path)
    r.take(8)
    (n,) = r.unpack("<I")
    cfg = parse_config_text(r.take(n).decode("utf-8"))
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CorruptionError(f"{path}: {len(body) - r.pos} trailing bytes")

    reference = MaskNet(cfg.model)
    params = _section(blobs, "param/", {k: p.shape for k, p in reference.params.items()}, path)
    bn = _load_bn(blobs, "bn/", meta["bn"], reference, cfg, path)
    best = None
    if meta.get("has_best"):
        best = {
            "params": _section(blobs, "best/param/", {k: p.shape for k, p in reference.params.items()}, path),
            "bn": _load_bn(blobs, "best/bn/", meta["best_bn"], reference, cfg, path),
        }
    opt_arrays = {k[len("opt/"):]: v for k, v in blobs.items() if k.startswith("opt/")}
    return Checkpoint(
        config=cfg,
        params=params,
        bn=bn,
        optimizer_scalars=meta["optimizer"],
        optimizer_arrays=opt_arrays,
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        curves=meta["curves"],
        best_val_wer=meta["best_val_wer"],
        best_epoch=meta["best_epoch"],
        best=best,
        version=version,
    )


def _section(blobs, prefix, expected, path):
    got = {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise StructureError(f"{path}: parameters missing {missing[:3]} / unexpected {extra[:3]} for this config")
    for k, shape in expected.items():
        if got[k].shape != tuple(shape):
            raise StructureError(f"{path}: {prefix}{k} has shape {got[k].shape}, config implies {tuple(shape)}")
    return {k: got[k] for k in expected}


def _load_bn(blobs, prefix, meta, reference, cfg, path):
    out = {}
    for name, ref in reference.bn.items():
        try:
            mean = blobs[f"{prefix}{name}/running_mean"]
            var = blobs[f"{prefix}{name}/running_var"]
        except KeyError:
            raise StructureError(f"{path}: missing batch-norm moments for {name}") from None
        if mean.shape != (ref.channels,) or var.shape != (ref.channels,):
            raise StructureError(f"{path}: batch-norm {name} has {mean.shape[0]} channels, expected {ref.channels}")
        out[name] = BatchNormState(
            ref.channels,
            momentum=cfg.model.bn_momentum,
            eps=cfg.model.bn_eps,
            running_mean=mean,
            running_var=var,
            num_batches=int(meta[name]["num_batches"]),
        )
    return out
