"""Binary checkpoint container.

Layout: magic b"VARD", format version (u32), a model kind tag, a JSON config
snapshot, then named parameter records (name, shape, raw little-endian float32
payload), and finally a CRC32 of everything after the magic. The config rides
along so incompatible checkpoints are rejected at load time with named fields
instead of surfacing as a shape error deep inside a model.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, IOFormatError

MAGIC = b"VARD"
FORMAT_VERSION = 1
KINDS = ("tokenizer-depth", "tokenizer-rgb", "prior", "upsampler")

# config keys that must agree across every checkpoint in a pipeline
CORE_FIELDS = ("vocab_size", "channels", "n_scales", "schedule")


@dataclass
class CheckpointData:
    kind: str
    version: int
    config: dict
    params: dict[str, np.ndarray]


def _canon(value):
    # JSON turns tuples into lists; normalise for comparisons
    if isinstance(value, (list, tuple)):
        return tuple(_canon(v) for v in value)
    return value


def core_signature(config: dict) -> dict:
    """Extract the cross-stage compatibility fields from a config snapshot."""
    model = config.get("model", config)
    sig = {}
    for key in CORE_FIELDS:
        if key not in model:
            raise CompatibilityError(f"config snapshot lacks '{key}'")
        sig[key] = _canon(model[key])
    return sig


def check_compatible(*checkpoints: CheckpointData) -> None:
    """Require identical (vocab_size, channels, n_scales, schedule) everywhere."""
    if len(checkpoints) < 2:
        return
    base = core_signature(checkpoints[0].config)
    for ck in checkpoints[1:]:
        sig = core_signature(ck.config)
        bad = [k for k in CORE_FIELDS if sig[k] != base[k]]
        if bad:
            detail = ", ".join(
                f"{k}: {checkpoints[0].kind}={base[k]} vs {ck.kind}={sig[k]}"
                for k in bad)
            raise CompatibilityError(f"incompatible checkpoints ({detail})")


def expect_kind(ckpt: CheckpointData, kind: str) -> CheckpointData:
    if ckpt.kind != kind:
        raise CompatibilityError(f"checkpoint kind '{ckpt.kind}' where '{kind}' expected")
    return ckpt


def save_checkpoint(path, kind: str, config: dict,
                    params: dict[str, np.ndarray]) -> None:
    if kind not in KINDS:
        raise CompatibilityError(f"unknown model kind '{kind}'")
    body = bytearray()
    body += struct.pack("<I", FORMAT_VERSION)
    kind_b = kind.encode()
    body += struct.pack("<H", len(kind_b)) + kind_b
    cfg_b = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    body += struct.pack("<I", len(cfg_b)) + cfg_b
    body += struct.pack("<I", len(params))
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode()
        body += struct.pack("<H", len(name_b)) + name_b
        body += struct.pack("<B", a.ndim)
        for dim in a.shape:
            body += struct.pack("<I", dim)
        body += a.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(MAGIC + bytes(body))
    tmp.replace(out)


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IOFormatError(f"{self.label}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> CheckpointData:
    label = str(path)
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise IOFormatError(f"{label}: not a VARD checkpoint")
    body = raw[4:]
    if len(body) < 4:
        raise IOFormatError(f"{label}: truncated checkpoint")
    stored_crc = struct.unpack("<I", body[-4:])[0]
    payload = body[:-4]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise IOFormatError(f"{label}: checksum mismatch")
    r = _Reader(payload, label)
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise IOFormatError(f"{label}: unsupported format version {version}")
    kind = r.take(r.unpack("<H")).decode()
    if kind not in KINDS:
        raise IOFormatError(f"{label}: unknown model kind '{kind}'")
    try:
        config = json.loads(r.take(r.unpack("<I")).decode())
    except ValueError as exc:
        raise IOFormatError(f"{label}: bad config snapshot ({exc})") from exc
    params: dict[str, np.ndarray] = {}
    n_records = r.unpack("<I")
    for _ in range(n_records):
        name = r.take(r.unpack("<H")).decode()
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(count * 4), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32, copy=True)
    if r.pos != len(payload):
        raise IOFormatError(f"{label}: {len(payload) - r.pos} trailing bytes")
    return CheckpointData(kind=kind, version=version, config=config, params=params)


def save_model(path, kind: str, model, config: dict) -> None:
    """Snapshot a model's state_dict into a checkpoint file."""
    save_checkpoint(path, kind, config, model.state_dict())


def load_into(path, kind: str, model) -> CheckpointData:
    """Load a checkpoint, verify its kind tag, and restore the model state."""
    ckpt = expect_kind(load_checkpoint(path), kind)
    model.load_state_dict(ckpt.params)
    return ckpt
