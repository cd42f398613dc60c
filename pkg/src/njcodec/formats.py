"""Binary container formats: coded images and model checkpoints.

Coded file ("NJC1"): fixed little-endian header carrying original size,
padding, the model's architecture fingerprint, and a quality id, followed
by the two length-prefixed entropy-coded payloads.  Model weights are never
embedded; decoders must hold a checkpoint whose fingerprint matches.

Checkpoint ("NJM1"): a JSON header (network config, metric, lambda_d, and a
tensor directory with byte offsets) followed by raw little-endian float32
tensor data.  The fingerprint is 64-bit FNV-1a over the exact header bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .training import MSE_LAMBDAS, MSSSIM_LAMBDAS
from .transforms import JointModel, NetworkConfig

CODED_MAGIC = b"NJC1"
CHECKPOINT_MAGIC = b"NJM1"
CODED_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_HEADER_STRUCT = struct.Struct("<4sBIIHHQB")
_LEN_STRUCT = struct.Struct("<I")

QUALITY_CUSTOM = 255


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def quality_id(metric: str, lambda_d: float) -> int:
    """Index into the known quality ladders; 255 for custom weights."""
    ladder, base = (MSE_LAMBDAS, 0) if metric == "mse" else (MSSSIM_LAMBDAS, 16)
    for i, lam in enumerate(ladder):
        if abs(lambda_d - lam) <= 1e-9 * max(1.0, abs(lam)):
            return base + i
    return QUALITY_CUSTOM


@dataclass
class CodedFile:
    """Parsed coded-image container."""

    orig_width: int
    orig_height: int
    pad_right: int
    pad_bottom: int
    fingerprint: int
    quality: int
    z_payload: bytes
    y_payload: bytes
    version: int = CODED_VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER_STRUCT.pack(
            CODED_MAGIC, self.version, self.orig_width, self.orig_height,
            self.pad_right, self.pad_bottom, self.fingerprint, self.quality,
        )
        return b"".join((
            head,
            _LEN_STRUCT.pack(len(self.z_payload)), self.z_payload,
            _LEN_STRUCT.pack(len(self.y_payload)), self.y_payload,
        ))

    @staticmethod
    def from_bytes(data: bytes) -> "CodedFile":
        if len(data) < _HEADER_STRUCT.size + 2 * _LEN_STRUCT.size:
            raise ValueError("coded file shorter than its header")
        magic, version, w, h, pr, pb, fp, quality = _HEADER_STRUCT.unpack_from(data, 0)
        if magic != CODED_MAGIC:
            raise ValueError("not a coded image file (bad magic)")
        if version != CODED_VERSION:
            raise ValueError(f"unsupported coded-file version {version}")
        pos = _HEADER_STRUCT.size
        (z_len,) = _LEN_STRUCT.unpack_from(data, pos)
        pos += 4
        if pos + z_len + 4 > len(data):
            raise ValueError("z payload length inconsistent with file size")
        z_payload = data[pos : pos + z_len]
        pos += z_len
        (y_len,) = _LEN_STRUCT.unpack_from(data, pos)
        pos += 4
        if pos + y_len != len(data):
            raise ValueError("y payload length inconsistent with file size")
        y_payload = data[pos : pos + y_len]
        return CodedFile(w, h, pr, pb, fp, quality, bytes(z_payload), bytes(y_payload))


@dataclass
class LoadedModel:
    """A model plus the training metadata and fingerprint that travel with it."""

    model: JointModel
    metric: str
    lambda_d: float
    fingerprint: int


def _checkpoint_header(model: JointModel, metric: str, lambda_d: float) -> tuple[bytes, list]:
    directory = []
    offset = 0
    for name, p in model.named_parameters():
        directory.append({
            "name": name,
            "shape": list(p.shape),
            "dtype": "f32",
            "offset": offset,
        })
        offset += p.size * 4
    header = {
        "config": model.cfg.to_dict(),
        "metric": metric,
        "lambda_d": lambda_d,
        "tensors": directory,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode(), directory


def model_fingerprint(model: JointModel, metric: str, lambda_d: float) -> int:
    header_bytes, _ = _checkpoint_header(model, metric, lambda_d)
    return fnv1a64(header_bytes)


def bundle_for(model: JointModel, metric: str, lambda_d: float) -> LoadedModel:
    """In-memory bundle equivalent to saving and reloading a checkpoint."""
    return LoadedModel(model, metric, lambda_d, model_fingerprint(model, metric, lambda_d))


def save_checkpoint(model: JointModel, metric: str, lambda_d: float, path) -> int:
    """Write an NJM1 checkpoint; returns its fingerprint."""
    header_bytes, _ = _checkpoint_header(model, metric, lambda_d)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_LEN_STRUCT.pack(len(header_bytes)))
        fh.write(header_bytes)
        for _, p in model.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return fnv1a64(header_bytes)


def load_checkpoint(path) -> LoadedModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    (header_len,) = _LEN_STRUCT.unpack_from(data, 4)
    header_bytes = data[8 : 8 + header_len]
    if len(header_bytes) != header_len:
        raise ValueError("truncated checkpoint header")
    header = json.loads(header_bytes.decode())
    cfg = NetworkConfig.from_dict(header["config"])
    model = JointModel(cfg, seed=0)
    body = data[8 + header_len :]

    params = dict(model.named_parameters())
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen:
            raise ValueError(f"duplicate tensor {name} in checkpoint")
        seen.add(name)
        if name not in params:
            raise ValueError(f"checkpoint tensor {name} not present in model")
        p = params[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {shape} vs {p.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        chunk = body[start : start + count * 4]
        if len(chunk) != count * 4:
            raise ValueError(f"checkpoint body truncated at tensor {name}")
        p.data = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:3]}...")
    return LoadedModel(model, header["metric"], float(header["lambda_d"]), fnv1a64(header_bytes))
