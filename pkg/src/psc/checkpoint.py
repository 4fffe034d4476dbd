"""Named-tensor checkpoint file (PSCK).

Layout: magic, version u32, header-length u32, structured-text header
(key = value lines echoing configs, step, seed, stage), then a tensor
table sorted by name: name length u16, name bytes, rank u8, dims u32[],
f32 little-endian payload.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DiTConfig
from .tensor import Tensor

PSCK_MAGIC = b"PSCK"
PSCK_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, Tensor]
    meta: dict[str, str] = field(default_factory=dict)

    def params(self) -> dict[str, Tensor]:
        """Fresh requires_grad copies for training."""
        return {k: Tensor(v.data.copy(), requires_grad=True)
                for k, v in self.tensors.items()}


def meta_from_model_config(cfg: DiTConfig) -> dict[str, str]:
    return {f"model.{k}": str(getattr(cfg, k)) for k in (
        "depth", "dim", "heads", "patch", "in_channels", "audio_dim", "audio_kv",
        "audio_hidden", "audio_window", "samples_per_frame", "h", "w",
        "t_max", "mlp_ratio", "time_embed_dim")}


def model_config_from_meta(meta: dict[str, str]) -> DiTConfig:
    kw = {}
    for k in ("depth", "dim", "heads", "patch", "in_channels", "audio_dim", "audio_kv",
              "audio_hidden", "audio_window", "samples_per_frame", "h", "w",
              "t_max", "mlp_ratio", "time_embed_dim"):
        kw[k] = int(meta[f"model.{k}"])
    return DiTConfig(**kw)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "\n".join(f"{k} = {v}" for k, v in sorted(ckpt.meta.items()))
    hbytes = header.encode("utf-8")
    buf = io.BytesIO()
    buf.write(PSCK_MAGIC)
    buf.write(struct.pack("<II", PSCK_VERSION, len(hbytes)))
    buf.write(hbytes)
    for name in sorted(ckpt.tensors):
        data = np.ascontiguousarray(ckpt.tensors[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != PSCK_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != PSCK_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    meta: dict[str, str] = {}
    for line in raw[off:off + hlen].decode("utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    off += hlen
    tensors: dict[str, Tensor] = {}
    while off < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        tensors[name] = Tensor(data.reshape(dims).copy())
    return Checkpoint(tensors=tensors, meta=meta)
