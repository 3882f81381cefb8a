"""Versioned binary checkpoint container.

Layout (all integers little-endian):
  magic "MFCV" | format version u32 | config block length u32 | config block
  (UTF-8 key=value lines) | repeated parameter records until EOF, each:
  name length u32 | name bytes | rank u32 | extents as u64s | f64 payload.

Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .distributions import LikelihoodModel
from .model import ModelConfig, MultiFacetVAE

MAGIC = b"MFCV"
FORMAT_VERSION = 1


def config_to_text(cfg: ModelConfig) -> str:
    lines = [
        f"J={cfg.J}",
        f"input_dim={cfg.input_dim}",
        "z_dims=" + ",".join(str(d) for d in cfg.z_dims),
        "K=" + ",".join(str(k) for k in cfg.K),
        "backbone_widths=" + ",".join(str(w) for w in cfg.backbone_widths),
        f"architecture={cfg.architecture}",
        f"likelihood={cfg.likelihood.kind}",
        f"sigma={cfg.likelihood.sigma!r}",
        f"cov_mode={cfg.cov_mode}",
        f"pi_trainable={int(cfg.pi_trainable)}",
        f"fade_in_batches={cfg.fade_in_batches}",
        f"activation={cfg.activation}",
    ]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    return ModelConfig(
        J=int(kv["J"]),
        input_dim=int(kv["input_dim"]),
        z_dims=tuple(int(v) for v in kv["z_dims"].split(",")),
        K=tuple(int(v) for v in kv["K"].split(",")),
        backbone_widths=tuple(int(v) for v in kv["backbone_widths"].split(",")),
        architecture=kv["architecture"],
        likelihood=LikelihoodModel(kv["likelihood"], sigma=float(kv["sigma"])),
        cov_mode=kv["cov_mode"],
        pi_trainable=bool(int(kv["pi_trainable"])),
        fade_in_batches=int(kv["fade_in_batches"]),
        activation=kv["activation"],
    )


def save_checkpoint(path, model: MultiFacetVAE):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        blob = config_to_text(model.cfg).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in model.parameters().items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> MultiFacetVAE:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg = config_from_text(_read_exact(fh, blob_len, "config").decode("utf-8"))
        model = MultiFacetVAE(cfg)
        params = model.parameters()

        seen = set()
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 8 * count, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
            if name not in params:
                raise ValueError(f"checkpoint contains unknown parameter {name!r}")
            if params[name].shape != arr.shape:
                raise ValueError(
                    f"parameter {name!r} shape {arr.shape} != expected {params[name].shape}")
            params[name][...] = arr
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    return model
