"""Portable checkpoint files.

Layout: ``b"SDKNCP01"``, a little-endian u64 byte length, a canonical
JSON metadata block, then every tensor listed in ``metadata["tensors"]``
as contiguous little-endian float64 values in that order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .exceptions import ConfigurationError
from .model import ModelGraph
from .trainer import AdamState, EpochRecord

MAGIC = b"SDKNCP01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    kind: str  # "sdkn", "ann" or "krr"
    params: ParamStore
    graph: ModelGraph | None = None
    data_shape: dict = field(default_factory=dict)
    normalizers: dict = field(default_factory=dict)
    kernel: dict | None = None
    adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    trace: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        tensors = [(f"param/{n}", v) for n, v in self.params.items()]
        adam_meta = None
        if self.adam is not None:
            a = self.adam
            adam_meta = {"t": a.t, "learning_rate": a.learning_rate, "beta1": a.beta1,
                         "beta2": a.beta2, "eps": a.eps}
            tensors += [(f"adam_m/{n}", a.m[n]) for n in self.params.names()]
            tensors += [(f"adam_v/{n}", a.v[n]) for n in self.params.names()]
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "kind": self.kind,
            "graph": self.graph.to_dict() if self.graph is not None else None,
            "kernel": self.kernel,
            "data_shape": self.data_shape,
            "normalizers": self.normalizers,
            "adam": adam_meta,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "trace": [[r.epoch, r.lr, r.train_mse, r.val_mse] for r in self.trace],
            "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
        }
        head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in tensors)
        return MAGIC + struct.pack("<Q", len(head)) + head + payload

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise ConfigurationError("not a checkpoint file (bad magic)")
        try:
            (n,) = struct.unpack_from("<Q", raw, 8)
            meta = json.loads(raw[16 : 16 + n])
        except (struct.error, ValueError):
            raise ConfigurationError("checkpoint header is truncated or corrupt") from None
        if meta["format_version"] != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta['format_version']}")
        offset = 16 + n
        tensors = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(raw):
                raise ConfigurationError("checkpoint payload is truncated")
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)
            offset += 8 * count
        if offset != len(raw):
            raise ConfigurationError("checkpoint payload size does not match its metadata")
        params = ParamStore({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        adam = None
        if meta["adam"] is not None:
            adam = AdamState(
                m={k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                v={k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
                **meta["adam"],
            )
        return cls(
            config=meta["config"],
            kind=meta["kind"],
            params=params,
            graph=ModelGraph.from_dict(meta["graph"]) if meta["graph"] is not None else None,
            data_shape=meta["data_shape"],
            normalizers=meta["normalizers"],
            kernel=meta["kernel"],
            adam=adam,
            epoch=meta["epoch"],
            rng_state=meta["rng_state"],
            trace=[EpochRecord(e, lr, tr, va, 0.0) for e, lr, tr, va in meta["trace"]],
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
