"""Named parameter collections and their on-disk checkpoint format.

A checkpoint is two files: ``<stem>.bin`` holds an 8-byte magic, a uint32
format version and every tensor as little-endian float64 in manifest order;
``<stem>.json`` lists names, shapes, byte offsets and frozen flags.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

MAGIC = b"TIDESCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamStore:
    """Ordered name -> Tensor map; frozen entries never require grad."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._tensors[name] = t
        self._frozen[name] = frozen
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable(self) -> list[Tensor]:
        return [t for n, t in self._tensors.items() if not self._frozen[n]]

    def frozen(self) -> list[Tensor]:
        return [t for n, t in self._tensors.items() if self._frozen[n]]

    def zero_grad(self) -> None:
        for t in self.trainable():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._tensors[n].data[...] = arr

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._tensors.items() if not (trainable_only and self._frozen[n]))

    # ------------------------------------------------------------- checkpoints
    def save(self, stem, extra: dict | None = None) -> tuple[Path, Path]:
        stem = Path(stem)
        bin_path = stem.with_suffix(".bin")
        man_path = stem.with_suffix(".json")
        entries = []
        offset = _HEADER.size
        chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION)]
        for name, t in self._tensors.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "frozen": self._frozen[name],
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        bin_path.write_bytes(b"".join(chunks))
        manifest = {"format": "tides-checkpoint", "version": FORMAT_VERSION, "tensors": entries}
        if extra:
            manifest["extra"] = extra
        man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return bin_path, man_path

    @classmethod
    def load(cls, stem) -> tuple["ParamStore", dict]:
        stem = Path(stem)
        manifest = json.loads(stem.with_suffix(".json").read_text())
        blob = stem.with_suffix(".bin").read_bytes()
        magic, version = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValidationError(f"{stem}.bin is not a TIDES checkpoint")
        if version != FORMAT_VERSION or manifest.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        store = cls()
        for e in manifest["tensors"]:
            arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
            store.add(e["name"], arr.reshape(e["shape"]), frozen=e["frozen"])
        return store, manifest.get("extra", {})

    def load_values(self, other: "ParamStore") -> None:
        """Copy values from ``other``; names and shapes must match exactly."""
        if list(other) != list(self):
            raise ValidationError("checkpoint parameter names do not match the model")
        for name, t in self._tensors.items():
            src = other[name].data
            if src.shape != t.shape:
                raise ValidationError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
            t.data[...] = src
