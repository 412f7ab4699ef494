"""Named parameters tagged frozen or trainable, plus weight-file I/O.

Weight files are a flat little-endian float32 blob (``<stem>.bin``) next to a
JSON manifest (``<stem>.json``) recording each tensor's name, shape and offset
together with free-form metadata (model kind, seed, config).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor, get_default_dtype

WEIGHT_FORMAT = "matres-weights-1"


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool):
        super().__init__(np.array(data, dtype=get_default_dtype()), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        tag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {tag})"


class ParamRegistry:
    """Ordered collection of parameters.

    A parameter's tag is fixed when it is registered; to change tags, build a
    new registry (see :meth:`frozen_copy`).
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, data, trainable: bool = False) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        p = Parameter(name, data, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def frozen(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.trainable]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def frozen_copy(self) -> ParamRegistry:
        return ParamRegistry.from_arrays(self.arrays(), trainable=False)

    def astype(self, dtype) -> ParamRegistry:
        out = ParamRegistry()
        for p in self:
            q = out.register(p.name, p.data, p.trainable)
            q.data = p.data.astype(dtype)
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], trainable: bool = False) -> ParamRegistry:
        reg = cls()
        for name, arr in arrays.items():
            reg.register(name, arr, trainable)
        return reg

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes, in registration order."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def save_weights(arrays: Mapping[str, np.ndarray], stem: str | Path, meta: dict | None = None) -> Path:
    """Write ``<stem>.bin`` and ``<stem>.json``; returns the manifest path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    stem.with_suffix(".bin").write_bytes(payload)
    manifest = {
        "format": WEIGHT_FORMAT,
        "dtype": "<f4",
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
        "params": entries,
    }
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_weights(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != WEIGHT_FORMAT:
        raise ValueError(f"{stem}: unsupported weight format {manifest.get('format')!r}")
    payload = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{stem}.bin: checksum mismatch")
    arrays = {}
    for e in manifest["params"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
