"""Named parameter collections and their on-disk form.

A store is saved as ``<stem>.nlt`` (the NLT1 encodings of every parameter,
concatenated in store order) plus ``<stem>.json`` mapping each name to its
byte offset, shape, dtype and digest.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from .. import tensorfile
from .tensor import Tensor

PARAMS_FORMAT_VERSION = 1


class ParamStore:
    """Ordered name -> Tensor map; iteration order is insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(p.values.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def astype(self, dtype) -> "ParamStore":
        for p in self._params.values():
            p.values = p.values.astype(dtype)
            p.grad = None
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self._params.items()}

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._params):
            missing = set(self._params) ^ set(values)
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, p in self._params.items():
            v = np.asarray(values[k])
            if v.shape != p.shape:
                raise ValueError(f"{k}: stored shape {v.shape} != model shape {p.shape}")
            p.values = v.copy()

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, p in self._params.items():
            h.update(k.encode())
            h.update(tensorfile.encode(p.values))
        return h.hexdigest()[:16]


def save_arrays(arrays: dict[str, np.ndarray], stem) -> None:
    stem = Path(stem)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = tensorfile.encode(np.asarray(arr))
        entries.append({"name": name, "offset": offset, "nbytes": len(blob),
                        "shape": list(np.shape(arr)), "dtype": str(np.asarray(arr).dtype),
                        "digest": tensorfile.digest(np.asarray(arr))})
        blobs.append(blob)
        offset += len(blob)
    stem.with_suffix(".nlt").write_bytes(b"".join(blobs))
    stem.with_suffix(".json").write_text(json.dumps(
        {"format_version": PARAMS_FORMAT_VERSION, "tensors": entries}, indent=1))


def load_arrays(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format_version") != PARAMS_FORMAT_VERSION:
        raise tensorfile.TensorFileError("unsupported parameter manifest version")
    buf = stem.with_suffix(".nlt").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        arr, end = tensorfile.decode(buf, e["offset"])
        if end - e["offset"] != e["nbytes"] or list(arr.shape) != e["shape"]:
            raise tensorfile.TensorFileError(f"{e['name']}: blob does not match manifest")
        if tensorfile.digest(arr) != e["digest"]:
            raise tensorfile.TensorFileError(f"{e['name']}: digest mismatch")
        out[e["name"]] = arr
    return out


def save_params(params: ParamStore, stem) -> None:
    save_arrays({k: p.values for k, p in params.items()}, stem)


def load_params(params: ParamStore, stem) -> None:
    params.load_state(load_arrays(stem))
