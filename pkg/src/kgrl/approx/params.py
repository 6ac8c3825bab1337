"""Named parameter storage plus the 32-bit parameter blob format."""

from __future__ import annotations

import json
import struct
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from kgrl.approx.tensor import Tensor

BLOB_MAGIC = b"KGRLPB1"


class BlobError(ValueError):
    """Corrupt or incompatible parameter blob."""


class ParameterStore:
    """Ordered map of parameter name to a trainable Tensor.

    Optimizer moments live next to the parameters so a store can be
    snapshotted, copied or serialized as one unit.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        t = Tensor(value.copy(), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._params.items()
        }

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, values: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, value in values.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            target = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != target.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {value.shape} vs {target.shape}"
                )
            target.data = value.copy()

    def copy(self) -> ParameterStore:
        out = ParameterStore(self.numpy())
        out.moments = {n: (m.copy(), v.copy()) for n, (m, v) in self.moments.items()}
        out.step_count = self.step_count
        return out

    def subset(self, prefix: str) -> ParameterStore:
        """Fresh store holding copies of the parameters under ``prefix``."""
        return ParameterStore({n: t.data for n, t in self._params.items() if n.startswith(prefix)})

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def blob_bytes(values: Mapping[str, np.ndarray]) -> bytes:
    index = {}
    chunks = []
    offset = 0
    for name, value in values.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        index[name] = [offset, list(arr.shape)]
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(index, sort_keys=False).encode("utf-8")
    return BLOB_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def blob_values(raw: bytes) -> dict[str, np.ndarray]:
    if not raw.startswith(BLOB_MAGIC):
        raise BlobError("missing KGRLPB1 magic header")
    pos = len(BLOB_MAGIC)
    if len(raw) < pos + 4:
        raise BlobError("truncated blob header")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        index = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobError(f"corrupt blob index: {exc}") from exc
    body = np.frombuffer(raw, dtype="<f4", offset=pos + hlen)
    out = {}
    for name, (offset, shape) in index.items():
        size = int(np.prod(shape)) if shape else 1
        if offset + size > body.size:
            raise BlobError(f"blob truncated inside {name!r}")
        out[name] = body[offset : offset + size].reshape(shape).astype(np.float64)
    return out


def save_blob(path: str | Path, values: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(blob_bytes(values))


def load_blob(path: str | Path) -> dict[str, np.ndarray]:
    return blob_values(Path(path).read_bytes())
