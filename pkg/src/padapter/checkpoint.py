"""Parameter store and the PADK checkpoint container.

Layout (little-endian): magic ``PADK``, u32 version = 1, u32 tensor count,
then per tensor: u32 name length, UTF-8 name, u8 frozen flag, u32 rank,
u64 dims[rank], float32 payload in row-major order.  Tensors are written in
sorted name order so identical stores serialize to identical bytes.

Names are namespaced by component: ``base.*`` (backbone), ``dca.*`` and
``rpa.*`` (adapters), ``ctrl.*`` (control branch).  In memory values are
float64; the payload is float32, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PADK"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Corrupt or unsupported checkpoint bytes; message carries the offset."""


class ParameterStore:
    """Named float64 tensors, each flagged frozen or trainable."""

    def __init__(self):
        self._tensors: dict[str, np.ndarray] = {}
        self._frozen: dict[str, bool] = {}

    def put(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        self._tensors[name] = np.ascontiguousarray(value, dtype=np.float64)
        self._frozen[name] = bool(frozen)

    def get(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._tensors if n.startswith(prefix))

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, frozen: bool) -> None:
        self._frozen[name] = bool(frozen)

    def freeze_all(self) -> None:
        for n in self._frozen:
            self._frozen[n] = True

    def frozen_names(self) -> list[str]:
        return sorted(n for n, f in self._frozen.items() if f)

    def trainable_names(self) -> list[str]:
        return sorted(n for n, f in self._frozen.items() if not f)

    def subset(self, prefix: str) -> "ParameterStore":
        out = ParameterStore()
        for n in self.names(prefix):
            out.put(n, self._tensors[n], self._frozen[n])
        return out

    def merge(self, other: "ParameterStore") -> None:
        for n in other.names():
            self.put(n, other.get(n), other.is_frozen(n))

    def copy(self) -> "ParameterStore":
        return self.subset("")

    def num_params(self, prefix: str = "") -> int:
        return sum(self._tensors[n].size for n in self.names(prefix))

    def frozen_hash(self, prefix: str = "") -> str:
        """sha256 of the canonical serialization of the frozen partition."""
        frozen = ParameterStore()
        for n in self.frozen_names():
            if n.startswith(prefix):
                frozen.put(n, self._tensors[n], True)
        return hashlib.sha256(serialize(frozen)).hexdigest()


def serialize(store: ParameterStore) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(store.names()))]
    for name in store.names():
        raw = name.encode("utf-8")
        arr = store.get(name)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", 1 if store.is_frozen(name) else 0, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(store: ParameterStore, path) -> None:
    Path(path).write_bytes(serialize(store))


def _need(data: bytes, pos: int, n: int) -> int:
    if pos + n > len(data):
        raise CheckpointFormatError(f"truncated checkpoint at offset {pos}")
    return pos + n


def deserialize(data: bytes) -> ParameterStore:
    pos = _need(data, 0, 4)
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0")
    end = _need(data, pos, 8)
    version, count = struct.unpack("<II", data[pos:end])
    pos = end
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    store = ParameterStore()
    for _ in range(count):
        end = _need(data, pos, 4)
        (nlen,) = struct.unpack("<I", data[pos:end])
        pos = end
        end = _need(data, pos, nlen)
        name = data[pos:end].decode("utf-8")
        pos = end
        end = _need(data, pos, 5)
        frozen, rank = struct.unpack("<BI", data[pos:end])
        pos = end
        end = _need(data, pos, 8 * rank)
        dims = struct.unpack(f"<{rank}Q", data[pos:end])
        pos = end
        size = int(np.prod(dims)) if rank else 1
        end = _need(data, pos, 4 * size)
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).astype(np.float64)
        pos = end
        store.put(name, arr, frozen=bool(frozen))
    if pos != len(data):
        raise CheckpointFormatError(f"trailing bytes at offset {pos}")
    return store


def load_checkpoint(path) -> ParameterStore:
    return deserialize(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# self-describing checkpoints: a JSON metadata blob rides along as a tensor
# of byte values (exact in float32), under <namespace>.meta.json
# ---------------------------------------------------------------------------

def put_meta(store: ParameterStore, namespace: str, meta: dict) -> None:
    import json
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    store.put(f"{namespace}.meta.json",
              np.frombuffer(raw, dtype=np.uint8).astype(np.float64), frozen=True)


def get_meta(store: ParameterStore, namespace: str) -> dict | None:
    import json
    name = f"{namespace}.meta.json"
    if name not in store:
        return None
    raw = store.get(name).astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))
