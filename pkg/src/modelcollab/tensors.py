"""Named tensors and the safetensors on-disk container.

File layout: an 8-byte little-endian header length N, N bytes of JSON
mapping each tensor name to ``{dtype, shape, data_offsets}`` (plus an
optional ``__metadata__`` string map), then the raw little-endian buffer.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

_DTYPES = {
    "F64": np.dtype("<f8"), "F32": np.dtype("<f4"), "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"), "I32": np.dtype("<i4"), "I16": np.dtype("<i2"), "I8": np.dtype("i1"),
    "U64": np.dtype("<u8"), "U32": np.dtype("<u4"), "U16": np.dtype("<u2"), "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
    # bfloat16 kept as raw uint16 bit patterns
    "BF16": np.dtype("<u2"),
}
_NP_TO_TAG = {np.dtype("<f8"): "F64", np.dtype("<f4"): "F32", np.dtype("<f2"): "F16",
              np.dtype("<i8"): "I64", np.dtype("<i4"): "I32", np.dtype("<i2"): "I16", np.dtype("i1"): "I8",
              np.dtype("<u8"): "U64", np.dtype("<u4"): "U32", np.dtype("<u2"): "U16", np.dtype("u1"): "U8",
              np.dtype("?"): "BOOL"}
MAX_HEADER = 100 * 1024 * 1024


def bf16_to_f64(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def f64_to_bf16(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even float64 -> bfloat16 bit patterns."""
    f = np.asarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        out[nan] = ((u[nan] >> 16) | 0x40).astype(np.uint16)
    return out


class TensorMap:
    """Ordered mapping of tensor name -> array, with per-tensor dtype tags.

    Arrays loaded from disk keep their stored representation (bit-exact
    round trips); :meth:`values` gives float64 views for arithmetic, and
    every arithmetic result is float64 tagged with the inputs' dtype so a
    save restores the original precision.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray], dtypes: Mapping[str, str] | None = None,
                 metadata: Mapping[str, str] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        self.dtypes: dict[str, str] = {}
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            tag = (dtypes or {}).get(name) or _NP_TO_TAG.get(arr.dtype)
            if tag is None:
                arr, tag = arr.astype(np.float64), "F64"
            self.tensors[name] = arr
            self.dtypes[name] = tag
        self.metadata = dict(metadata or {})

    # mapping protocol
    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __contains__(self, name):
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def signature(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(a.shape) for n, a in self.tensors.items()}

    def value(self, name: str) -> np.ndarray:
        arr = self.tensors[name]
        if self.dtypes[name] == "BF16" and arr.dtype == np.uint16:
            return bf16_to_f64(arr)
        return arr.astype(np.float64)

    def values(self) -> dict[str, np.ndarray]:
        return {n: self.value(n) for n in self.tensors}

    def check_compatible(self, other: TensorMap) -> None:
        if self.signature() != other.signature():
            a, b = self.signature(), other.signature()
            diff = sorted(set(a.items()) ^ set(b.items()))[:4]
            raise ShapeError(f"tensor maps differ in name/shape sets: {diff}")

    def derive(self, tensors: Mapping[str, np.ndarray]) -> TensorMap:
        """New float64 map with this map's dtype tags and metadata."""
        return TensorMap({n: np.asarray(tensors[n], dtype=np.float64) for n in self.tensors},
                         self.dtypes, self.metadata)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> TensorMap:
        return self.derive({n: fn(n, v) for n, v in self.values().items()})

    def __add__(self, other: TensorMap) -> TensorMap:
        self.check_compatible(other)
        return self.derive({n: self.value(n) + other.value(n) for n in self})

    def __sub__(self, other: TensorMap) -> TensorMap:
        self.check_compatible(other)
        return self.derive({n: self.value(n) - other.value(n) for n in self})

    def __mul__(self, scalar: float) -> TensorMap:
        return self.derive({n: self.value(n) * float(scalar) for n in self})

    __rmul__ = __mul__

    def to_vector(self) -> np.ndarray:
        vals = [self.value(n).reshape(-1) for n in self]
        return np.concatenate(vals) if vals else np.zeros(0)

    def from_vector(self, vec: np.ndarray) -> TensorMap:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        total = sum(int(np.prod(a.shape, dtype=np.int64)) for a in self.tensors.values())
        if total != vec.size:
            raise ShapeError(f"vector of length {vec.size} does not fit {total} parameters")
        out, pos = {}, 0
        for n, a in self.tensors.items():
            size = int(np.prod(a.shape, dtype=np.int64))
            out[n] = vec[pos:pos + size].reshape(a.shape)
            pos += size
        return self.derive(out)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for n in self.tensors:
            a = np.ascontiguousarray(self.tensors[n])
            h.update(n.encode())
            h.update(self.dtypes[n].encode())
            h.update(repr(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def allclose(self, other: TensorMap, atol: float = 1e-12) -> bool:
        if self.signature() != other.signature():
            return False
        return all(np.allclose(self.value(n), other.value(n), rtol=0, atol=atol) for n in self)

    def bitwise_equal(self, other: TensorMap) -> bool:
        if self.names() != other.names() or self.dtypes != other.dtypes:
            return False
        for n in self:
            a, b = self.tensors[n], other.tensors[n]
            if a.shape != b.shape or np.ascontiguousarray(a).tobytes() != np.ascontiguousarray(b).tobytes():
                return False
        return True

    def __repr__(self):
        return f"TensorMap({self.signature()!r})"

    @classmethod
    def zeros_like(cls, other: TensorMap) -> TensorMap:
        return other.derive({n: np.zeros(a.shape) for n, a in other.tensors.items()})

    @classmethod
    def scalar(cls, x: float, name: str = "w") -> TensorMap:
        """One-element map, convenient for toy models and tests."""
        return cls({name: np.array([float(x)])})


def _encode(arr: np.ndarray, tag: str) -> bytes:
    if tag == "BF16":
        raw = arr if arr.dtype == np.uint16 else f64_to_bf16(arr)
        return np.ascontiguousarray(raw, dtype="<u2").tobytes()
    target = _DTYPES[tag]
    if arr.dtype.kind == "f" and target.kind in "iub":
        arr = np.rint(arr) if target.kind != "b" else arr != 0
    return np.ascontiguousarray(arr, dtype=target).tobytes()


def tensor_save(tmap: TensorMap, path: str | Path) -> None:
    """Write ``tmap`` in tensor order; each tensor is stored in its dtype tag."""
    header: dict = {}
    if tmap.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in tmap.metadata.items()}
    chunks, offset = [], 0
    for name in tmap:
        data = _encode(tmap.tensors[name], tmap.dtypes[name])
        header[name] = {"dtype": tmap.dtypes[name], "shape": list(tmap.tensors[name].shape),
                        "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    hbytes += b" " * (-len(hbytes) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def tensor_load(path: str | Path) -> TensorMap:
    """Read a container, validating header, dtypes, shapes and byte ranges."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for a header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > MAX_HEADER or 8 + n > len(blob):
        raise FormatError(f"{path}: header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not an object")
    data = memoryview(blob)[8 + n:]
    metadata = header.pop("__metadata__", None) or {}
    entries = []
    for name, info in header.items():
        try:
            tag, shape, (begin, end) = info["dtype"], [int(s) for s in info["shape"]], info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad entry for {name!r} ({exc})") from None
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {tag!r} for {name!r}")
        if any(s < 0 for s in shape) or not 0 <= begin <= end:
            raise FormatError(f"{path}: invalid shape or offsets for {name!r}")
        if end > len(data):
            raise FormatError(f"{path}: {name!r} ends at {end}, past the {len(data)}-byte buffer (truncated?)")
        expected = math.prod(shape) * _DTYPES[tag].itemsize
        if end - begin != expected:
            raise FormatError(f"{path}: {name!r} spans {end - begin} bytes, shape needs {expected}")
        entries.append((begin, end, name, tag, shape))
    cursor = 0
    for begin, end, name, _, _ in sorted(entries):
        if begin < cursor:
            raise FormatError(f"{path}: {name!r} overlaps the previous tensor")
        if begin > cursor:
            raise FormatError(f"{path}: gap before {name!r}")
        cursor = end
    if cursor != len(data):
        raise FormatError(f"{path}: {len(data) - cursor} trailing bytes after the last tensor")
    tensors, dtypes = {}, {}
    for begin, end, name, tag, shape in sorted(entries, key=lambda e: (e[0], e[2])):
        arr = np.frombuffer(data[begin:end], dtype=_DTYPES[tag]).reshape(shape).copy()
        tensors[name] = arr
        dtypes[name] = tag
    return TensorMap(tensors, dtypes, metadata)


def stack_values(maps: Sequence[TensorMap], name: str) -> np.ndarray:
    return np.stack([m.value(name) for m in maps])


def check_all_compatible(maps: Iterable[TensorMap]) -> list[TensorMap]:
    maps = list(maps)
    if not maps:
        raise ShapeError("need at least one tensor map")
    for m in maps[1:]:
        maps[0].check_compatible(m)
    return maps
