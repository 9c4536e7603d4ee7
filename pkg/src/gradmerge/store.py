"""Checkpoint container: a binary tensor file with a JSON header.

Layout (bit-exact): bytes 0-7 hold an unsigned 64-bit little-endian header
length N; bytes 8..8+N hold a UTF-8 JSON object mapping tensor name to
{"dtype": ..., "shape": [...], "data_offsets": [begin, end]}, plus an optional
"__metadata__" string map; the remainder is raw little-endian tensor data
addressed relative to the end of the header.

Opening is lazy: only the header is read, and tensor payloads are fetched on
demand. The header is validated strictly up front (duplicate names, unknown
dtypes, and gapped, overlapping, or out-of-range data ranges are all format
errors); silent coercion here would surface later as a corrupt merge.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import dtypes
from .errors import FormatError, IoError, TensorLookupError, ValidationError

_HEADER_LEN_BYTES = 8
_MAX_HEADER_BYTES = 100 * 1024 * 1024  # guard against nonsense length fields


@dataclass(frozen=True)
class TensorInfo:
    """Header entry for one tensor. Offsets are relative to the data section."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.begin

    @property
    def numel(self) -> int:
        n = 1
        for extent in self.shape:
            n *= extent
        return n


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"duplicate name {key!r} in header")
        out[key] = value
    return out


def _validate_shape(name: str, raw_shape: object) -> tuple[int, ...]:
    if not isinstance(raw_shape, list):
        raise FormatError(f"shape of {name!r} is not a list")
    shape: list[int] = []
    for extent in raw_shape:
        if isinstance(extent, bool) or not isinstance(extent, int):
            raise FormatError(f"shape of {name!r} has non-integer extent {extent!r}")
        if extent < 0:
            raise FormatError(f"shape of {name!r} has negative extent {extent}")
        shape.append(extent)
    return tuple(shape)


def _validate_offsets(name: str, raw_offsets: object) -> tuple[int, int]:
    if not isinstance(raw_offsets, list) or len(raw_offsets) != 2:
        raise FormatError(f"data_offsets of {name!r} is not a [begin, end] pair")
    begin, end = raw_offsets
    for bound in (begin, end):
        if isinstance(bound, bool) or not isinstance(bound, int):
            raise FormatError(f"data_offsets of {name!r} has non-integer bound {bound!r}")
    if begin < 0 or end < begin:
        raise FormatError(f"data_offsets of {name!r} is not an ascending non-negative range")
    return begin, end


def _parse_header(header_bytes: bytes, data_size: int) -> tuple[list[TensorInfo], dict[str, str]]:
    try:
        text = header_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not UTF-8: {exc}") from None
    try:
        parsed = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except FormatError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc.msg} at position {exc.pos}") from None
    if not isinstance(parsed, dict):
        raise FormatError("header is not a JSON object")

    metadata: dict[str, str] = {}
    infos: list[TensorInfo] = []
    for name, entry in parsed.items():
        if name == "__metadata__":
            if not isinstance(entry, dict):
                raise FormatError("__metadata__ is not an object")
            for key, value in entry.items():
                if not isinstance(value, str):
                    raise FormatError(f"__metadata__ value for {key!r} is not a string")
                metadata[key] = value
            continue
        if not isinstance(entry, dict):
            raise FormatError(f"entry for {name!r} is not an object")
        unknown = set(entry) - {"dtype", "shape", "data_offsets"}
        if unknown:
            raise FormatError(f"entry for {name!r} has unknown field {sorted(unknown)[0]!r}")
        missing = {"dtype", "shape", "data_offsets"} - set(entry)
        if missing:
            raise FormatError(f"entry for {name!r} is missing field {sorted(missing)[0]!r}")
        dtype = entry["dtype"]
        if not isinstance(dtype, str) or dtype not in dtypes.known_dtypes():
            raise FormatError(f"unknown dtype {dtype!r} for tensor {name!r}")
        shape = _validate_shape(name, entry["shape"])
        begin, end = _validate_offsets(name, entry["data_offsets"])
        info = TensorInfo(name=name, dtype=dtype, shape=shape, begin=begin, end=end)
        expected = info.numel * dtypes.itemsize(dtype)
        if info.nbytes != expected:
            raise FormatError(
                f"data_offsets of {name!r} span {info.nbytes} bytes, "
                f"shape and dtype require {expected}"
            )
        if end > data_size:
            raise FormatError(f"data range out of bounds for tensor {name!r}")
        infos.append(info)

    cursor = 0
    for info in infos:
        if info.begin != cursor:
            kind = "overlaps previous data" if info.begin < cursor else "leaves a gap"
            raise FormatError(f"data range of {info.name!r} {kind} (begin {info.begin}, expected {cursor})")
        cursor = info.end
    if cursor != data_size:
        raise FormatError(
            f"data ranges cover {cursor} bytes but the data section holds {data_size}"
        )
    return infos, metadata


class Checkpoint:
    """Lazy reader over one checkpoint file.

    Tracks ``bytes_read`` so laziness is checkable: opening a multi-megabyte
    file must cost only the header.
    """

    def __init__(self, path: str, infos: list[TensorInfo], metadata: dict[str, str], data_start: int, bytes_read: int):
        self.path = path
        self.metadata = metadata
        self._infos = {info.name: info for info in infos}
        self._order = [info.name for info in infos]
        self._data_start = data_start
        self.bytes_read = bytes_read

    def names(self) -> list[str]:
        return list(self._order)

    def __contains__(self, name: str) -> bool:
        return name in self._infos

    def __iter__(self) -> Iterator[str]:
        return iter(self._order)

    def info(self, name: str) -> TensorInfo:
        try:
            return self._infos[name]
        except KeyError:
            raise TensorLookupError(f"tensor {name!r} not present in {self.path}") from None

    def read_bytes(self, name: str) -> bytes:
        info = self.info(name)
        try:
            with open(self.path, "rb") as fh:
                fh.seek(self._data_start + info.begin)
                buf = fh.read(info.nbytes)
        except OSError as exc:
            raise IoError(f"cannot read {self.path}: {exc}") from None
        if len(buf) != info.nbytes:
            raise FormatError(f"data range out of bounds for tensor {name!r}")
        self.bytes_read += len(buf)
        return buf

    def read_raw(self, name: str) -> np.ndarray:
        """Payload representation: bf16 arrives as uint16 bit patterns."""
        info = self.info(name)
        return dtypes.decode_payload(self.read_bytes(name), info.dtype, info.shape)

    def read(self, name: str, upcast: bool = False) -> np.ndarray:
        """Numeric values. bf16 always widens to f32; f16 widens when asked."""
        info = self.info(name)
        return dtypes.materialize(self.read_raw(name), info.dtype, upcast)

    def read_all(self, upcast: bool = False) -> dict[str, np.ndarray]:
        return {name: self.read(name, upcast=upcast) for name in self._order}


def open_checkpoint(path: str) -> Checkpoint:
    """Validate the header of ``path`` and return a lazy reader.

    Performs O(header) I/O; tensor data is untouched until read.
    """
    try:
        file_size = os.path.getsize(path)
        with open(path, "rb") as fh:
            len_bytes = fh.read(_HEADER_LEN_BYTES)
            if len(len_bytes) < _HEADER_LEN_BYTES:
                raise FormatError("header length truncated")
            (header_len,) = struct.unpack("<Q", len_bytes)
            if header_len > _MAX_HEADER_BYTES:
                raise FormatError(f"header length {header_len} exceeds the {_MAX_HEADER_BYTES} byte limit")
            if _HEADER_LEN_BYTES + header_len > file_size:
                raise FormatError(
                    f"header declares {header_len} bytes but only "
                    f"{file_size - _HEADER_LEN_BYTES} are present"
                )
            header_bytes = fh.read(header_len)
    except FileNotFoundError:
        raise IoError(f"checkpoint file not found: {path}") from None
    except IsADirectoryError:
        raise IoError(f"checkpoint path is a directory: {path}") from None
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None

    data_start = _HEADER_LEN_BYTES + header_len
    infos, metadata = _parse_header(header_bytes, file_size - data_start)
    return Checkpoint(path, infos, metadata, data_start, bytes_read=_HEADER_LEN_BYTES + header_len)


@dataclass(frozen=True)
class TensorEntry:
    """One tensor queued for writing.

    ``raw=True`` means ``data`` is already in payload representation (for
    bf16, uint16 bit patterns) and is written through untouched. That path
    keeps unmodified tensors bit-identical, NaN payloads included.
    """

    dtype: str
    data: np.ndarray
    raw: bool = False

    @staticmethod
    def from_array(arr: np.ndarray) -> "TensorEntry":
        return TensorEntry(dtype=dtypes.storage_name_for_array(arr), data=arr)


def _entry_payload(name: str, entry: TensorEntry) -> bytes:
    if entry.dtype not in dtypes.known_dtypes():
        raise FormatError(f"unknown dtype {entry.dtype!r} for tensor {name!r}")
    if entry.raw:
        expect = dtypes.raw_numpy_dtype(entry.dtype)
        if entry.data.dtype != expect:
            raise FormatError(
                f"raw payload for {name!r} has numpy dtype {entry.data.dtype}, expected {expect}"
            )
        return np.ascontiguousarray(entry.data).tobytes()
    return dtypes.encode_array(entry.data, entry.dtype)


def _check_finite(name: str, entry: TensorEntry) -> None:
    if not dtypes.is_float(entry.dtype):
        return
    values = dtypes.materialize(entry.data, entry.dtype, upcast=False) if entry.raw else entry.data
    if not np.isfinite(values).all():
        raise ValidationError(f"non-finite value in tensor {name}")


def write_checkpoint(
    path: str,
    tensors: Mapping[str, TensorEntry],
    metadata: Mapping[str, str] | None = None,
    strict_finite: bool = False,
) -> None:
    """Write tensors to ``path`` atomically (temp file, then rename).

    Tensors land in lexicographic name order so equal inputs always produce
    byte-identical files. ``strict_finite`` rejects NaN or infinite values in
    float tensors before anything touches disk.
    """
    names = sorted(tensors)
    payloads: list[bytes] = []
    header: dict[str, object] = {}
    if metadata:
        meta = dict(metadata)
        for key, value in meta.items():
            if not isinstance(value, str):
                raise FormatError(f"__metadata__ value for {key!r} is not a string")
        header["__metadata__"] = meta
    cursor = 0
    for name in names:
        entry = tensors[name]
        if strict_finite:
            _check_finite(name, entry)
        payload = _entry_payload(name, entry)
        shape = tuple(int(x) for x in entry.data.shape)
        header[name] = {
            "dtype": entry.dtype,
            "shape": list(shape),
            "data_offsets": [cursor, cursor + len(payload)],
        }
        payloads.append(payload)
        cursor += len(payload)

    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    tmp_path = path + ".tmp"
    try:
        with open(tmp_path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for payload in payloads:
                fh.write(payload)
        os.replace(tmp_path, path)
    except OSError as exc:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise IoError(f"cannot write {path}: {exc}") from None


def write_arrays(
    path: str,
    arrays: Mapping[str, np.ndarray],
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Convenience wrapper: infer each tensor's storage dtype from its array."""
    write_checkpoint(path, {n: TensorEntry.from_array(a) for n, a in arrays.items()}, metadata)
