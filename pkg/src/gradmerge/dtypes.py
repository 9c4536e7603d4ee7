"""Tensor dtype table for the checkpoint format, plus bf16 conversion kernels.

Storage dtype names follow the on-disk header convention ("F32", "BF16", ...).
bf16 has no numpy dtype, so its payloads are carried as raw uint16 arrays and
materialize as exact float32 values; narrowing back uses round-to-nearest-even.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

# name -> (numpy dtype used for the raw payload, bytes per element, is_float)
_DTYPE_TABLE: dict[str, tuple[np.dtype, int, bool]] = {
    "F64": (np.dtype("<f8"), 8, True),
    "F32": (np.dtype("<f4"), 4, True),
    "F16": (np.dtype("<f2"), 2, True),
    "BF16": (np.dtype("<u2"), 2, True),
    "I64": (np.dtype("<i8"), 8, False),
    "I32": (np.dtype("<i4"), 4, False),
    "I16": (np.dtype("<i2"), 2, False),
    "I8": (np.dtype("i1"), 1, False),
    "U8": (np.dtype("u1"), 1, False),
    "BOOL": (np.dtype("b1"), 1, False),
}

FLOAT_DTYPES = frozenset(n for n, (_, _, f) in _DTYPE_TABLE.items() if f)


def known_dtypes() -> frozenset[str]:
    return frozenset(_DTYPE_TABLE)


def itemsize(dtype: str) -> int:
    try:
        return _DTYPE_TABLE[dtype][1]
    except KeyError:
        raise FormatError(f"unknown dtype {dtype!r}") from None


def is_float(dtype: str) -> bool:
    try:
        return _DTYPE_TABLE[dtype][2]
    except KeyError:
        raise FormatError(f"unknown dtype {dtype!r}") from None


def raw_numpy_dtype(dtype: str) -> np.dtype:
    try:
        return _DTYPE_TABLE[dtype][0]
    except KeyError:
        raise FormatError(f"unknown dtype {dtype!r}") from None


def storage_name_for_array(arr: np.ndarray) -> str:
    """Storage dtype that holds ``arr`` losslessly. bf16 cannot be inferred."""
    kind_map = {
        np.dtype("float64"): "F64",
        np.dtype("float32"): "F32",
        np.dtype("float16"): "F16",
        np.dtype("int64"): "I64",
        np.dtype("int32"): "I32",
        np.dtype("int16"): "I16",
        np.dtype("int8"): "I8",
        np.dtype("uint8"): "U8",
        np.dtype("bool"): "BOOL",
    }
    name = kind_map.get(arr.dtype.newbyteorder("="))
    if name is None:
        raise FormatError(f"no storage dtype for numpy array of dtype {arr.dtype}")
    return name


def bf16_to_f32(raw: np.ndarray) -> np.ndarray:
    """Widen raw bf16 (uint16 bit patterns) to float32. Exact by construction."""
    bits = raw.astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Narrow float32 to bf16 bit patterns with round-to-nearest-even.

    NaNs collapse to the quiet-NaN pattern 0x7FC0 (sign preserved) so the
    rounding-bias addition cannot silently turn them into infinities.
    """
    x = np.ascontiguousarray(values, dtype=np.float32)
    bits = x.view(np.uint32)
    rounding_bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    rounded = ((bits + rounding_bias) >> np.uint32(16)).astype(np.uint16)
    nan_mask = np.isnan(x)
    if nan_mask.any():
        sign = (bits[nan_mask] >> np.uint32(16)).astype(np.uint16) & np.uint16(0x8000)
        rounded[nan_mask] = sign | np.uint16(0x7FC0)
    return rounded


def decode_payload(buf: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    """Raw little-endian bytes -> numpy array in the payload representation.

    bf16 stays as uint16 bit patterns here; see :func:`materialize`.
    """
    arr = np.frombuffer(buf, dtype=raw_numpy_dtype(dtype))
    return arr.reshape(shape)


def materialize(raw: np.ndarray, dtype: str, upcast: bool) -> np.ndarray:
    """Payload representation -> numeric values.

    bf16 always widens to f32 (exact); other dtypes widen only when ``upcast``
    is set, and only the half-precision floats widen (f64 stays f64).
    """
    if dtype == "BF16":
        return bf16_to_f32(raw)
    if upcast and dtype == "F16":
        return raw.astype(np.float32)
    return raw


def encode_array(arr: np.ndarray, dtype: str) -> bytes:
    """Numeric values -> raw little-endian payload bytes for ``dtype``.

    f32 -> f16 narrowing uses numpy's round-to-nearest-even cast; f32 -> bf16
    uses :func:`f32_to_bf16`.
    """
    if dtype == "BF16":
        if arr.dtype == np.uint16:
            raw = arr
        else:
            raw = f32_to_bf16(np.asarray(arr, dtype=np.float32))
    else:
        raw = np.ascontiguousarray(arr, dtype=raw_numpy_dtype(dtype))
    return np.ascontiguousarray(raw).tobytes()
