"""Little-endian binary packing helpers for the table and model containers."""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def u8(self, value: int) -> None:
        self.raw(struct.pack("<B", value))

    def u16(self, value: int) -> None:
        self.raw(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self.raw(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self.raw(struct.pack("<Q", value))

    def i64(self, value: int) -> None:
        self.raw(struct.pack("<q", value))

    def f64(self, value: float) -> None:
        self.raw(struct.pack("<d", value))

    def f64_array(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def i64_array(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Cursor over a byte buffer; raises DataFormatError on truncation."""

    def __init__(self, data: bytes, context: str = "binary data"):
        self._data = data
        self._pos = 0
        self._context = context

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def raw(self, size: int) -> bytes:
        if size < 0 or self.remaining < size:
            raise DataFormatError(
                f"truncated {self._context}: needed {size} bytes at offset "
                f"{self._pos}, have {self.remaining}"
            )
        out = self._data[self._pos:self._pos + size]
        self._pos += size
        return out

    def skip(self, size: int) -> None:
        self.raw(size)

    def _unpack(self, fmt: str):
        (value,) = struct.unpack(fmt, self.raw(struct.calcsize(fmt)))
        return value

    def u8(self) -> int:
        return self._unpack("<B")

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def i64(self) -> int:
        return self._unpack("<q")

    def f64(self) -> float:
        return self._unpack("<d")

    def f64_array(self, count: int, shape: tuple[int, ...] | None = None) -> np.ndarray:
        arr = np.frombuffer(self.raw(count * 8), dtype="<f8").astype(np.float64)
        return arr.reshape(shape) if shape is not None else arr

    def i64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(count * 8), dtype="<i8").astype(np.int64)
