"""Executable-memory snapshot of the protected program (RMIM files)."""
import bisect
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from loguru import logger

MAGIC = b"RMIM"
VERSION = 1
ADDRESS_SPACE = 1 << 32

_HEADER = struct.Struct("<4sHI")
_SEGMENT = struct.Struct("<II")


class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class OverlappingSegmentsError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class AddressNotMappedError(LookupError):
    def __init__(self, addr: int):
        super().__init__(f"address {addr:#010x} is not inside the memory image")
        self.addr = addr


@dataclass(frozen=True)
class Segment:
    base: int
    data: bytes

    @property
    def end(self) -> int:
        return self.base + len(self.data)

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class MemoryImage:
    segments: tuple[Segment, ...]
    program_name: str = ""
    snapshot_id: str = ""
    _bases: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _validate_segments(self.segments)
        object.__setattr__(self, "_bases", tuple(s.base for s in self.segments))

    @property
    def total_size(self) -> int:
        return sum(len(s) for s in self.segments)

    def segment_for(self, addr: int) -> Segment | None:
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        seg = self.segments[i]
        return seg if addr < seg.end else None

    def contains(self, addr: int) -> bool:
        return self.segment_for(addr) is not None

    def contains_many(self, addrs: np.ndarray) -> np.ndarray:
        """Vectorised `contains` over an array of 32-bit addresses."""
        addrs = np.asarray(addrs, dtype=np.uint64)
        if not self.segments:
            return np.zeros(addrs.shape, dtype=bool)
        bases = np.array(self._bases, dtype=np.uint64)
        ends = np.array([s.end for s in self.segments], dtype=np.uint64)
        idx = np.searchsorted(bases, addrs, side="right") - 1
        safe = np.clip(idx, 0, None)
        return (idx >= 0) & (addrs < ends[safe])

    def read_bytes(self, addr: int, max_n: int) -> bytes:
        seg = self.segment_for(addr)
        if seg is None:
            raise AddressNotMappedError(addr)
        start = addr - seg.base
        return seg.data[start:start + max_n]

    def addresses(self) -> Iterable[int]:
        for seg in self.segments:
            yield from range(seg.base, seg.end)


def _validate_segments(segments: tuple[Segment, ...]) -> None:
    prev_end = None
    for seg in segments:
        if not 0 <= seg.base < ADDRESS_SPACE:
            raise MalformedHeaderError(f"segment base {seg.base:#x} is not a 32-bit address")
        if len(seg.data) == 0:
            raise MalformedHeaderError(f"segment at {seg.base:#010x} is empty")
        if seg.end > ADDRESS_SPACE:
            raise MalformedHeaderError(f"segment at {seg.base:#010x} wraps the address space")
        if prev_end is not None:
            if seg.base < prev_end:
                raise OverlappingSegmentsError(
                    f"segment at {seg.base:#010x} overlaps the previous one (ends {prev_end:#010x})"
                )
        prev_end = seg.end


def parse_image(blob: bytes, program_name: str = "", snapshot_id: str = "") -> MemoryImage:
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the RMIM header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported RMIM version {version}")
    table_end = _HEADER.size + count * _SEGMENT.size
    if len(blob) < table_end:
        raise MalformedHeaderError(f"segment table truncated ({count} segments declared)")

    headers = [_SEGMENT.unpack_from(blob, _HEADER.size + i * _SEGMENT.size) for i in range(count)]
    for (base_a, _), (base_b, _) in zip(headers, headers[1:]):
        if base_b < base_a:
            raise MalformedHeaderError("segment headers are not sorted by base")
    for base, length in headers:
        if length == 0:
            raise MalformedHeaderError(f"segment at {base:#010x} is empty")
        if base + length > ADDRESS_SPACE:
            raise MalformedHeaderError(f"segment at {base:#010x} wraps the address space")
    for (base_a, len_a), (base_b, _) in zip(headers, headers[1:]):
        if base_b < base_a + len_a:
            raise OverlappingSegmentsError(f"segments at {base_a:#010x} and {base_b:#010x} overlap")

    payload_size = sum(length for _, length in headers)
    available = len(blob) - table_end
    if available < payload_size:
        raise TruncatedPayloadError(f"payload has {available} bytes, headers declare {payload_size}")
    if available > payload_size:
        raise ImageFormatError(f"{available - payload_size} trailing bytes after the payload")

    segments = []
    pos = table_end
    for base, length in headers:
        segments.append(Segment(base, bytes(blob[pos:pos + length])))
        pos += length
    return MemoryImage(tuple(segments), program_name=program_name, snapshot_id=snapshot_id)


def load_image(path: str | Path) -> MemoryImage:
    path = Path(path)
    blob = path.read_bytes()
    image = parse_image(blob, program_name=path.stem, snapshot_id=snapshot_of(blob))
    logger.debug(
        "Loaded image {} ({} segments, {} bytes, snapshot {})",
        path, len(image.segments), image.total_size, image.snapshot_id,
    )
    return image


def snapshot_of(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_image(image: MemoryImage) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(image.segments))]
    parts.extend(_SEGMENT.pack(s.base, len(s)) for s in image.segments)
    parts.extend(s.data for s in image.segments)
    return b"".join(parts)


def write_image(image: MemoryImage, path: str | Path) -> None:
    Path(path).write_bytes(dump_image(image))


def build_image(pairs: Iterable[tuple[int, bytes]], program_name: str = "") -> MemoryImage:
    """Assemble an image from (base, raw bytes) pairs in any order."""
    segments = tuple(sorted((Segment(base, bytes(data)) for base, data in pairs), key=lambda s: s.base))
    image = MemoryImage(segments, program_name=program_name)
    return MemoryImage(segments, program_name=program_name, snapshot_id=snapshot_of(dump_image(image)))
