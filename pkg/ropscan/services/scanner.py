"""ASL-guided disassembly of input data.

Every byte offset of an input is read as a little-endian 32-bit address.
Addresses that point at a gadget-like sequence inside the memory image are
chained: after a hit at offset p the next ten 4-byte slots (p+4 .. p+40) are
tried in order and the first hit is attached.
"""
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from ropscan.services.disasm import GadgetLikeSequence, extract_gadget, format_sequence
from ropscan.services.memory_image import MemoryImage

FOLLOW_SLOTS = 10
SLOT_SIZE = 4
MIN_GADGETS = 2


@dataclass(frozen=True)
class PotentialGadgetChain:
    source_id: str
    start_offset: int
    offsets: tuple[int, ...]
    addresses: tuple[int, ...]
    gadgets: tuple[GadgetLikeSequence, ...]

    @property
    def concat_bytes(self) -> bytes:
        return b"".join(g.raw for g in self.gadgets)

    @property
    def byte_len(self) -> int:
        return sum(g.byte_len for g in self.gadgets)

    def instructions_text(self) -> str:
        return format_sequence(insn for g in self.gadgets for insn in g.instructions)

    def key(self) -> tuple:
        return (self.source_id, self.start_offset, self.addresses, self.concat_bytes)


class GadgetCache:
    """Shared address -> gadget table; safe for concurrent lookups and inserts."""

    def __init__(self, image: MemoryImage, enabled: bool = True):
        self.image = image
        self.enabled = enabled
        self._table: dict[int, GadgetLikeSequence | None] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._table)

    def get(self, addr: int) -> GadgetLikeSequence | None:
        if not self.enabled:
            return extract_gadget(self.image, addr)
        with self._lock:
            if addr in self._table:
                self.hits += 1
                return self._table[addr]
        gadget = extract_gadget(self.image, addr)
        with self._lock:
            self.misses += 1
            self._table.setdefault(addr, gadget)
        return gadget


def candidate_address(data: bytes, offset: int) -> int:
    if offset < 0 or offset + 4 > len(data):
        raise IndexError(f"offset {offset} leaves fewer than 4 bytes in a {len(data)}-byte input")
    return int.from_bytes(data[offset:offset + 4], "little")


def candidate_addresses(data: bytes) -> np.ndarray:
    """Candidate address at every byte offset (length max(0, len-3))."""
    if len(data) < 4:
        return np.zeros(0, dtype=np.uint64)
    raw = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.uint64)
    windows = np.lib.stride_tricks.sliding_window_view(raw, 4)
    return windows @ np.array([1, 1 << 8, 1 << 16, 1 << 24], dtype=np.uint64)


def scan_input(
    image: MemoryImage,
    data: bytes,
    source_id: str = "",
    cache: GadgetCache | None = None,
    min_gadgets: int = MIN_GADGETS,
) -> list[PotentialGadgetChain]:
    if min_gadgets < MIN_GADGETS:
        raise ValueError(f"a chain needs at least {MIN_GADGETS} gadgets")
    if cache is None:
        cache = GadgetCache(image)
    addrs = candidate_addresses(data)
    mapped = image.contains_many(addrs)
    resolved: dict[int, GadgetLikeSequence | None] = {}

    def gadget_at(offset: int) -> GadgetLikeSequence | None:
        if offset >= len(addrs) or not mapped[offset]:
            return None
        if offset not in resolved:
            resolved[offset] = cache.get(int(addrs[offset]))
        return resolved[offset]

    chains = []
    consumed: set[int] = set()
    for start in np.flatnonzero(mapped).tolist():
        if start in consumed:
            continue
        first = gadget_at(start)
        if first is None:
            continue
        offsets, gadgets = [start], [first]
        pos = start
        while True:
            for k in range(1, FOLLOW_SLOTS + 1):
                slot = pos + SLOT_SIZE * k
                hit = gadget_at(slot)
                if hit is not None:
                    offsets.append(slot)
                    gadgets.append(hit)
                    pos = slot
                    break
            else:
                break
        if len(gadgets) >= min_gadgets:
            consumed.update(offsets)
            chains.append(PotentialGadgetChain(
                source_id=source_id,
                start_offset=start,
                offsets=tuple(offsets),
                addresses=tuple(int(addrs[o]) for o in offsets),
                gadgets=tuple(gadgets),
            ))
    return chains


@dataclass
class CorpusScan:
    chains: list[PotentialGadgetChain] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)
    inputs: int = 0
    bytes_scanned: int = 0


InputSource = bytes | Path | Callable[[], bytes]


def load_source(source: InputSource) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, Path):
        return source.read_bytes()
    return source()


def _scan_one(image, source_id, source, cache, min_gadgets):
    try:
        data = load_source(source)
    except OSError as e:
        logger.warning("Skipping {}: {}", source_id, e)
        return source_id, None, str(e), 0
    return source_id, scan_input(image, data, source_id, cache, min_gadgets), None, len(data)


def scan_corpus(
    image: MemoryImage,
    inputs: Iterable[tuple[str, InputSource]],
    workers: int = 1,
    cache: GadgetCache | None = None,
    min_gadgets: int = MIN_GADGETS,
) -> CorpusScan:
    """Scan many inputs; output is independent of `workers`."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if cache is None:
        cache = GadgetCache(image)
    jobs = (delayed(_scan_one)(image, sid, src, cache, min_gadgets) for sid, src in inputs)
    results = Parallel(n_jobs=workers, prefer="threads")(jobs)

    scan = CorpusScan()
    for source_id, chains, error, size in results:
        scan.inputs += 1
        if error is not None:
            scan.errors.append((source_id, error))
            continue
        scan.bytes_scanned += size
        scan.chains.extend(chains)
    scan.chains.sort(key=lambda c: (c.source_id, c.start_offset))
    logger.info(
        "Scanned {} inputs ({} bytes): {} chains, {} errors, cache {} entries",
        scan.inputs, scan.bytes_scanned, len(scan.chains), len(scan.errors), len(cache),
    )
    return scan


def iter_inputs(path: str | Path) -> Iterator[tuple[str, Path]]:
    """A file yields itself; a directory yields every file below it, sorted."""
    path = Path(path)
    if path.is_file():
        yield path.name, path
        return
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        yield child.relative_to(path).as_posix(), child
