"""Generation of valid real gadget chains from a memory image.

Gadgets are extracted from every executable offset, anything touching
non-stack memory is dropped, and chains are assembled so that every register
a gadget reads was written after the last time it was read. Each candidate
is then executed by the emulator and kept only if it runs gadget by gadget.
"""
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from ropscan.services.disasm import (
    GadgetLikeSequence,
    InsnClass,
    MAX_GADGET_INSNS,
    OperandKind,
    extract_gadget,
    pre_return_delta,
)
from ropscan.services.emulator import StackLayoutError, layout_stack, validate_chain
from ropscan.services.memory_image import MemoryImage

DISCIPLINE_REGS = ("eax", "ecx", "edx", "ebx", "esi", "edi")
_BIT = {reg: 1 << i for i, reg in enumerate(DISCIPLINE_REGS)}

BUCKET_WIDTH = 16
MIN_CHAIN_GADGETS = 2
MAX_CHAIN_GADGETS = 32
MAX_FIT_GADGETS = 256
LONG_GADGET_INSNS = 4
DEFAULT_LONG_FRACTION = 0.3
BUDGET_FACTOR = 10


class ChainGenerationError(RuntimeError):
    def __init__(self, achieved: int, requested: int, detail: str = ""):
        msg = f"generated {achieved} of {requested} chains"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.achieved = achieved
        self.requested = requested


def _mask(regs: Iterable[str]) -> int:
    return sum(_BIT[r] for r in set(regs) if r in _BIT)


def register_effects(gadget: GadgetLikeSequence) -> tuple[frozenset[str], frozenset[str]]:
    """(registers read before the gadget writes them, registers written)."""
    exposed, written = set(), set()
    for insn in gadget.instructions:
        exposed |= insn.reads - written
        written |= insn.writes
    keep = set(DISCIPLINE_REGS)
    return frozenset(exposed & keep), frozenset(written & keep)


def check_register_discipline(gadgets: Sequence[GadgetLikeSequence]) -> bool:
    fresh: set[str] = set()
    for gadget in gadgets:
        exposed, writes = register_effects(gadget)
        if not exposed <= fresh:
            return False
        fresh = (fresh - exposed) | writes
    return True


def _clobbers_return_slot(gadget: GadgetLikeSequence) -> bool:
    """True when a stack write inside the gadget lands on or above the slot its ret pops."""
    ret_slot = pre_return_delta(gadget)
    offset = 0
    for insn in gadget.instructions[:-1]:
        if insn.mnemonic == "push":
            offset -= 4
            if offset >= ret_slot:
                return True
            continue
        for op in insn.operands[:1]:
            if op.kind is OperandKind.MEM and op.is_stack_memory and insn.mnemonic not in ("cmp", "test"):
                if offset + op.disp + op.size > ret_slot:
                    return True
        if insn.mnemonic == "pop":
            offset += 4
        elif "esp" in insn.writes:
            offset += 1 if insn.mnemonic == "inc" else -1
    return False


def is_chainable(gadget: GadgetLikeSequence) -> bool:
    try:
        layout_stack([gadget])
    except StackLayoutError:
        return False
    return not _clobbers_return_slot(gadget)


@dataclass
class GadgetCatalog:
    image: MemoryImage
    gadgets: tuple[GadgetLikeSequence, ...]
    index: dict[tuple, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        effects = [register_effects(g) for g in self.gadgets]
        self.exposed = np.array([_mask(e) for e, _ in effects], dtype=np.int64)
        self.writes = np.array([_mask(w) for _, w in effects], dtype=np.int64)
        self.byte_lens = np.array([g.byte_len for g in self.gadgets], dtype=np.int64)
        self.long = np.array([len(g.instructions) >= LONG_GADGET_INSNS for g in self.gadgets], dtype=bool)
        self.chainable = np.array([is_chainable(g) for g in self.gadgets], dtype=bool)
        self.index = {}
        for i, (g, (exposed, writes)) in enumerate(zip(self.gadgets, effects)):
            self.index.setdefault((writes, exposed, g.stack_delta, g.byte_len), []).append(i)

    def __len__(self) -> int:
        return len(self.gadgets)

    def lookup(self, writes=frozenset(), reads=frozenset(), stack_delta=None, byte_len=None) -> list[GadgetLikeSequence]:
        return [
            self.gadgets[i]
            for (w, r, d, n), idxs in self.index.items()
            if set(writes) <= w and r <= set(reads)
            and (stack_delta is None or d == stack_delta)
            and (byte_len is None or n == byte_len)
            for i in idxs
        ]


def _keep(gadget: GadgetLikeSequence) -> bool:
    if gadget.terminator.category is not InsnClass.RETURN:
        return False
    if any(insn.touches_memory for insn in gadget.instructions):
        return False
    return gadget.stack_delta is not None


def build_catalog(image: MemoryImage, max_insns: int = MAX_GADGET_INSNS) -> GadgetCatalog:
    """Every ret-ending, memory-free gadget in the image, one per distinct byte string."""
    seen: dict[bytes, GadgetLikeSequence] = {}
    for addr in image.addresses():
        gadget = extract_gadget(image, addr, max_insns)
        if gadget is None or not _keep(gadget):
            continue
        seen.setdefault(gadget.raw, gadget)
    gadgets = tuple(sorted(seen.values(), key=lambda g: g.start_addr))
    catalog = GadgetCatalog(image, gadgets)
    logger.info(
        "Catalog for {}: {} gadgets ({} chainable)",
        image.program_name or "image", len(catalog), int(catalog.chainable.sum()),
    )
    return catalog


@dataclass(frozen=True)
class GeneratedChain:
    gadgets: tuple[GadgetLikeSequence, ...]
    validated: bool = False

    @property
    def concat_bytes(self) -> bytes:
        return b"".join(g.raw for g in self.gadgets)

    @property
    def byte_len(self) -> int:
        return sum(g.byte_len for g in self.gadgets)

    @property
    def addresses(self) -> tuple[int, ...]:
        return tuple(g.start_addr for g in self.gadgets)


def length_histogram(lengths: Iterable[int], width: int = BUCKET_WIDTH) -> dict[int, int]:
    return dict(sorted(Counter(n // width for n in lengths).items()))


def _bucket_targets(hist: dict[int, int], count: int) -> dict[int, int]:
    hist = {b: n for b, n in hist.items() if n > 0}
    total = sum(hist.values())
    if total == 0:
        raise ValueError("length histogram is empty")
    if total == count:
        return hist
    exact = {b: count * n / total for b, n in hist.items()}
    targets = {b: int(v) for b, v in exact.items()}
    short = count - sum(targets.values())
    for b in sorted(exact, key=lambda b: (-(exact[b] - targets[b]), b))[:short]:
        targets[b] += 1
    return {b: n for b, n in targets.items() if n > 0}


def _pick(rng: np.random.Generator, candidates: np.ndarray, long_mask: np.ndarray, long_fraction: float) -> int:
    want_long = rng.random() < long_fraction
    preferred = candidates[long_mask[candidates] == want_long]
    pool = preferred if len(preferred) else candidates
    return int(pool[rng.integers(len(pool))])


def _assemble(catalog: GadgetCatalog, rng: np.random.Generator, lo: int, hi: int, long_fraction: float):
    n_want = int(rng.integers(MIN_CHAIN_GADGETS, MAX_CHAIN_GADGETS + 1))
    target = int(rng.integers(lo, hi))
    usable = np.flatnonzero(catalog.chainable)
    min_len = int(catalog.byte_lens[usable].min())
    fresh, total, picked = 0, 0, []
    while len(picked) < MAX_FIT_GADGETS:
        room = hi - 1 - total - (min_len if not picked else 0)
        ok = (catalog.byte_lens[usable] <= room) & ((catalog.exposed[usable] & ~fresh) == 0)
        candidates = usable[ok]
        if not len(candidates):
            break
        i = _pick(rng, candidates, catalog.long, long_fraction)
        picked.append(i)
        total += int(catalog.byte_lens[i])
        fresh = (fresh & ~int(catalog.exposed[i])) | int(catalog.writes[i])
        if len(picked) >= MIN_CHAIN_GADGETS and total >= lo and (len(picked) >= n_want or total >= target):
            break
    if len(picked) < MIN_CHAIN_GADGETS or not lo <= total < hi:
        return None
    return tuple(catalog.gadgets[i] for i in picked)


def _fill_bucket(catalog, bucket, wanted, seed_seq, long_fraction, width):
    rng = np.random.default_rng(seed_seq)
    lo, hi = bucket * width, (bucket + 1) * width
    chains, attempts = [], 0
    while len(chains) < wanted and attempts < BUDGET_FACTOR * wanted:
        attempts += 1
        gadgets = _assemble(catalog, rng, lo, hi, long_fraction)
        if gadgets is None:
            continue
        if validate_chain(catalog.image, list(gadgets)).ok:
            chains.append(GeneratedChain(gadgets, validated=True))
    if len(chains) < wanted:
        logger.warning("Bucket [{}, {}): {} of {} chains after {} candidates", lo, hi, len(chains), wanted, attempts)
    return chains


def generate_chains(
    catalog: GadgetCatalog,
    count: int,
    length_hist: dict[int, int],
    rng_seed: int,
    long_fraction: float = DEFAULT_LONG_FRACTION,
    workers: int = 1,
    width: int = BUCKET_WIDTH,
) -> list[GeneratedChain]:
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return []
    if not catalog.chainable.any():
        raise ChainGenerationError(0, count, "catalog has no chainable gadgets")
    targets = _bucket_targets(length_hist, count)
    seeds = np.random.SeedSequence(rng_seed).spawn(len(targets))
    jobs = (
        delayed(_fill_bucket)(catalog, bucket, wanted, seed, long_fraction, width)
        for (bucket, wanted), seed in zip(sorted(targets.items()), seeds)
    )
    results = Parallel(n_jobs=workers, prefer="threads")(jobs)
    chains = [chain for bucket in results for chain in bucket]
    if len(chains) < count:
        raise ChainGenerationError(len(chains), count, f"candidate budget {BUDGET_FACTOR}x exhausted")
    chains.sort(key=lambda c: (c.concat_bytes, c.addresses))
    logger.info("Generated {} validated chains across {} length buckets", len(chains), len(targets))
    return chains


def balance_to(
    benign: Sequence,
    catalog: GadgetCatalog,
    rng_seed: int,
    long_fraction: float = DEFAULT_LONG_FRACTION,
    workers: int = 1,
) -> list[GeneratedChain]:
    """As many real chains as `benign` has, with the same byte-length histogram."""
    if not benign:
        raise ValueError("benign dataset is empty")
    hist = length_histogram(len(chain.concat_bytes) for chain in benign)
    return generate_chains(catalog, len(benign), hist, rng_seed, long_fraction, workers)


def histogram_within(expected: dict[int, int], actual: dict[int, int], tolerance: float = 0.1) -> bool:
    """Per-bucket agreement within `tolerance` of the expected count (at least one chain of slack)."""
    for bucket in set(expected) | set(actual):
        want, got = expected.get(bucket, 0), actual.get(bucket, 0)
        if abs(got - want) > max(1.0, tolerance * want):
            return False
    return True

