import pytest

from ropscan.services.chain_file import ChainRecord
from ropscan.services.chain_gen import (
    ChainGenerationError,
    GadgetCatalog,
    balance_to,
    build_catalog,
    check_register_discipline,
    generate_chains,
    histogram_within,
    is_chainable,
    length_histogram,
    register_effects,
)
from ropscan.services.disasm import extract_gadget
from ropscan.services.emulator import validate_chain
from ropscan.services.memory_image import build_image


@pytest.fixture
def catalog(rich_image):
    return build_catalog(rich_image)


def g(image, addrs, snippet):
    return extract_gadget(image, addrs[snippet])


GENERAL = {"eax", "ecx", "edx", "ebx", "esi", "edi"}


def discipline_holds(gadgets):
    """Instruction-level walk: a register read before the gadget writes it must
    hold a value written by an earlier gadget that nothing has read since."""
    fresh = set()
    for gadget in gadgets:
        written, consumed = set(), set()
        for insn in gadget.instructions:
            for reg in insn.reads & GENERAL:
                if reg in written:
                    continue
                if reg not in fresh:
                    return False
                consumed.add(reg)
            written |= insn.writes & GENERAL
        fresh = (fresh - consumed) | written
    return True


def test_register_effects(rich_image, rich_addrs):
    assert register_effects(g(rich_image, rich_addrs, "01d8c3")) == ({"eax", "ebx"}, {"eax"})
    assert register_effects(g(rich_image, rich_addrs, "585bc3")) == (frozenset(), {"eax", "ebx"})
    # esp and ebp are outside the discipline
    assert register_effects(g(rich_image, rich_addrs, "5e5f5dc3")) == (frozenset(), {"esi", "edi"})


def test_register_discipline(rich_image, rich_addrs):
    pick = lambda *s: [g(rich_image, rich_addrs, x) for x in s]  # noqa: E731
    assert check_register_discipline(pick("58c3", "40c3"))
    assert check_register_discipline(pick("58c3", "40c3", "40c3"))
    assert not check_register_discipline(pick("40c3"))
    # the second mov reads eax again without an intervening write
    assert not check_register_discipline(pick("58c3", "89c1c3", "89c1c3"))
    assert check_register_discipline(pick("31c0c3", "89c1c3"))
    for chain in (pick("58c3", "40c3"), pick("40c3"), pick("58c3", "89c1c3", "89c1c3"), pick("31c0c3", "89c1c3")):
        assert discipline_holds(chain) == check_register_discipline(chain)


def test_catalog_excludes_memory_and_non_ret(catalog, rich_addrs):
    addrs = {gadget.start_addr for gadget in catalog.gadgets}
    assert rich_addrs["58c3"] in addrs
    assert rich_addrs["8b442404c3"] in addrs
    raws = [gadget.raw for gadget in catalog.gadgets]
    assert len(raws) == len(set(raws))
    assert all(gadget.terminator.mnemonic == "ret" for gadget in catalog.gadgets)


def test_catalog_drops_memory_gadgets():
    image = build_image([(0x1000, bytes.fromhex("8b00c3f458c3f4ffe0"))])
    catalog = build_catalog(image)
    assert [gadget.raw.hex() for gadget in catalog.gadgets] == ["c3", "58c3"]


def test_catalog_lookup(catalog):
    writers = catalog.lookup(writes={"eax"})
    assert any(gadget.raw == bytes.fromhex("58c3") for gadget in writers)
    assert all("eax" in register_effects(gadget)[1] for gadget in writers)
    pure = catalog.lookup(stack_delta=4, byte_len=1)
    assert [gadget.raw for gadget in pure] == [b"\xc3"]


def test_push_over_return_slot_is_not_chainable():
    image = build_image([(0x1000, bytes.fromhex("50c3"))])
    assert not is_chainable(extract_gadget(image, 0x1000))


def test_generated_chains_validate(catalog, rich_image):
    hist = {0: 500, 1: 500}
    chains = generate_chains(catalog, 1000, hist, rng_seed=1)
    assert len(chains) == 1000
    for chain in chains:
        assert chain.validated
        assert 2 <= len(chain.gadgets)
        assert check_register_discipline(chain.gadgets)
        assert discipline_holds(chain.gadgets)
        assert validate_chain(rich_image, list(chain.gadgets)).ok
    assert histogram_within(hist, length_histogram(c.byte_len for c in chains))


def test_generation_is_deterministic_across_workers(catalog):
    hist = {0: 20, 1: 20, 2: 10}
    one = generate_chains(catalog, 50, hist, rng_seed=9, workers=1)
    four = generate_chains(catalog, 50, hist, rng_seed=9, workers=4)
    assert [c.concat_bytes for c in one] == [c.concat_bytes for c in four]
    other = generate_chains(catalog, 50, hist, rng_seed=10)
    assert [c.concat_bytes for c in one] != [c.concat_bytes for c in other]


def test_balance_to_matches_benign(catalog):
    benign = [ChainRecord("x", i, (), b"\x00" * n) for i, n in enumerate([5, 9, 12, 20, 22, 30, 31, 40, 8, 17])]
    real = balance_to(benign, catalog, rng_seed=0)
    assert len(real) == len(benign)
    assert length_histogram(c.byte_len for c in real) == length_histogram(len(b.concat_bytes) for b in benign)


def test_balance_to_rejects_empty(catalog):
    with pytest.raises(ValueError):
        balance_to([], catalog, rng_seed=0)


def test_zero_count(catalog):
    assert generate_chains(catalog, 0, {0: 1}, rng_seed=0) == []


def test_catalog_without_chainable_gadgets():
    # ret 1 leaves the stack misaligned, and its suffix bytes are no gadgets
    image = build_image([(0x1000, bytes.fromhex("c20100"))])
    with pytest.raises(ChainGenerationError) as err:
        generate_chains(build_catalog(image), 3, {0: 3}, rng_seed=0)
    assert err.value.achieved == 0

def test_length_histogram_and_tolerance():
    assert length_histogram([0, 15, 16, 40]) == {0: 2, 1: 1, 2: 1}
    assert histogram_within({0: 100}, {0: 95})
    assert not histogram_within({0: 100}, {0: 80})
    assert histogram_within({0: 3}, {0: 2})
    assert not histogram_within({0: 3}, {1: 3})


def test_catalog_arrays_align(catalog):
    assert isinstance(catalog, GadgetCatalog)
    assert len(catalog.byte_lens) == len(catalog.gadgets) == len(catalog.chainable)
