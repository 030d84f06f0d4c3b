import pytest

from ropscan.services.disasm import extract_gadget
from ropscan.services.emulator import (
    FILLER,
    Failure,
    StackLayout,
    StackLayoutError,
    layout_stack,
    observed_stack_delta,
    validate_chain,
)
from ropscan.services.memory_image import build_image


def gadgets(image, addrs, *snippets):
    return [extract_gadget(image, addrs[s]) for s in snippets]


def test_layout_places_fillers_for_pops(rich_image, rich_addrs):
    chain = gadgets(rich_image, rich_addrs, "585bc3", "58c3", "c20800", "5ec3")
    layout = layout_stack(chain)
    assert layout.words == (
        rich_addrs["585bc3"], FILLER, FILLER,
        rich_addrs["58c3"], FILLER,
        rich_addrs["c20800"],
        rich_addrs["5ec3"], FILLER, FILLER,
    )
    assert layout.trailing == 2


def test_layout_rejects_non_ret_gadget():
    image = build_image([(0x1000, bytes.fromhex("58ffe0"))])
    with pytest.raises(StackLayoutError):
        layout_stack([extract_gadget(image, 0x1000)])


def test_valid_chain(rich_image, rich_addrs):
    chain = gadgets(rich_image, rich_addrs, "585bc3", "01d8c3", "89c1c3", "40c3", "c3")
    report = validate_chain(rich_image, chain)
    assert report.ok, report.detail
    assert report.gadgets_executed == 5


def test_stack_relative_read_is_allowed(rich_image, rich_addrs):
    report = validate_chain(rich_image, gadgets(rich_image, rich_addrs, "8b442404c3", "40c3"))
    assert report.ok, report.detail


def test_uninitialised_register_read(rich_image, rich_addrs):
    report = validate_chain(rich_image, gadgets(rich_image, rich_addrs, "40c3", "58c3"))
    assert not report.ok
    assert report.failure is Failure.UNINITIALIZED_REGISTER_USE
    assert report.gadgets_executed == 0


def test_zero_idiom_needs_no_prior_write(rich_image, rich_addrs):
    assert validate_chain(rich_image, gadgets(rich_image, rich_addrs, "31c0c3", "40c3")).ok


def test_wrong_stack_spacing(rich_image, rich_addrs):
    chain = gadgets(rich_image, rich_addrs, "585bc3", "58c3")
    # one filler short: the ret pops a filler word instead of the next gadget
    layout = StackLayout((rich_addrs["585bc3"], FILLER, rich_addrs["58c3"], FILLER), trailing=2)
    report = validate_chain(rich_image, chain, layout)
    assert report.failure is Failure.OUT_OF_ORDER_CONTROL_FLOW
    assert report.gadgets_executed == 1


def test_memory_access_outside_stack_faults():
    image = build_image([(0x1000, bytes.fromhex("58" "8b00" "c3" "f4" "c3"))])
    chain = [extract_gadget(image, 0x1000), extract_gadget(image, 0x1005)]
    report = validate_chain(image, chain, StackLayout((0x1000, 0x2000, 0x1005), trailing=1))
    assert report.failure is Failure.UNMAPPED_READ


def test_write_outside_stack_faults():
    image = build_image([(0x1000, bytes.fromhex("58" "8900" "c3" "f4" "c3"))])
    chain = [extract_gadget(image, 0x1000), extract_gadget(image, 0x1005)]
    report = validate_chain(image, chain, StackLayout((0x1000, 0x2000, 0x1005), trailing=1))
    assert report.failure is Failure.UNMAPPED_WRITE


def test_empty_chain_is_trivially_valid(rich_image):
    assert validate_chain(rich_image, []).ok


@pytest.mark.parametrize("snippet", ["58c3", "585bc3", "c20800", "5e5f5dc3", "c3", "9090905859c3"])
def test_observed_delta_matches_static(rich_image, rich_addrs, snippet):
    g = extract_gadget(rich_image, rich_addrs[snippet])
    assert observed_stack_delta(rich_image, g) == g.stack_delta
