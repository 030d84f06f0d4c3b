import numpy as np
import pytest

from ropscan.services.disasm import (
    IndeterminateStackDeltaError,
    InsnClass,
    decode,
    decode_all,
    extract_gadget,
    format_sequence,
    pre_return_delta,
    return_imm,
    stack_delta,
)
from ropscan.services.memory_image import build_image


@pytest.mark.parametrize(
    "hexbytes, length, text, category",
    [
        ("c3", 1, "ret", InsnClass.RETURN),
        ("c20800", 3, "ret 0x8", InsnClass.RETURN),
        ("58", 1, "pop eax", InsnClass.NORMAL),
        ("5e", 1, "pop esi", InsnClass.NORMAL),
        ("b801000000", 5, "mov eax, 0x1", InsnClass.NORMAL),
        ("89c1", 2, "mov ecx, eax", InsnClass.NORMAL),
        ("8b442404", 4, "mov eax, [esp+0x4]", InsnClass.NORMAL),
        ("8d0419", 3, "lea eax, [ecx+ebx]", InsnClass.NORMAL),
        ("31c0", 2, "xor eax, eax", InsnClass.NORMAL),
        ("ffe0", 2, "jmp eax", InsnClass.INDIRECT_JMP),
        ("ffd0", 2, "call eax", InsnClass.INDIRECT_CALL),
        ("e800000000", 5, "call 0x0", InsnClass.DIRECT_BRANCH),
        ("0f8400000000", 6, "jcc 0x0", InsnClass.DIRECT_BRANCH),
        ("f4", 1, "hlt", InsnClass.PRIVILEGED),
        ("cd80", 2, "int 0x80", InsnClass.PRIVILEGED),
    ],
)
def test_decode(hexbytes, length, text, category):
    insn = decode(bytes.fromhex(hexbytes) + b"\xf4" * 8)
    assert insn.length == length
    assert str(insn) == text
    assert insn.category is category


@pytest.mark.parametrize("hexbytes", ["0f0b", "66", "d9", "b801"])
def test_unknown_or_truncated_is_invalid(hexbytes):
    assert decode(bytes.fromhex(hexbytes)).category is InsnClass.INVALID


def test_decode_needs_bytes():
    with pytest.raises(ValueError):
        decode(b"")


def test_register_effects():
    pop = decode(b"\x58")
    assert pop.reads == {"esp"}
    assert pop.writes == {"eax", "esp"}
    zero = decode(bytes.fromhex("31c0"))
    assert zero.reads == frozenset()
    assert zero.writes == {"eax"}
    load = decode(bytes.fromhex("8b08"))
    assert load.touches_memory
    assert not decode(bytes.fromhex("8b442404")).touches_memory


def test_decode_all_stops_at_invalid():
    insns = decode_all(bytes.fromhex("5859c3d9c3"))
    assert [str(i) for i in insns] == ["pop eax", "pop ecx", "ret", "(bad)"]


def test_extract_gadget_stop_rules():
    image = build_image([(0x1000, bytes.fromhex("5e5fc3" "f4" "58f4" "e8000000005858" "c3"))])
    g = extract_gadget(image, 0x1000)
    assert format_sequence(g.instructions) == "pop esi; pop edi; ret"
    assert g.byte_len == 3
    assert g.raw == bytes.fromhex("5e5fc3")
    assert extract_gadget(image, 0x1001).byte_len == 2
    # privileged instruction before the return
    assert extract_gadget(image, 0x1004) is None
    # direct branch before the return
    assert extract_gadget(image, 0x1006) is None
    assert extract_gadget(image, 0x100B) is not None
    # falls off the end of the segment
    assert extract_gadget(build_image([(0x1000, b"\x58\x58")]), 0x1000) is None
    split = build_image([(0x1000, b"\x58"), (0x1001, b"\xc3")])
    assert extract_gadget(split, 0x1000) is None
    assert extract_gadget(split, 0x1001) is not None
    assert extract_gadget(image, 0x9000) is None


def test_extract_gadget_instruction_limit():
    image = build_image([(0x1000, b"\x90" * 10 + b"\xc3")])
    assert extract_gadget(image, 0x1000, max_insns=5) is None
    assert len(extract_gadget(image, 0x1000, max_insns=11).instructions) == 11


@pytest.mark.parametrize(
    "hexbytes, delta, pre, imm",
    [
        ("c3", 4, 0, 0),
        ("58c3", 8, 4, 0),
        ("5e5f5dc3", 16, 12, 0),
        ("50c3", 0, -4, 0),
        ("58c20800", 16, 4, 8),
        ("44c3", 5, 1, 0),
    ],
)
def test_stack_delta(hexbytes, delta, pre, imm):
    image = build_image([(0x1000, bytes.fromhex(hexbytes))])
    g = extract_gadget(image, 0x1000)
    assert stack_delta(g) == delta
    assert g.stack_delta == delta
    assert pre_return_delta(g) == pre
    assert return_imm(g) == imm


@pytest.mark.parametrize("hexbytes", ["5cc3", "89c4c3", "c9c3"])
def test_indeterminate_stack_delta(hexbytes):
    g = extract_gadget(build_image([(0x1000, bytes.fromhex(hexbytes))]), 0x1000)
    with pytest.raises(IndeterminateStackDeltaError):
        stack_delta(g)
    assert g.stack_delta is None


def test_stack_delta_needs_ret():
    g = extract_gadget(build_image([(0x1000, bytes.fromhex("58ffe0"))]), 0x1000)
    with pytest.raises(ValueError):
        stack_delta(g)


CAPSTONE_LEADS = (
    [bytes([op]) for op in range(0x40, 0x60)]
    + [bytes([op]) for op in range(0xB8, 0xC0)]
    + [bytes([op]) for op in (0x88, 0x89, 0x8A, 0x8B, 0x85, 0x87, 0x8D, 0xA9, 0x90, 0xC9, 0xC3, 0xC2)]
    + [bytes([op]) for op in (0x01, 0x03, 0x05, 0x09, 0x0B, 0x0D, 0x21, 0x23, 0x25)]
    + [bytes([op]) for op in (0x29, 0x2B, 0x2D, 0x31, 0x33, 0x35, 0x39, 0x3B, 0x3D)]
    + [bytes([op]) for op in range(0x91, 0x98)]
    + [bytes([op]) for op in (0xE8, 0xE9, 0xEB, 0xCD, 0xF4, 0xFA, 0xFB, 0xCF, 0xCC)]
    + [bytes([op]) for op in (0xE4, 0xE5, 0xE6, 0xE7, 0xEC, 0xED, 0xEE, 0xEF)]
    + [bytes([0x0F, op]) for op in range(0x80, 0x90)]
    + [bytes([0xFF, (mod << 6) | (ext << 3)]) for ext in (2, 3, 4, 5, 6) for mod in range(3)]
    + [bytes([0xFF, 0xC0 | (ext << 3)]) for ext in (2, 4, 6)]
)


def test_lengths_agree_with_capstone():
    capstone = pytest.importorskip("capstone")
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_32)
    rng = np.random.default_rng(7)
    covered = set()
    for _ in range(40):
        for lead in CAPSTONE_LEADS:
            tail = bytes(rng.integers(0, 256, 15 - len(lead)).astype(np.uint8))
            if len(lead) == 2 and lead[0] == 0xFF:
                # keep mod and reg, randomise r/m
                lead = bytes([0xFF, lead[1] | int(rng.integers(0, 8))])
            elif lead == b"\x8d":
                # lea has no register form
                tail = bytes([tail[0] & 0xBF]) + tail[1:]
            data = lead + tail
            ours = decode(data)
            assert ours.category is not InsnClass.INVALID, data.hex()
            theirs = next(md.disasm(data, 0x1000), None)
            assert theirs is not None, data.hex()
            assert ours.length == theirs.size, data.hex()
            covered.add(lead[:1] if lead[0] == 0xFF else lead)
    assert len(covered) > 100


@pytest.mark.parametrize("modrm", [0xD8, 0xDB, 0xE8, 0xEF])
def test_far_branch_through_register_is_invalid(modrm):
    insn = decode(bytes([0xFF, modrm]) + b"\x00" * 8)
    assert insn.category is InsnClass.INVALID
    assert insn.length == 1
