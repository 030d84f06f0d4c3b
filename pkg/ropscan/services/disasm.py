"""Decoder for the 32-bit x86 subset used by gadget extraction.

Only the opcodes listed in `_decode_one` are understood. Everything else,
including every prefix byte, decodes as an Invalid instruction, which stops
gadget extraction the same way a privileged instruction does.
"""
import enum
from dataclasses import dataclass, field
from functools import cached_property

from ropscan.services.memory_image import MemoryImage

MAX_INSN_LEN = 15
MAX_GADGET_INSNS = 64

REGS32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
REGS8 = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")
ESP, EBP = 4, 5


class InsnClass(enum.Enum):
    NORMAL = "Normal"
    RETURN = "Return"
    INDIRECT_JMP = "IndirectJmp"
    INDIRECT_CALL = "IndirectCall"
    DIRECT_BRANCH = "DirectBranch"
    PRIVILEGED = "Privileged"
    INVALID = "Invalid"


TERMINATORS = frozenset({InsnClass.RETURN, InsnClass.INDIRECT_JMP, InsnClass.INDIRECT_CALL})


class OperandKind(enum.Enum):
    REG = "reg"
    IMM = "imm"
    MEM = "mem"
    REL = "rel"


@dataclass(frozen=True, slots=True)
class Operand:
    kind: OperandKind
    size: int = 4
    reg: int | None = None
    base: int | None = None
    index: int | None = None
    scale: int = 1
    disp: int = 0
    value: int = 0

    @property
    def is_stack_memory(self) -> bool:
        return self.kind is OperandKind.MEM and self.base == ESP and self.index is None

    def address_regs(self) -> set[str]:
        regs = set()
        if self.base is not None:
            regs.add(REGS32[self.base])
        if self.index is not None:
            regs.add(REGS32[self.index])
        return regs

    def __str__(self) -> str:
        if self.kind is OperandKind.REG:
            return (REGS8 if self.size == 1 else REGS32)[self.reg]
        if self.kind in (OperandKind.IMM, OperandKind.REL):
            return hex(self.value)
        parts = []
        if self.base is not None:
            parts.append(REGS32[self.base])
        if self.index is not None:
            parts.append(f"{REGS32[self.index]}*{self.scale}" if self.scale > 1 else REGS32[self.index])
        text = "+".join(parts)
        if self.disp or not parts:
            if parts and self.disp < 0:
                text += f"-{-self.disp:#x}"
            elif parts:
                text += f"+{self.disp:#x}"
            else:
                text = f"{self.disp & 0xFFFFFFFF:#x}"
        prefix = "byte ptr " if self.size == 1 else ""
        return f"{prefix}[{text}]"


@dataclass(frozen=True, slots=True)
class Instruction:
    length: int
    mnemonic: str
    category: InsnClass
    raw: bytes
    operands: tuple[Operand, ...] = ()
    reads: frozenset[str] = frozenset()
    writes: frozenset[str] = frozenset()
    touches_memory: bool = False

    @property
    def is_terminator(self) -> bool:
        return self.category in TERMINATORS

    def __str__(self) -> str:
        if self.category is InsnClass.INVALID:
            return "(bad)"
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} {', '.join(str(op) for op in self.operands)}"


INVALID = Instruction(length=1, mnemonic="(bad)", category=InsnClass.INVALID, raw=b"")


class IndeterminateStackDeltaError(ValueError):
    pass


@dataclass(frozen=True)
class GadgetLikeSequence:
    start_addr: int
    instructions: tuple[Instruction, ...]

    @property
    def byte_len(self) -> int:
        return sum(insn.length for insn in self.instructions)

    @property
    def raw(self) -> bytes:
        return b"".join(insn.raw for insn in self.instructions)

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    @cached_property
    def stack_delta(self) -> int | None:
        """Net esp change, or None when it cannot be known statically."""
        try:
            return stack_delta(self)
        except (IndeterminateStackDeltaError, ValueError):
            return None

    def __str__(self) -> str:
        return format_sequence(self.instructions)


def format_sequence(instructions) -> str:
    return "; ".join(str(insn) for insn in instructions)


# --- decoding ---------------------------------------------------------------

_ARITH = {
    0x01: "add", 0x03: "add", 0x05: "add",
    0x29: "sub", 0x2B: "sub", 0x2D: "sub",
    0x31: "xor", 0x33: "xor", 0x35: "xor",
    0x09: "or", 0x0B: "or", 0x0D: "or",
    0x21: "and", 0x23: "and", 0x25: "and",
    0x39: "cmp", 0x3B: "cmp", 0x3D: "cmp",
}
_NO_WRITE = {"cmp", "test"}
_ZERO_IDIOM = {"xor", "sub"}
_PRIVILEGED_ONE_BYTE = {0xF4: "hlt", 0xFA: "cli", 0xFB: "sti", 0xCF: "iret", 0xCC: "int3"}


class _Truncated(Exception):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        if self.pos >= len(self.data) or self.pos >= MAX_INSN_LEN:
            raise _Truncated
        b = self.data[self.pos]
        self.pos += 1
        return b

    def uint(self, size: int) -> int:
        value = 0
        for i in range(size):
            value |= self.u8() << (8 * i)
        return value

    def sint(self, size: int) -> int:
        value = self.uint(size)
        bits = 8 * size
        return value - (1 << bits) if value >> (bits - 1) else value


def _modrm(r: _Reader, size: int) -> tuple[int, int, Operand]:
    """Returns (mod, reg field, r/m operand)."""
    modrm = r.u8()
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    if mod == 3:
        return mod, reg, Operand(OperandKind.REG, size=size, reg=rm)
    base, index, scale = rm, None, 1
    if rm == 4:
        sib = r.u8()
        scale = 1 << (sib >> 6)
        index = (sib >> 3) & 7
        base = sib & 7
        if index == 4:
            index, scale = None, 1
        if base == 5 and mod == 0:
            base = None
            return mod, reg, Operand(OperandKind.MEM, size=size, base=None, index=index, scale=scale, disp=r.sint(4))
    elif rm == 5 and mod == 0:
        return mod, reg, Operand(OperandKind.MEM, size=size, disp=r.sint(4))
    disp = r.sint(1) if mod == 1 else r.sint(4) if mod == 2 else 0
    return mod, reg, Operand(OperandKind.MEM, size=size, base=base, index=index, scale=scale, disp=disp)


def _reg_names(op: Operand) -> set[str]:
    """32-bit registers an operand reads (its value or its address)."""
    if op.kind is OperandKind.REG:
        return {REGS32[op.reg & 3] if op.size == 1 else REGS32[op.reg]}
    if op.kind is OperandKind.MEM:
        return op.address_regs()
    return set()


def _dest_writes(op: Operand) -> tuple[set[str], set[str]]:
    """(reads, writes) caused by writing to `op`."""
    if op.kind is OperandKind.REG:
        name = REGS32[op.reg & 3] if op.size == 1 else REGS32[op.reg]
        # a byte write merges into the 32-bit register
        return ({name} if op.size == 1 else set()), {name}
    if op.kind is OperandKind.MEM:
        return op.address_regs(), set()
    return set(), set()


def _accesses_memory(*ops: Operand) -> bool:
    return any(op.kind is OperandKind.MEM and not op.is_stack_memory for op in ops)


def _two_operand(mnemonic: str, dst: Operand, src: Operand) -> dict:
    reads, writes = set(), set()
    if mnemonic == "mov":
        reads |= _reg_names(src)
        dreads, dwrites = _dest_writes(dst)
        reads |= dreads
        writes |= dwrites
    elif mnemonic == "xchg":
        reads |= _reg_names(src) | _reg_names(dst)
        for op in (dst, src):
            writes |= _dest_writes(op)[1]
    else:
        same = dst.kind is OperandKind.REG and src.kind is OperandKind.REG and dst.reg == src.reg
        if not (mnemonic in _ZERO_IDIOM and same):
            reads |= _reg_names(src) | _reg_names(dst)
        if mnemonic not in _NO_WRITE:
            writes |= _dest_writes(dst)[1]
        if dst.kind is OperandKind.MEM:
            reads |= dst.address_regs()
    return {
        "operands": (dst, src),
        "reads": frozenset(reads),
        "writes": frozenset(writes),
        "touches_memory": _accesses_memory(dst, src),
    }


def _decode_one(r: _Reader) -> tuple[str, InsnClass, dict]:
    op = r.u8()

    if 0x40 <= op <= 0x4F:
        reg = op & 7
        name = REGS32[reg]
        return ("inc" if op < 0x48 else "dec"), InsnClass.NORMAL, {
            "operands": (Operand(OperandKind.REG, reg=reg),),
            "reads": frozenset({name}), "writes": frozenset({name}),
        }
    if 0x50 <= op <= 0x57:
        reg = op & 7
        return "push", InsnClass.NORMAL, {
            "operands": (Operand(OperandKind.REG, reg=reg),),
            "reads": frozenset({REGS32[reg], "esp"}), "writes": frozenset({"esp"}),
        }
    if 0x58 <= op <= 0x5F:
        reg = op & 7
        return "pop", InsnClass.NORMAL, {
            "operands": (Operand(OperandKind.REG, reg=reg),),
            "reads": frozenset({"esp"}), "writes": frozenset({REGS32[reg], "esp"}),
        }
    if 0xB8 <= op <= 0xBF:
        reg = op & 7
        return "mov", InsnClass.NORMAL, {
            "operands": (Operand(OperandKind.REG, reg=reg), Operand(OperandKind.IMM, value=r.uint(4))),
            "writes": frozenset({REGS32[reg]}),
        }
    if op in (0x88, 0x89, 0x8A, 0x8B):
        size = 1 if op in (0x88, 0x8A) else 4
        _, reg, rm = _modrm(r, size)
        regop = Operand(OperandKind.REG, size=size, reg=reg)
        dst, src = (rm, regop) if op in (0x88, 0x89) else (regop, rm)
        return "mov", InsnClass.NORMAL, _two_operand("mov", dst, src)
    if op in _ARITH:
        mnemonic = _ARITH[op]
        low = op & 7
        eax = Operand(OperandKind.REG, reg=0)
        if low == 5:
            return mnemonic, InsnClass.NORMAL, _two_operand(mnemonic, eax, Operand(OperandKind.IMM, value=r.uint(4)))
        _, reg, rm = _modrm(r, 4)
        regop = Operand(OperandKind.REG, reg=reg)
        dst, src = (rm, regop) if low == 1 else (regop, rm)
        return mnemonic, InsnClass.NORMAL, _two_operand(mnemonic, dst, src)
    if op == 0x85:
        _, reg, rm = _modrm(r, 4)
        return "test", InsnClass.NORMAL, _two_operand("test", rm, Operand(OperandKind.REG, reg=reg))
    if op == 0xA9:
        return "test", InsnClass.NORMAL, _two_operand(
            "test", Operand(OperandKind.REG, reg=0), Operand(OperandKind.IMM, value=r.uint(4))
        )
    if op == 0x87:
        _, reg, rm = _modrm(r, 4)
        return "xchg", InsnClass.NORMAL, _two_operand("xchg", rm, Operand(OperandKind.REG, reg=reg))
    if 0x91 <= op <= 0x97:
        return "xchg", InsnClass.NORMAL, _two_operand(
            "xchg", Operand(OperandKind.REG, reg=0), Operand(OperandKind.REG, reg=op & 7)
        )
    if op == 0x8D:
        mod, reg, rm = _modrm(r, 4)
        if mod == 3:
            return "(bad)", InsnClass.INVALID, {}
        return "lea", InsnClass.NORMAL, {
            "operands": (Operand(OperandKind.REG, reg=reg), rm),
            "reads": frozenset(rm.address_regs()), "writes": frozenset({REGS32[reg]}),
        }
    if op == 0x90:
        return "nop", InsnClass.NORMAL, {}
    if op == 0xC9:
        return "leave", InsnClass.NORMAL, {"reads": frozenset({"ebp"}), "writes": frozenset({"esp", "ebp"})}
    if op == 0xC3:
        return "ret", InsnClass.RETURN, {"reads": frozenset({"esp"}), "writes": frozenset({"esp"})}
    if op == 0xC2:
        imm = r.uint(2)
        return "ret", InsnClass.RETURN, {
            "operands": (Operand(OperandKind.IMM, size=2, value=imm),),
            "reads": frozenset({"esp"}), "writes": frozenset({"esp"}),
        }
    if op in (0xE8, 0xE9):
        rel = r.sint(4)
        return ("call" if op == 0xE8 else "jmp"), InsnClass.DIRECT_BRANCH, {
            "operands": (Operand(OperandKind.REL, value=rel & 0xFFFFFFFF),),
        }
    if op == 0xEB:
        rel = r.sint(1)
        return "jmp", InsnClass.DIRECT_BRANCH, {"operands": (Operand(OperandKind.REL, value=rel & 0xFFFFFFFF),)}
    if op == 0xFF:
        mod, ext, rm = _modrm(r, 4)
        reads = _reg_names(rm)
        info = {"operands": (rm,), "touches_memory": _accesses_memory(rm)}
        if ext == 2:
            return "call", InsnClass.INDIRECT_CALL, {**info, "reads": frozenset(reads | {"esp"}), "writes": frozenset({"esp"})}
        if ext == 4:
            return "jmp", InsnClass.INDIRECT_JMP, {**info, "reads": frozenset(reads)}
        if ext in (3, 5):
            if mod == 3:
                return "(bad)", InsnClass.INVALID, {}
            far = {**info, "reads": frozenset(reads)}
            if ext == 3:
                return "lcall", InsnClass.INDIRECT_CALL, far
            return "ljmp", InsnClass.INDIRECT_JMP, far
        if ext == 6:
            return "push", InsnClass.NORMAL, {**info, "reads": frozenset(reads | {"esp"}), "writes": frozenset({"esp"})}
        return "(bad)", InsnClass.INVALID, {}
    if op == 0xCD:
        return "int", InsnClass.PRIVILEGED, {"operands": (Operand(OperandKind.IMM, size=1, value=r.u8()),)}
    if op in _PRIVILEGED_ONE_BYTE:
        return _PRIVILEGED_ONE_BYTE[op], InsnClass.PRIVILEGED, {}
    if op in (0xE4, 0xE5, 0xE6, 0xE7):
        r.u8()
        return ("in" if op < 0xE6 else "out"), InsnClass.PRIVILEGED, {}
    if op in (0xEC, 0xED, 0xEE, 0xEF):
        return ("in" if op < 0xEE else "out"), InsnClass.PRIVILEGED, {}
    if op == 0x0F:
        op2 = r.u8()
        if 0x80 <= op2 <= 0x8F:
            rel = r.sint(4)
            return "jcc", InsnClass.DIRECT_BRANCH, {"operands": (Operand(OperandKind.REL, value=rel & 0xFFFFFFFF),)}
    return "(bad)", InsnClass.INVALID, {}


def decode(data: bytes) -> Instruction:
    """Decode one instruction from the start of `data`."""
    if not data:
        raise ValueError("decode needs at least one byte")
    reader = _Reader(bytes(data[:MAX_INSN_LEN]))
    try:
        mnemonic, category, info = _decode_one(reader)
    except _Truncated:
        return INVALID
    if category is InsnClass.INVALID:
        return INVALID
    return Instruction(
        length=reader.pos,
        mnemonic=mnemonic,
        category=category,
        raw=bytes(data[:reader.pos]),
        operands=info.get("operands", ()),
        reads=info.get("reads", frozenset()),
        writes=info.get("writes", frozenset()),
        touches_memory=info.get("touches_memory", False),
    )


def decode_all(data: bytes, max_insns: int | None = None) -> list[Instruction]:
    """Linear sweep until the bytes run out or an Invalid instruction appears."""
    out, pos = [], 0
    while pos < len(data) and (max_insns is None or len(out) < max_insns):
        insn = decode(data[pos:])
        out.append(insn)
        if insn.category is InsnClass.INVALID:
            break
        pos += insn.length
    return out


def extract_gadget(image: MemoryImage, addr: int, max_insns: int = MAX_GADGET_INSNS) -> GadgetLikeSequence | None:
    """Disassemble from `addr` up to the first indirect branch, never leaving addr's segment."""
    segment = image.segment_for(addr)
    if segment is None:
        return None
    instructions = []
    cur = addr
    while len(instructions) < max_insns:
        if cur >= segment.end:
            return None
        insn = decode(image.read_bytes(cur, MAX_INSN_LEN))
        if insn.category in (InsnClass.INVALID, InsnClass.PRIVILEGED, InsnClass.DIRECT_BRANCH):
            return None
        instructions.append(insn)
        if insn.is_terminator:
            return GadgetLikeSequence(addr, tuple(instructions))
        cur += insn.length
    return None


def _esp_effect(insn: Instruction) -> int:
    """esp displacement of one non-terminating instruction; raises if unknowable."""
    if insn.mnemonic == "push":
        return -4
    if insn.mnemonic == "pop":
        if insn.operands[0].reg == ESP:
            raise IndeterminateStackDeltaError("pop esp")
        return 4
    if "esp" not in insn.writes:
        return 0
    if insn.mnemonic in ("inc", "dec") and insn.operands[0].kind is OperandKind.REG:
        return 1 if insn.mnemonic == "inc" else -1
    raise IndeterminateStackDeltaError(f"{insn} changes esp by an unknown amount")


def stack_delta(seq: GadgetLikeSequence) -> int:
    """Net esp displacement over a ret-ending gadget, including the ret's pop."""
    if seq.terminator.category is not InsnClass.RETURN:
        raise ValueError("stack delta is defined for ret-ending sequences only")
    delta = sum(_esp_effect(insn) for insn in seq.instructions[:-1])
    ret = seq.terminator
    imm = ret.operands[0].value if ret.operands else 0
    return delta + 4 + imm


def pre_return_delta(seq: GadgetLikeSequence) -> int:
    """esp displacement before the terminating ret executes."""
    return stack_delta(seq) - 4 - return_imm(seq)


def return_imm(seq: GadgetLikeSequence) -> int:
    ret = seq.terminator
    return ret.operands[0].value if ret.category is InsnClass.RETURN and ret.operands else 0
