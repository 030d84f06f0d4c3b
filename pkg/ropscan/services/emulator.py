"""Concrete execution of gadget chains over a synthetic stack.

Only the decoder's instruction subset is executed. Memory is the synthetic
stack (read/write) plus the image pages (read-only); anything else faults.
"""
import enum
from dataclasses import dataclass, field

from ropscan.services.disasm import (
    EBP,
    ESP,
    REGS32,
    GadgetLikeSequence,
    IndeterminateStackDeltaError,
    Instruction,
    InsnClass,
    MAX_INSN_LEN,
    Operand,
    OperandKind,
    decode,
    pre_return_delta,
    return_imm,
)
from ropscan.services.memory_image import MemoryImage

FILLER = 0x42424242
STACK_BASE = 0x7FFE0000
STACK_HEADROOM = 0x400
STEP_LIMIT = 4096
PREINITIALIZED = frozenset({"esp", "ebp"})
MASK = 0xFFFFFFFF


class Failure(enum.Enum):
    UNMAPPED_READ = "UnmappedRead"
    UNMAPPED_WRITE = "UnmappedWrite"
    INVALID_INSTRUCTION = "InvalidInstruction"
    UNINITIALIZED_REGISTER_USE = "UninitializedRegisterUse"
    STACK_UNDERFLOW = "StackUnderflow"
    OUT_OF_ORDER_CONTROL_FLOW = "OutOfOrderControlFlow"
    STEP_LIMIT = "StepLimit"


class StackLayoutError(ValueError):
    pass


class _Fault(Exception):
    def __init__(self, failure: Failure, detail: str = ""):
        super().__init__(detail or failure.value)
        self.failure = failure


@dataclass(frozen=True)
class StackLayout:
    words: tuple[int, ...]
    trailing: int = 0

    @property
    def size(self) -> int:
        return 4 * (len(self.words) + self.trailing)


@dataclass
class ValidationReport:
    ok: bool
    gadgets_executed: int
    failure: Failure | None = None
    detail: str = ""
    steps: int = 0


@dataclass
class MachineState:
    regs: list[int]
    eip: int
    stack: bytearray
    stack_base: int
    flags: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(("ZF", "SF", "CF", "OF"), False))
    written: set[str] = field(default_factory=lambda: set(PREINITIALIZED))

    @property
    def esp(self) -> int:
        return self.regs[ESP]

    @property
    def stack_end(self) -> int:
        return self.stack_base + len(self.stack)


def layout_stack(chain: list[GadgetLikeSequence]) -> StackLayout:
    """Place each gadget address where the previous gadget's ret pops it."""
    if not chain:
        return StackLayout(())
    words = [chain[0].start_addr]
    for prev, nxt in zip(chain, chain[1:]):
        pops, imm = _pops_and_imm(prev)
        words.extend([FILLER] * (pops // 4))
        words.append(nxt.start_addr)
        words.extend([FILLER] * (imm // 4))
    pops, imm = _pops_and_imm(chain[-1])
    return StackLayout(tuple(words), trailing=pops // 4 + 1 + imm // 4)


def _pops_and_imm(gadget: GadgetLikeSequence) -> tuple[int, int]:
    if gadget.terminator.category is not InsnClass.RETURN:
        raise StackLayoutError(f"gadget at {gadget.start_addr:#010x} does not end in ret")
    try:
        pops = pre_return_delta(gadget)
    except IndeterminateStackDeltaError as e:
        raise StackLayoutError(str(e)) from e
    imm = return_imm(gadget)
    if pops < 0 or pops % 4 or imm % 4:
        raise StackLayoutError(f"gadget at {gadget.start_addr:#010x} has an unaligned stack delta")
    return pops, imm


class Emulator:
    def __init__(self, image: MemoryImage, layout: StackLayout, step_limit: int = STEP_LIMIT):
        self.image = image
        self.step_limit = step_limit
        stack = bytearray(FILLER.to_bytes(4, "little") * ((2 * STACK_HEADROOM + layout.size) // 4))
        start = STACK_HEADROOM
        for i, word in enumerate(layout.words):
            stack[start + 4 * i:start + 4 * i + 4] = word.to_bytes(4, "little")
        regs = [0] * 8
        # execution starts as if a ret had just popped the first address
        regs[ESP] = STACK_BASE + start + 4
        regs[EBP] = STACK_BASE + start
        self.state = MachineState(regs=regs, eip=layout.words[0] if layout.words else 0,
                                  stack=stack, stack_base=STACK_BASE)

    # --- memory ---------------------------------------------------------

    def _in_stack(self, addr: int, size: int) -> bool:
        return self.state.stack_base <= addr and addr + size <= self.state.stack_end

    def read_mem(self, addr: int, size: int) -> int:
        addr &= MASK
        if self._in_stack(addr, size):
            off = addr - self.state.stack_base
            return int.from_bytes(self.state.stack[off:off + size], "little")
        if self.image.contains(addr):
            data = self.image.read_bytes(addr, size)
            if len(data) == size:
                return int.from_bytes(data, "little")
        raise _Fault(Failure.UNMAPPED_READ, f"read of {size} bytes at {addr:#010x}")

    def write_mem(self, addr: int, size: int, value: int) -> None:
        addr &= MASK
        if not self._in_stack(addr, size):
            raise _Fault(Failure.UNMAPPED_WRITE, f"write of {size} bytes at {addr:#010x}")
        off = addr - self.state.stack_base
        self.state.stack[off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")

    def set_esp(self, value: int) -> None:
        value &= MASK
        if not self.state.stack_base <= value <= self.state.stack_end:
            raise _Fault(Failure.STACK_UNDERFLOW, f"esp left the stack ({value:#010x})")
        self.state.regs[ESP] = value

    def push(self, value: int) -> None:
        self.set_esp(self.state.esp - 4)
        self.write_mem(self.state.esp, 4, value)

    def pop(self) -> int:
        if self.state.esp + 4 > self.state.stack_end:
            raise _Fault(Failure.STACK_UNDERFLOW, "pop past the top of the stack")
        value = self.read_mem(self.state.esp, 4)
        self.set_esp(self.state.esp + 4)
        return value

    # --- operands -------------------------------------------------------

    def effective_address(self, op: Operand) -> int:
        addr = op.disp
        if op.base is not None:
            addr += self.state.regs[op.base]
        if op.index is not None:
            addr += self.state.regs[op.index] * op.scale
        return addr & MASK

    def read_operand(self, op: Operand) -> int:
        if op.kind is OperandKind.REG:
            if op.size == 1:
                value = self.state.regs[op.reg & 3]
                return (value >> 8) & 0xFF if op.reg >= 4 else value & 0xFF
            return self.state.regs[op.reg]
        if op.kind is OperandKind.MEM:
            return self.read_mem(self.effective_address(op), op.size)
        return op.value & MASK

    def write_operand(self, op: Operand, value: int) -> None:
        if op.kind is OperandKind.REG:
            if op.size == 1:
                parent = op.reg & 3
                shift = 8 if op.reg >= 4 else 0
                current = self.state.regs[parent] & ~(0xFF << shift) & MASK
                self.state.regs[parent] = current | ((value & 0xFF) << shift)
                self.state.written.add(REGS32[parent])
            elif op.reg == ESP:
                self.set_esp(value)
                self.state.written.add("esp")
            else:
                self.state.regs[op.reg] = value & MASK
                self.state.written.add(REGS32[op.reg])
        elif op.kind is OperandKind.MEM:
            self.write_mem(self.effective_address(op), op.size, value)

    def _set_flags(self, result: int, bits: int, carry: bool | None = None, overflow: bool = False) -> None:
        mask = (1 << bits) - 1
        flags = self.state.flags
        flags["ZF"] = (result & mask) == 0
        flags["SF"] = bool((result >> (bits - 1)) & 1)
        if carry is not None:
            flags["CF"] = carry
        flags["OF"] = overflow

    # --- execution ------------------------------------------------------

    def step(self) -> Instruction:
        eip = self.state.eip
        if not self.image.contains(eip):
            raise _Fault(Failure.UNMAPPED_READ, f"fetch at {eip:#010x}")
        insn = decode(self.image.read_bytes(eip, MAX_INSN_LEN))
        if insn.category in (InsnClass.INVALID, InsnClass.PRIVILEGED, InsnClass.DIRECT_BRANCH):
            raise _Fault(Failure.INVALID_INSTRUCTION, f"{insn} at {eip:#010x}")
        missing = insn.reads - self.state.written
        if missing:
            raise _Fault(Failure.UNINITIALIZED_REGISTER_USE, f"{insn} reads {', '.join(sorted(missing))}")
        self.state.eip = (eip + insn.length) & MASK
        handler = getattr(self, f"run_{insn.mnemonic}", None)
        if handler is None:
            raise _Fault(Failure.INVALID_INSTRUCTION, f"no semantics for {insn.mnemonic}")
        handler(insn)
        return insn

    def run_nop(self, insn):
        pass

    def run_mov(self, insn):
        dst, src = insn.operands
        self.write_operand(dst, self.read_operand(src))

    def run_lea(self, insn):
        dst, src = insn.operands
        self.write_operand(dst, self.effective_address(src))

    def run_xchg(self, insn):
        a, b = insn.operands
        va, vb = self.read_operand(a), self.read_operand(b)
        self.write_operand(a, vb)
        self.write_operand(b, va)

    def _arith(self, insn, fn, write=True):
        dst, src = insn.operands
        a, b = self.read_operand(dst), self.read_operand(src)
        result, carry, overflow = fn(a, b)
        self._set_flags(result, 32, carry, overflow)
        if write:
            self.write_operand(dst, result & MASK)

    @staticmethod
    def _add(a, b):
        r = a + b
        return r, r > MASK, bool(~(a ^ b) & (a ^ r) & 0x80000000)

    @staticmethod
    def _sub(a, b):
        r = (a - b) & MASK
        return r, a < b, bool((a ^ b) & (a ^ r) & 0x80000000)

    def run_add(self, insn):
        self._arith(insn, self._add)

    def run_sub(self, insn):
        self._arith(insn, self._sub)

    def run_cmp(self, insn):
        self._arith(insn, self._sub, write=False)

    def run_xor(self, insn):
        self._arith(insn, lambda a, b: (a ^ b, False, False))

    def run_or(self, insn):
        self._arith(insn, lambda a, b: (a | b, False, False))

    def run_and(self, insn):
        self._arith(insn, lambda a, b: (a & b, False, False))

    def run_test(self, insn):
        self._arith(insn, lambda a, b: (a & b, False, False), write=False)

    def run_inc(self, insn):
        (op,) = insn.operands
        a = self.read_operand(op)
        r = (a + 1) & MASK
        self._set_flags(r, 32, None, a == 0x7FFFFFFF)
        self.write_operand(op, r)

    def run_dec(self, insn):
        (op,) = insn.operands
        a = self.read_operand(op)
        r = (a - 1) & MASK
        self._set_flags(r, 32, None, a == 0x80000000)
        self.write_operand(op, r)

    def run_push(self, insn):
        (op,) = insn.operands
        self.push(self.read_operand(op))

    def run_pop(self, insn):
        (op,) = insn.operands
        value = self.pop()
        self.write_operand(op, value)

    def run_leave(self, insn):
        self.set_esp(self.state.regs[EBP])
        self.state.regs[EBP] = self.pop()

    def run_ret(self, insn):
        target = self.pop()
        if insn.operands:
            self.set_esp(self.state.esp + insn.operands[0].value)
        self.state.eip = target

    def run_jmp(self, insn):
        self.state.eip = self.read_operand(insn.operands[0])

    def run_ljmp(self, insn):
        self.state.eip = self.read_operand(insn.operands[0])

    def run_call(self, insn):
        # the callee is assumed to succeed; execution falls through
        pass

    def run_lcall(self, insn):
        pass


def validate_chain(
    image: MemoryImage,
    chain: list[GadgetLikeSequence],
    layout: StackLayout | None = None,
    step_limit: int = STEP_LIMIT,
) -> ValidationReport:
    """Execute the chain from its first gadget and check each hands over to the next."""
    if not chain:
        return ValidationReport(ok=True, gadgets_executed=0)
    if layout is None:
        try:
            layout = layout_stack(chain)
        except StackLayoutError as e:
            return ValidationReport(False, 0, Failure.OUT_OF_ORDER_CONTROL_FLOW, str(e))
    if not layout.words or layout.words[0] != chain[0].start_addr:
        return ValidationReport(False, 0, Failure.OUT_OF_ORDER_CONTROL_FLOW, "layout does not start with the chain")

    emu = Emulator(image, layout, step_limit)
    executed, steps = 0, 0
    try:
        while True:
            if steps >= step_limit:
                raise _Fault(Failure.STEP_LIMIT, f"{steps} steps")
            insn = emu.step()
            steps += 1
            if not insn.is_terminator or insn.category is InsnClass.INDIRECT_CALL:
                continue
            executed += 1
            if executed == len(chain):
                return ValidationReport(True, executed, steps=steps)
            expected = chain[executed].start_addr
            if emu.state.eip != expected:
                raise _Fault(
                    Failure.OUT_OF_ORDER_CONTROL_FLOW,
                    f"gadget {executed} transferred to {emu.state.eip:#010x}, expected {expected:#010x}",
                )
    except _Fault as fault:
        return ValidationReport(False, executed, fault.failure, str(fault), steps)


def observed_stack_delta(image: MemoryImage, gadget: GadgetLikeSequence) -> int | None:
    """Run one ret-ending gadget alone and report how far esp moved, or None on a fault."""
    try:
        layout = layout_stack([gadget])
    except StackLayoutError:
        return None
    emu = Emulator(image, layout)
    start = emu.state.esp
    try:
        for _ in range(len(gadget.instructions)):
            insn = emu.step()
            if insn.category is InsnClass.RETURN:
                return emu.state.esp - start
    except _Fault:
        return None
    return None
