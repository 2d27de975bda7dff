"""
Deterministic user-space x86-64 emulator.

Two entry points share one Machine: ``run_routine`` calls a single routine
with synthetic buffers bound per a CallLayout (offline verification), and
``run_program`` runs a whole executable from its entry point on a test-input
script with instrumentation hooks (taint analysis, instruction counting).

Imports are never executed: a call or jump to a PLT stub runs the matching
libc model instead.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from hashswap.elf import BinaryImage
from hashswap.errors import (ExecutionError, GasExhausted, HashswapError,
                             MemoryFault, ModelMissing, UndecodableInstruction,
                             UnresolvedExternalCall, UnsupportedInstruction)
from hashswap.libc import LibcEffect, LibcModel, RegSource, MemSource, Source, model_table
from hashswap.x86 import (CONDITION_CODES, HIGH8, REGISTERS, STRING_OPS, Imm, Instruction,
                          Mem, Reg, decode)

logger = logging.getLogger(__name__)

PAGE = 0x1000
STACK_TOP = 0x7fffffff0000
STACK_SIZE = 0x100000
SENTINEL = 0xdead0000
HEAP_BASE = 0x10000000
INPUT_BASE = 0x20000000
OUTPUT_BASE = 0x30000000
OUTPUT_SIZE = 64
RED_ZONE = 128
PROGRAM_NAME = b'./program'

MASK64 = (1 << 64) - 1
MASKS = {1: 0xff, 2: 0xffff, 4: 0xffffffff, 8: MASK64}
ARG_REGS = ('rdi', 'rsi', 'rdx', 'rcx', 'r8', 'r9')
PARITY = [bin(x).count('1') % 2 == 0 for x in range(256)]

# name -> (index into the register file, size, bit shift)
_REGS: Dict[str, Tuple[int, int, int]] = {name: (number, size, 0) for name, (number, size) in REGISTERS.items()}
_REGS.update({name: (number, 1, 8) for name, number in HIGH8.items()})
RSP, RBP, RAX, RDX = 4, 5, 0, 2


@dataclass(frozen=True)
class CallLayout:
    """Binding of (input, length, output) to the first argument registers."""

    order: str

    @property
    def arity(self) -> int:
        return len(self.order)

    def register(self, role: str) -> Optional[str]:
        index = self.order.find(role)
        return ARG_REGS[index] if index >= 0 else None

    def __str__(self) -> str:
        return self.order


LAYOUTS: Tuple[CallLayout, ...] = tuple(CallLayout(o) for o in
                                        ('ILO', 'IOL', 'LIO', 'LOI', 'OIL', 'OLI', 'IO', 'OI'))


def layout_named(name: str) -> CallLayout:
    for layout in LAYOUTS:
        if layout.order == name:
            return layout
    raise HashswapError(f"unknown parameter layout {name!r}")


@dataclass
class Frame:
    """Shadow-stack record: rsp at callee entry (pointing at the return
    address) and the routine that was called."""

    entry_sp: int
    callee: int
    return_address: int
    call_site: Optional[int] = None


@dataclass
class Allocation:
    base: int
    size: int
    site: int
    live: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, vaddr: int) -> bool:
        return self.live and self.base <= vaddr < self.end


@dataclass(frozen=True)
class LibcCall:
    name: str
    site: int
    effect: LibcEffect


@dataclass
class Step:
    """What a post-execution hook sees: the instruction, the register file
    before it ran, the effective address of its memory operand (if any), and
    the libc call it made (if any)."""

    insn: Instruction
    regs: List[int]
    address: Optional[int] = None
    libc: Optional[LibcCall] = None


class Hook:
    def before(self, machine: 'Machine', insn: Instruction):
        pass

    def after(self, machine: 'Machine', step: Step):
        pass


@dataclass
class ExecutionTrace:
    vaddrs: List[int] = field(default_factory=list)
    writes: List[Tuple[int, int]] = field(default_factory=list)
    libc_calls: List[Tuple[str, int]] = field(default_factory=list)
    stdout: bytes = b''
    exit_status: Optional[int] = None
    instruction_count: int = 0
    heap_allocations: List[Allocation] = field(default_factory=list)
    shadow_depth: int = 0


class Memory:
    """Sparse byte memory made of 4 KiB pages; unmapped access faults."""

    def __init__(self):
        self.pages: Dict[int, bytearray] = {}
        self.on_write = None

    def map(self, vaddr: int, size: int):
        for page in range(vaddr // PAGE, (vaddr + size + PAGE - 1) // PAGE):
            self.pages.setdefault(page, bytearray(PAGE))

    def is_mapped(self, vaddr: int) -> bool:
        return (vaddr & MASK64) // PAGE in self.pages

    def read(self, vaddr: int, size: int) -> bytes:
        vaddr &= MASK64
        offset = vaddr % PAGE
        if offset + size <= PAGE:
            page = self.pages.get(vaddr // PAGE)
            if page is None:
                raise MemoryFault(f"read of {size} bytes from unmapped memory", vaddr)
            return bytes(page[offset:offset + size])
        first = PAGE - offset
        return self.read(vaddr, first) + self.read(vaddr + first, size - first)

    def write(self, vaddr: int, data: bytes):
        vaddr &= MASK64
        offset = vaddr % PAGE
        size = len(data)
        if offset + size <= PAGE:
            page = self.pages.get(vaddr // PAGE)
            if page is None:
                raise MemoryFault(f"write of {size} bytes to unmapped memory", vaddr)
            page[offset:offset + size] = data
            if self.on_write is not None:
                self.on_write(vaddr, size)
            return
        first = PAGE - offset
        self.write(vaddr, data[:first])
        self.write(vaddr + first, data[first:])

    def read_int(self, vaddr: int, size: int) -> int:
        return int.from_bytes(self.read(vaddr, size), 'little')

    def write_int(self, vaddr: int, size: int, value: int):
        self.write(vaddr, (value & MASKS[size]).to_bytes(size, 'little'))

    def read_cstring(self, vaddr: int, limit: int = 1 << 16) -> bytes:
        out = bytearray()
        while len(out) < limit:
            chunk = self.read(vaddr + len(out), min(PAGE - (vaddr + len(out)) % PAGE, 256))
            end = chunk.find(b'\0')
            if end >= 0:
                out.extend(chunk[:end])
                return bytes(out)
            out.extend(chunk)
        raise MemoryFault("unterminated string", vaddr)


class Machine:
    def __init__(self, image: BinaryImage, gas: int, models: Optional[Sequence[LibcModel]] = None,
                 hooks: Iterable[Hook] = (), record: bool = False):
        if gas <= 0:
            raise HashswapError("gas budget must be positive")
        self.image = image
        self.gas = gas
        self.models = model_table(list(models) if models is not None else None)
        self.hooks = list(hooks)
        self.record = record

        self.memory = Memory()
        self.regs = [0] * 16
        self.rip = 0
        self.cf = self.zf = self.sf = self.of = self.pf = False
        self.instruction_count = 0
        self.shadow_stack: List[Frame] = []
        self.root: Optional[Frame] = None
        self.heap: List[Allocation] = []
        self.heap_next = HEAP_BASE
        self.stdout = bytearray()
        self.stdin = b''
        self.stdin_pos = 0
        self.exit_status: Optional[int] = None
        self.halted = False
        self.trace = ExecutionTrace()
        self._stack_args = 0
        self._call_site = 0
        self._decoded: Dict[int, Instruction] = {}

        if record:
            self.memory.on_write = lambda vaddr, size: self.trace.writes.append((vaddr, size))
        for segment in image.segments:
            self.memory.map(segment.vaddr, segment.memsz)
            self.memory.write(segment.vaddr, image.raw[segment.offset:segment.offset + segment.filesz])
        self.memory.map(STACK_TOP - STACK_SIZE, STACK_SIZE)
        self.trace.writes.clear()

    # -- registers ---------------------------------------------------------

    def get(self, name: str) -> int:
        index, size, shift = _REGS[name]
        return (self.regs[index] >> shift) & MASKS[size]

    def set(self, name: str, value: int):
        index, size, shift = _REGS[name]
        if size == 8:
            self.regs[index] = value & MASK64
        elif size == 4:
            self.regs[index] = value & 0xffffffff
        else:
            mask = MASKS[size] << shift
            self.regs[index] = (self.regs[index] & ~mask) | ((value << shift) & mask)

    @property
    def rsp(self) -> int:
        return self.regs[RSP]

    def push(self, value: int):
        self.regs[RSP] = (self.regs[RSP] - 8) & MASK64
        self.memory.write_int(self.regs[RSP], 8, value)

    def pop(self) -> int:
        value = self.memory.read_int(self.regs[RSP], 8)
        self.regs[RSP] = (self.regs[RSP] + 8) & MASK64
        return value

    # -- helpers for libc models --------------------------------------------

    def arg(self, index: int) -> int:
        return self.vararg(index)[0]

    def vararg(self, index: int) -> Tuple[int, Source]:
        if index < len(ARG_REGS):
            return self.regs[_REGS[ARG_REGS[index]][0]], RegSource(ARG_REGS[index])
        slot = self._stack_args + 8 * (index - len(ARG_REGS))
        return self.memory.read_int(slot, 8), MemSource(slot, 8)

    def allocate(self, size: int) -> int:
        base = self.heap_next
        self.memory.map(base, max(size, 1))
        self.heap_next = (base + max(size, 1) + 15) // 16 * 16 + 16
        self.heap.append(Allocation(base, size, self._call_site))
        return base

    def release(self, base: int) -> Allocation:
        for allocation in self.heap:
            if allocation.live and allocation.base == base:
                allocation.live = False
                return allocation
        raise ExecutionError("free of a pointer that is not a live allocation", base)

    def read_stdin(self, size: int) -> bytes:
        data = self.stdin[self.stdin_pos:self.stdin_pos + size]
        self.stdin_pos += len(data)
        return data

    def exit(self, status: int):
        self.exit_status = status
        self.halted = True

    def frames(self) -> List[Frame]:
        return ([self.root] if self.root else []) + self.shadow_stack

    def live_allocations(self) -> List[Allocation]:
        return [a for a in self.heap if a.live]

    # -- operands --------------------------------------------------------------

    def address(self, mem: Mem, insn: Instruction) -> int:
        if mem.base == 'rip':
            return (insn.end + mem.disp) & MASK64
        value = mem.disp
        if mem.base:
            value += self.get(mem.base)
        if mem.index:
            value += self.get(mem.index) * mem.scale
        return value & MASK64

    def read_op(self, op, insn: Instruction, size: Optional[int] = None) -> int:
        if isinstance(op, Reg):
            return self.get(op.name)
        if isinstance(op, Imm):
            return op.value & MASKS[size or op.size]
        return self.memory.read_int(self.address(op, insn), op.size)

    def write_op(self, op, value: int, insn: Instruction):
        if isinstance(op, Reg):
            self.set(op.name, value)
        elif isinstance(op, Mem):
            self.memory.write_int(self.address(op, insn), op.size, value)
        else:
            raise UnsupportedInstruction(f"write to immediate in {insn}", insn.vaddr)

    # -- flags ---------------------------------------------------------------

    def _result_flags(self, result: int, size: int):
        self.zf = result == 0
        self.sf = bool(result >> (size * 8 - 1))
        self.pf = PARITY[result & 0xff]

    def _flags_add(self, a: int, b: int, full: int, size: int):
        result = full & MASKS[size]
        sign = size * 8 - 1
        self.cf = full > MASKS[size]
        self.of = (a >> sign) == (b >> sign) and (result >> sign) != (a >> sign)
        self._result_flags(result, size)

    def _flags_sub(self, a: int, b: int, full: int, size: int):
        result = full & MASKS[size]
        sign = size * 8 - 1
        self.cf = full < 0
        self.of = (a >> sign) != (b >> sign) and (result >> sign) != (a >> sign)
        self._result_flags(result, size)

    def _flags_logic(self, result: int, size: int):
        self.cf = self.of = False
        self._result_flags(result, size)

    def condition(self, cc: str) -> bool:
        code = CONDITION_CODES[cc]
        test = code >> 1
        if test == 0:
            value = self.of
        elif test == 1:
            value = self.cf
        elif test == 2:
            value = self.zf
        elif test == 3:
            value = self.cf or self.zf
        elif test == 4:
            value = self.sf
        elif test == 5:
            value = self.pf
        elif test == 6:
            value = self.sf != self.of
        else:
            value = self.zf or self.sf != self.of
        return value != bool(code & 1)

    # -- execution -----------------------------------------------------------------

    def fetch(self, vaddr: int) -> Instruction:
        insn = self._decoded.get(vaddr)
        if insn is not None:
            return insn
        if not self.memory.is_mapped(vaddr):
            raise MemoryFault("instruction fetch from unmapped memory", vaddr)
        code = b''
        for size in (15, PAGE - vaddr % PAGE):
            try:
                code = self.memory.read(vaddr, min(size, 15))
                break
            except MemoryFault:
                continue
        try:
            insn = decode(code, vaddr)
        except UndecodableInstruction:
            raise UnsupportedInstruction("undecodable instruction", vaddr)
        self._decoded[vaddr] = insn
        return insn

    def step(self):
        if self.instruction_count >= self.gas:
            raise GasExhausted(f"gas budget of {self.gas} instructions exhausted", self.rip)
        insn = self.fetch(self.rip)
        self.instruction_count += 1
        if self.record:
            self.trace.vaddrs.append(insn.vaddr)

        step = None
        if self.hooks:
            for hook in self.hooks:
                hook.before(self, insn)
            mem = insn.memory_operand()
            step = Step(insn, list(self.regs),
                        self.address(mem, insn) if mem is not None and insn.mnemonic != 'nop' else None)

        handler = _HANDLERS.get(insn.mnemonic)
        if handler is None:
            if insn.mnemonic.startswith('cmov'):
                handler = Machine._cmov
            elif insn.mnemonic.startswith('set'):
                handler = Machine._setcc
            elif insn.is_conditional:
                handler = Machine._jcc
            else:
                raise UnsupportedInstruction(f"no semantics for {insn.mnemonic}", insn.vaddr)
        next_rip = handler(self, insn, step)
        self.rip = insn.end if next_rip is None else next_rip

        if step is not None:
            for hook in self.hooks:
                hook.after(self, step)

    def run(self):
        while not self.halted:
            if self.rip == SENTINEL:
                self.halted = True
                break
            self.step()
        self.trace.stdout = bytes(self.stdout)
        self.trace.exit_status = self.exit_status
        self.trace.instruction_count = self.instruction_count
        self.trace.heap_allocations = list(self.heap)
        self.trace.shadow_depth = len(self.shadow_stack)
        return self.trace

    # -- control flow --------------------------------------------------------------

    def _target(self, insn: Instruction) -> int:
        op = insn.operands[0]
        if isinstance(op, Imm):
            return op.value & MASK64
        return self.read_op(op, insn)

    def _run_model(self, insn: Instruction, target: int, tail: bool, step: Optional[Step]) -> Optional[int]:
        name = self.image.imports.get(target)
        model = self.models.get(name)
        if model is None:
            raise ModelMissing(name, insn.vaddr)
        self._call_site = insn.vaddr
        self._stack_args = self.rsp + (8 if tail else 0)
        effect = model.behavior(self)
        if effect.ret is not None:
            self.regs[RAX] = effect.ret & MASK64
        self.trace.libc_calls.append((name, insn.vaddr))
        if step is not None:
            step.libc = LibcCall(name, insn.vaddr, effect)
        if self.halted:
            return None
        return self.pop() if tail else insn.end

    def _check_target(self, insn: Instruction, target: int):
        if self.image.segment_at(target) is None and not self.memory.is_mapped(target) \
                and target != SENTINEL:
            raise UnresolvedExternalCall(f"control transfer to {target:#x} outside the image", insn.vaddr)

    def _call(self, insn: Instruction, step):
        target = self._target(insn)
        if target in self.image.imports:
            return self._run_model(insn, target, False, step)
        self._check_target(insn, target)
        self.push(insn.end)
        self.shadow_stack.append(Frame(self.rsp, target, insn.end, insn.vaddr))
        return target

    def _jmp(self, insn: Instruction, step):
        target = self._target(insn)
        if target in self.image.imports:
            return self._run_model(insn, target, True, step)
        self._check_target(insn, target)
        return target

    def _ret(self, insn: Instruction, step):
        sp = self.rsp
        target = self.pop()
        if insn.operands:
            self.regs[RSP] = (self.regs[RSP] + insn.operands[0].value) & MASK64
        if self.shadow_stack:
            frame = self.shadow_stack[-1]
            if frame.entry_sp != sp or frame.return_address != target:
                raise ExecutionError(f"return to {target:#x} does not match the shadow stack "
                                     f"(expected {frame.return_address:#x})", insn.vaddr)
            self.shadow_stack.pop()
        elif target != SENTINEL:
            raise ExecutionError(f"return to {target:#x} with an empty shadow stack", insn.vaddr)
        return target

    def _jcc(self, insn: Instruction, step):
        if self.condition(insn.mnemonic[1:]):
            return insn.operands[0].value & MASK64
        return None

    # -- data movement -------------------------------------------------------------

    def _mov(self, insn: Instruction, step):
        dst, src = insn.operands
        self.write_op(dst, self.read_op(src, insn, dst.size), insn)

    def _movzx(self, insn: Instruction, step):
        dst, src = insn.operands
        self.write_op(dst, self.read_op(src, insn), insn)

    def _movsx(self, insn: Instruction, step):
        dst, src = insn.operands
        value = self.read_op(src, insn)
        bits = src.size * 8
        if value >> (bits - 1):
            value -= 1 << bits
        self.write_op(dst, value & MASKS[dst.size], insn)

    def _lea(self, insn: Instruction, step):
        dst, src = insn.operands
        self.write_op(dst, self.address(src, insn) & MASKS[dst.size], insn)

    def _push(self, insn: Instruction, step):
        value = self.read_op(insn.operands[0], insn, 8)
        self.push(value)

    def _pop(self, insn: Instruction, step):
        self.write_op(insn.operands[0], self.pop(), insn)

    def _leave(self, insn: Instruction, step):
        self.regs[RSP] = self.regs[RBP]
        self.regs[RBP] = self.pop()

    def _xchg(self, insn: Instruction, step):
        a, b = insn.operands
        va, vb = self.read_op(a, insn), self.read_op(b, insn)
        self.write_op(a, vb, insn)
        self.write_op(b, va, insn)

    def _cmov(self, insn: Instruction, step):
        dst, src = insn.operands
        value = self.read_op(src, insn) if self.condition(insn.mnemonic[4:]) else self.read_op(dst, insn)
        self.write_op(dst, value, insn)

    def _setcc(self, insn: Instruction, step):
        self.write_op(insn.operands[0], int(self.condition(insn.mnemonic[3:])), insn)

    def _bswap(self, insn: Instruction, step):
        op = insn.operands[0]
        value = self.read_op(op, insn)
        self.write_op(op, int.from_bytes(value.to_bytes(op.size, 'little'), 'big'), insn)

    def _extend(self, insn: Instruction, step):
        m = insn.mnemonic
        if m == 'cdqe':
            value = self.regs[RAX] & 0xffffffff
            self.regs[RAX] = (value - (1 << 32) if value >> 31 else value) & MASK64
        elif m == 'cwde':
            value = self.regs[RAX] & 0xffff
            self.regs[RAX] = (value - (1 << 16) if value >> 15 else value) & 0xffffffff
        elif m == 'cdq':
            self.regs[RDX] = 0xffffffff if self.regs[RAX] >> 31 & 1 else 0
        else:
            self.regs[RDX] = MASK64 if self.regs[RAX] >> 63 else 0

    def _string(self, insn: Instruction, step):
        opcode, size = STRING_OPS[insn.mnemonic]
        count = self.regs[1] if insn.prefix in ('rep', 'repe', 'repz') else 1
        rdi, rsi = self.regs[7], self.regs[6]
        for _ in range(count):
            if insn.mnemonic.startswith('stos'):
                self.memory.write_int(rdi, size, self.regs[RAX])
            else:
                self.memory.write(rdi, self.memory.read(rsi, size))
                rsi = (rsi + size) & MASK64
            rdi = (rdi + size) & MASK64
        self.regs[7], self.regs[6] = rdi, rsi
        if insn.prefix:
            self.regs[1] = 0

    def _nop(self, insn: Instruction, step):
        return None

    def _trap(self, insn: Instruction, step):
        raise ExecutionError(f"{insn.mnemonic} executed", insn.vaddr)

    # -- arithmetic ----------------------------------------------------------------

    def _alu(self, insn: Instruction, step):
        dst, src = insn.operands
        size = dst.size
        mask = MASKS[size]
        a = self.read_op(dst, insn)
        b = self.read_op(src, insn, size)
        m = insn.mnemonic
        if m == 'add' or m == 'adc':
            full = a + b + (int(self.cf) if m == 'adc' else 0)
            self._flags_add(a, b, full, size)
        elif m in ('sub', 'cmp', 'sbb'):
            full = a - b - (int(self.cf) if m == 'sbb' else 0)
            self._flags_sub(a, b, full, size)
        elif m == 'and':
            full = a & b
            self._flags_logic(full, size)
        elif m == 'or':
            full = a | b
            self._flags_logic(full, size)
        elif m == 'xor':
            full = a ^ b
            self._flags_logic(full, size)
        else:
            full = a & b
            self._flags_logic(full, size)
            return None
        if m != 'cmp':
            self.write_op(dst, full & mask, insn)
        return None

    def _incdec(self, insn: Instruction, step):
        op = insn.operands[0]
        size = op.size
        a = self.read_op(op, insn)
        cf = self.cf
        if insn.mnemonic == 'inc':
            self._flags_add(a, 1, a + 1, size)
            result = a + 1
        else:
            self._flags_sub(a, 1, a - 1, size)
            result = a - 1
        self.cf = cf
        self.write_op(op, result & MASKS[size], insn)

    def _unary(self, insn: Instruction, step):
        op = insn.operands[0]
        size = op.size
        a = self.read_op(op, insn)
        if insn.mnemonic == 'not':
            self.write_op(op, ~a & MASKS[size], insn)
        else:
            self._flags_sub(0, a, -a, size)
            self.cf = a != 0
            self.write_op(op, -a & MASKS[size], insn)

    def _shift(self, insn: Instruction, step):
        dst, count_op = insn.operands
        size = dst.size
        bits = size * 8
        mask = MASKS[size]
        count = self.read_op(count_op, insn, 1) & (0x3f if size == 8 else 0x1f)
        if count == 0:
            return None
        a = self.read_op(dst, insn)
        m = insn.mnemonic
        if m in ('shl', 'sal'):
            result = (a << count) & mask
            self.cf = bool((a >> (bits - count)) & 1) if count <= bits else False
            self.of = bool(result >> (bits - 1)) != self.cf
            self._result_flags(result, size)
        elif m == 'shr':
            result = a >> count
            self.cf = bool((a >> (count - 1)) & 1)
            self.of = bool(a >> (bits - 1))
            self._result_flags(result, size)
        elif m == 'sar':
            signed = a - (1 << bits) if a >> (bits - 1) else a
            result = (signed >> count) & mask
            self.cf = bool((signed >> (count - 1)) & 1)
            self.of = False
            self._result_flags(result, size)
        elif m == 'rol':
            count %= bits
            result = ((a << count) | (a >> (bits - count))) & mask if count else a
            self.cf = bool(result & 1)
        elif m == 'ror':
            count %= bits
            result = ((a >> count) | (a << (bits - count))) & mask if count else a
            self.cf = bool(result >> (bits - 1))
        else:
            raise UnsupportedInstruction(f"no semantics for {m}", insn.vaddr)
        self.write_op(dst, result, insn)
        return None

    def _imul(self, insn: Instruction, step):
        ops = insn.operands
        if len(ops) == 1:
            return self._widening(insn, signed=True)
        if len(ops) == 2:
            dst, a_op, b_op = ops[0], ops[0], ops[1]
        else:
            dst, a_op, b_op = ops
        size = dst.size
        bits = size * 8

        def signed(value: int) -> int:
            return value - (1 << bits) if value >> (bits - 1) else value

        product = signed(self.read_op(a_op, insn, size)) * signed(self.read_op(b_op, insn, size))
        result = product & MASKS[size]
        self.cf = self.of = signed(result) != product
        self._result_flags(result, size)
        self.write_op(dst, result, insn)

    def _mul(self, insn: Instruction, step):
        return self._widening(insn, signed=False)

    def _widening(self, insn: Instruction, signed: bool):
        op = insn.operands[0]
        size = op.size
        bits = size * 8
        if size not in (4, 8):
            raise UnsupportedInstruction(f"{size * 8}-bit {insn.mnemonic}", insn.vaddr)
        a = self.regs[RAX] & MASKS[size]
        b = self.read_op(op, insn)
        if signed:
            a = a - (1 << bits) if a >> (bits - 1) else a
            b = b - (1 << bits) if b >> (bits - 1) else b
        product = a * b
        low, high = product & MASKS[size], (product >> bits) & MASKS[size]
        self.set('rax' if size == 8 else 'eax', low)
        self.set('rdx' if size == 8 else 'edx', high)
        if signed:
            self.cf = self.of = (low - (1 << bits) if low >> (bits - 1) else low) != product
        else:
            self.cf = self.of = high != 0

    def _div(self, insn: Instruction, step):
        op = insn.operands[0]
        size = op.size
        bits = size * 8
        if size not in (4, 8):
            raise UnsupportedInstruction(f"{size * 8}-bit {insn.mnemonic}", insn.vaddr)
        divisor = self.read_op(op, insn)
        dividend = ((self.regs[RDX] & MASKS[size]) << bits) | (self.regs[RAX] & MASKS[size])
        if insn.mnemonic == 'idiv':
            divisor = divisor - (1 << bits) if divisor >> (bits - 1) else divisor
            dividend = dividend - (1 << (2 * bits)) if dividend >> (2 * bits - 1) else dividend
        if divisor == 0:
            raise ExecutionError("division by zero", insn.vaddr)
        quotient = abs(dividend) // abs(divisor)
        if (dividend < 0) != (divisor < 0):
            quotient = -quotient
        remainder = dividend - quotient * divisor
        self.set('rax' if size == 8 else 'eax', quotient & MASKS[size])
        self.set('rdx' if size == 8 else 'edx', remainder & MASKS[size])


_HANDLERS = {
    'mov': Machine._mov, 'movabs': Machine._mov, 'movzx': Machine._movzx,
    'movsx': Machine._movsx, 'movsxd': Machine._movsx, 'lea': Machine._lea,
    'push': Machine._push, 'pop': Machine._pop, 'leave': Machine._leave, 'xchg': Machine._xchg,
    'bswap': Machine._bswap, 'cdqe': Machine._extend, 'cwde': Machine._extend,
    'cdq': Machine._extend, 'cqo': Machine._extend,
    'add': Machine._alu, 'adc': Machine._alu, 'sub': Machine._alu, 'sbb': Machine._alu,
    'and': Machine._alu, 'or': Machine._alu, 'xor': Machine._alu, 'cmp': Machine._alu,
    'test': Machine._alu, 'inc': Machine._incdec, 'dec': Machine._incdec,
    'not': Machine._unary, 'neg': Machine._unary,
    'shl': Machine._shift, 'sal': Machine._shift, 'shr': Machine._shift, 'sar': Machine._shift,
    'rol': Machine._shift, 'ror': Machine._shift,
    'imul': Machine._imul, 'mul': Machine._mul, 'div': Machine._div, 'idiv': Machine._div,
    'call': Machine._call, 'jmp': Machine._jmp, 'ret': Machine._ret,
    'nop': Machine._nop, 'int3': Machine._trap, 'hlt': Machine._trap,
}
_HANDLERS.update({name: Machine._string for name in STRING_OPS})


# -- entry points -------------------------------------------------------------------

def _place(machine: Machine, base: int, data: bytes, room: int) -> int:
    """Map ``room`` bytes ending on a page boundary above ``base`` and put
    ``data`` at their start; reads past the end fault."""
    pages = (room + PAGE - 1) // PAGE
    machine.memory.map(base, pages * PAGE)
    start = base + pages * PAGE - room
    machine.memory.write(start, data)
    return start


def run_routine(image: BinaryImage, entry: int, layout: CallLayout, data: bytes, gas: int,
                models: Optional[Sequence[LibcModel]] = None) -> bytes:
    """Call ``entry`` with synthetic input/output buffers bound per ``layout``
    and return the 64-byte output buffer after a clean return."""
    machine = Machine(image, gas, models)
    input_base = _place(machine, INPUT_BASE, data + b'\0', len(data) + 1)
    output_base = _place(machine, OUTPUT_BASE, bytes(OUTPUT_SIZE), OUTPUT_SIZE)
    values = {'I': input_base, 'L': len(data), 'O': output_base}
    for index, register in enumerate(ARG_REGS[:3]):
        role = layout.order[index] if index < layout.arity else None
        machine.set(register, values[role] if role else 0)
    machine.regs[RSP] = STACK_TOP - 0x1000
    machine.push(SENTINEL)
    machine.rip = entry
    machine.run()
    return machine.memory.read(output_base, OUTPUT_SIZE)


def parse_script(text: str) -> Tuple[List[bytes], bytes]:
    """Test-input script: ``argv <word>`` and ``stdin <hex>`` lines."""
    argv: List[bytes] = []
    stdin = bytearray()
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        directive, _, rest = line.lstrip().partition(' ')
        if directive == 'argv':
            argv.append(rest.encode())
        elif directive == 'stdin':
            try:
                stdin.extend(bytes.fromhex(rest.replace('\\x', '').strip()))
            except ValueError:
                raise HashswapError(f"script line {number}: stdin payload is not hex")
        else:
            raise HashswapError(f"script line {number}: unknown directive {directive!r}")
    return argv, bytes(stdin)


def load_script(path: str) -> Tuple[List[bytes], bytes]:
    try:
        with open(path) as f:
            return parse_script(f.read())
    except OSError as e:
        raise HashswapError(f"cannot read script {path}: {e}")


def prepare_program(image: BinaryImage, argv: Sequence[bytes], stdin: bytes = b'', gas: int = 50_000_000,
                    hooks: Iterable[Hook] = (), models: Optional[Sequence[LibcModel]] = None,
                    record: bool = False) -> Machine:
    """Machine positioned at the entry point with the SysV process stack
    (argc, argv pointers, NULL, empty envp and auxv)."""
    machine = Machine(image, gas, models, hooks, record)
    machine.stdin = stdin
    words = [PROGRAM_NAME] + list(argv)
    cursor = STACK_TOP - 16
    pointers = []
    for word in reversed(words):
        cursor -= len(word) + 1
        machine.memory.write(cursor, word + b'\0')
        pointers.append(cursor)
    pointers.reverse()
    cursor &= ~0xf
    vector = [len(words)] + pointers + [0, 0, 0, 0]
    if len(vector) % 2:
        vector.append(0)
    cursor -= 8 * len(vector)
    for i, value in enumerate(vector):
        machine.memory.write_int(cursor + 8 * i, 8, value)
    machine.regs[RSP] = cursor
    machine.root = Frame(cursor, image.entry_point, SENTINEL)
    machine.rip = image.entry_point
    if record:
        machine.trace.writes.clear()
    return machine


def run_program(image: BinaryImage, argv: Sequence[bytes], stdin: bytes = b'', gas: int = 50_000_000,
                hooks: Iterable[Hook] = (), models: Optional[Sequence[LibcModel]] = None,
                record: bool = False) -> ExecutionTrace:
    machine = prepare_program(image, argv, stdin, gas, hooks, models, record)
    trace = machine.run()
    if trace.exit_status is None:
        trace.exit_status = machine.regs[RAX] & 0xff
    logger.debug(f"{image.path or '<image>'}: {trace.instruction_count} instructions, "
                 f"exit status {trace.exit_status}")
    return trace
