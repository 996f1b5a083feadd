"""Reference interpreter: pure Python, hookable, bit-identical to _stepper.

This engine is the semantic authority.  The compiled stepper must agree with
it on every observable (registers, memory, cost, functional events, the
observation trace); the parity tests hold both to that.  It is also the only
engine that supports Python callbacks, so the taint engine and the analysis
probes build on it.

Execution model reminders: memory reads of never-written bytes return zero;
call/ret use a control stack outside simulated memory; `store` is the only
instruction that writes memory, so the ciphertext observer keys off stores
alone.  A store that rewrites identical bytes emits no observation record --
that silence is load-bearing (it is what a collision attacker reads).
"""

from __future__ import annotations

import numpy as np

from .. import isa
from ..encode import OP_INDEX, EncodedProgram
from ..nonces import random_buffer_bytes
from ..runtime import FunctionalTrace, MachineError, RunConfig, RunResult
from ..xex import ObservationTrace

MASK = isa.MASK64
SIGN = 1 << 63

OP_LOAD = OP_INDEX["load"]
OP_STORE = OP_INDEX["store"]
OP_MOV = OP_INDEX["mov"]
OP_XOR = OP_INDEX["xor"]
OP_AND = OP_INDEX["and"]
OP_OR = OP_INDEX["or"]
OP_ADD = OP_INDEX["add"]
OP_SUB = OP_INDEX["sub"]
OP_SHL = OP_INDEX["shl"]
OP_SHR = OP_INDEX["shr"]
OP_MUL = OP_INDEX["mul"]
OP_CMP = OP_INDEX["cmp"]
OP_TEST = OP_INDEX["test"]
OP_SELECT = OP_INDEX["select"]
OP_JMP = OP_INDEX["jmp"]
OP_BR = OP_INDEX["br_cond"]
OP_CALL = OP_INDEX["call"]
OP_RET = OP_INDEX["ret"]
OP_SAVEF = OP_INDEX["saveflags"]
OP_RESTF = OP_INDEX["restoreflags"]
OP_RDRAND = OP_INDEX["rdrand"]
OP_PRF = OP_INDEX["prf_enc"]
OP_ALLOC = OP_INDEX["heap_alloc"]
OP_TAINT = OP_INDEX["taint_label"]
OP_HALT = OP_INDEX["halt"]


def _mix64(x: int) -> int:
    x &= MASK
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & MASK
    return x ^ (x >> 31)


def _cond_ok(cc: int, flags: int) -> bool:
    # ordinal order: eq ne ult ule ugt uge slt sle sgt sge
    zf = flags & 1
    sf = (flags >> 1) & 1
    cf = (flags >> 2) & 1
    of = (flags >> 3) & 1
    if cc == 0:
        return zf == 1
    if cc == 1:
        return zf == 0
    if cc == 2:
        return cf == 1
    if cc == 3:
        return cf == 1 or zf == 1
    if cc == 4:
        return cf == 0 and zf == 0
    if cc == 5:
        return cf == 0
    if cc == 6:
        return sf != of
    if cc == 7:
        return zf == 1 or sf != of
    if cc == 8:
        return zf == 0 and sf == of
    if cc == 9:
        return sf == of
    raise MachineError("bad-cond", str(cc))


class Engine:
    """One run of one encoded program."""

    name = "python"

    def __init__(self, enc: EncodedProgram, config: RunConfig):
        self.enc = enc
        self.config = config
        self.ops: list[int] = enc.ops.tolist()
        self.fields: list[tuple[int, ...]] = [tuple(r) for r in enc.fields.tolist()]
        self.regs: list[int] = [0] * isa.NUM_REGS
        self.flags = 0
        self.sp = 0
        self.steps = 0
        self.cost = 0
        self.heap_ptr = enc.heap_start
        self.stack_mem = bytearray(isa.STACK_BASE - isa.STACK_LIMIT)
        self.heap_mem = bytearray(isa.HEAP_SIZE)
        self.data_mem = bytearray(isa.DATA_SIZE)
        self.call_stack: list[tuple[int, int]] = []
        self.obs = ObservationTrace()
        self.events: list[tuple[int, int, int]] = []
        self.halt_code = 0
        model = config.seeds.model()
        self._rk = model.round_keys
        self._tk_lo = model.tweak_key_lo
        self._tk_hi = model.tweak_key_hi
        self._rd_state = (config.seeds.rdrand + isa.RAND_BUF_ENTRIES * isa.GOLDEN) & MASK
        # hooks (python engine only)
        self.step_cb = None          # step_cb(self, i) fires BEFORE instruction i runs
        self.store_cb = None         # called as store_cb(step, addr, width, value)

    # ------------------------------------------------------------------
    # memory helpers
    # ------------------------------------------------------------------

    def _mem_at(self, addr: int, width: int):
        if isa.STACK_LIMIT <= addr and addr + width <= isa.STACK_BASE:
            return self.stack_mem, addr - isa.STACK_LIMIT
        if isa.HEAP_BASE <= addr and addr + width <= isa.HEAP_BASE + isa.HEAP_SIZE:
            return self.heap_mem, addr - isa.HEAP_BASE
        if isa.DATA_BASE <= addr and addr + width <= isa.DATA_BASE + isa.DATA_SIZE:
            return self.data_mem, addr - isa.DATA_BASE
        raise MachineError("oob", f"access of {width} bytes at 0x{addr:x}")

    def read_mem(self, addr: int, width: int = 8) -> int:
        mem, off = self._mem_at(addr, width)
        return int.from_bytes(mem[off:off + width], "little")

    def write_mem_raw(self, addr: int, data: bytes) -> None:
        mem, off = self._mem_at(addr, len(data))
        mem[off:off + len(data)] = data

    # ------------------------------------------------------------------
    # observation
    # ------------------------------------------------------------------

    def _block_ct(self, mem: bytearray, block_off: int, block_addr: int) -> tuple[int, int]:
        lo = int.from_bytes(mem[block_off:block_off + 8], "little")
        hi = int.from_bytes(mem[block_off + 8:block_off + 16], "little")
        t_lo = _mix64(self._tk_lo ^ block_addr)
        t_hi = _mix64(self._tk_hi ^ (block_addr * isa.GOLDEN & MASK))
        lo ^= t_lo
        hi ^= t_hi
        for rk in self._rk:
            lo, hi = hi, lo ^ _mix64((hi + rk) & MASK)
        return lo ^ t_lo, hi ^ t_hi

    def _snapshot(self) -> None:
        """Step-0 records for every block holding a nonzero byte."""
        for mem, base in ((self.stack_mem, isa.STACK_LIMIT),
                          (self.heap_mem, isa.HEAP_BASE),
                          (self.data_mem, isa.DATA_BASE)):
            arr = np.frombuffer(mem, dtype=np.uint8)
            nz = np.nonzero(arr.reshape(-1, isa.BLOCK).any(axis=1))[0]
            for bi in nz.tolist():
                off = bi * isa.BLOCK
                lo, hi = self._block_ct(mem, off, base + off)
                self.obs.append(0, base + off, lo, hi)

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------

    def setup(self, inputs: dict | None = None) -> None:
        rb = random_buffer_bytes(self.config.seeds.rdrand)
        self.data_mem[isa.RAND_BUF_OFF:isa.RAND_BUF_OFF + len(rb)] = rb
        for addr, data in self.enc.heap_images:
            self.write_mem_raw(addr, data)
        if inputs:
            for rid, val in inputs.get("regs", {}).items():
                rid = isa.parse_reg(rid) if isinstance(rid, str) else rid
                self.regs[rid] = val & MASK
            for addr, data in inputs.get("mem", {}).items():
                region = isa.region_of(addr)
                if region is None or isa.region_of(addr + max(len(data) - 1, 0)) != region:
                    raise MachineError("bad-input", f"input at 0x{addr:x} outside one region")
                self.write_mem_raw(addr, bytes(data))
        self.sp = isa.STACK_BASE - self.enc.entry_frame
        if self.sp < isa.STACK_LIMIT:
            raise MachineError("stack-overflow", "entry frame too large")
        if self.config.observe:
            self._snapshot()

    # ------------------------------------------------------------------
    # main loop
    # ------------------------------------------------------------------

    def run(self, inputs: dict | None = None) -> RunResult:
        self.setup(inputs)
        ops = self.ops
        flds = self.fields
        regs = self.regs
        cost_tab = self._cost_table()
        limit = self.config.step_limit
        observe = self.config.observe
        step_cb = self.step_cb
        i = self.enc.entry_index
        ret_val = 0
        while True:
            if self.steps >= limit:
                raise MachineError("step-limit", f"exceeded {limit} steps")
            if step_cb is not None:
                step_cb(self, i)
            op = ops[i]
            f = flds[i]
            self.steps += 1
            self.cost += cost_tab[op]
            prev_i = i
            i += 1
            if op == OP_MOV:
                regs[f[0]] = (f[2] & MASK) if f[1] else regs[f[2]]
            elif op == OP_LOAD:
                b = f[1]
                base = regs[b] if b >= 0 else (self.sp if b == -1 else 0)
                addr = (base + f[2]) & MASK
                mem, off = self._mem_at(addr, f[3])
                regs[f[0]] = int.from_bytes(mem[off:off + f[3]], "little")
            elif op == OP_STORE:
                b = f[0]
                base = regs[b] if b >= 0 else (self.sp if b == -1 else 0)
                addr = (base + f[1]) & MASK
                w = f[2]
                val = (f[4] & MASK) if f[3] else regs[f[4]]
                self._do_store(addr, w, val, observe)
            elif OP_XOR <= op <= OP_MUL:
                a = regs[f[0]]
                b = (f[2] & MASK) if f[1] else regs[f[2]]
                regs[f[0]] = self._alu(op, a, b)
            elif op == OP_CMP:
                a = regs[f[0]]
                b = (f[2] & MASK) if f[1] else regs[f[2]]
                r = (a - b) & MASK
                self.flags = ((1 if r == 0 else 0)
                              | (2 if r & SIGN else 0)
                              | (4 if a < b else 0)
                              | (8 if ((a ^ b) & (a ^ r)) & SIGN else 0))
            elif op == OP_TEST:
                a = regs[f[0]]
                b = (f[2] & MASK) if f[1] else regs[f[2]]
                r = a & b
                self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0)
            elif op == OP_BR:
                if _cond_ok(f[0], self.flags):
                    i = f[1]
            elif op == OP_JMP:
                i = f[0]
            elif op == OP_SELECT:
                if _cond_ok(f[3], self.flags):
                    regs[f[0]] = (f[2] & MASK) if f[1] else regs[f[2]]
            elif op == OP_CALL:
                self.call_stack.append((i, self.sp))
                self.sp -= f[1]
                if self.sp < isa.STACK_LIMIT:
                    raise MachineError("stack-overflow", f"call at site {self.enc.sites[prev_i]}")
                i = f[0]
            elif op == OP_RET:
                if not self.call_stack:
                    ret_val = regs[0]
                    break
                i, self.sp = self.call_stack.pop()
            elif op == OP_SAVEF:
                regs[isa.FLAGS_HOME] = self.flags
            elif op == OP_RESTF:
                self.flags = regs[isa.FLAGS_HOME] & 15
            elif op == OP_RDRAND:
                self._rd_state = (self._rd_state + isa.GOLDEN) & MASK
                regs[f[0]] = _mix64(self._rd_state)
            elif op == OP_PRF:
                lane = f[0]
                pair = isa.REG_V_BASE + ((lane - isa.REG_V_BASE) & ~1)
                x = regs[pair]
                y = regs[pair + 1]
                kx = regs[isa.AES_STATE_LANES[2]]
                ky = regs[isa.AES_STATE_LANES[3]]
                x, y = y, x ^ _mix64((y + kx) & MASK)
                x, y = y, x ^ _mix64((y + ky) & MASK)
                regs[pair] = x
                regs[pair + 1] = y
            elif op == OP_ALLOC:
                size = (f[2] & MASK) if f[1] else regs[f[2]]
                size = (size + 7) & ~7
                if self.heap_ptr + size > isa.HEAP_BASE + isa.HEAP_SIZE:
                    raise MachineError("heap-exhausted", f"alloc of {size}")
                regs[f[0]] = self.heap_ptr
                self.heap_ptr += size
            elif op == OP_TAINT:
                pass  # taint engine gives this meaning
            elif op == OP_HALT:
                self.halt_code = f[0]
                if self.halt_code:
                    raise MachineError("halt", f"code {self.halt_code}")
                ret_val = regs[0]
                break
            else:  # pragma: no cover
                raise MachineError("bad-op", str(op))
        return RunResult(
            functional=FunctionalTrace(tuple(self.events), ret_val),
            obs=self.obs,
            cost=self.cost,
            steps=self.steps,
            regs=tuple(regs),
            flags=self.flags,
            halt_code=self.halt_code,
            engine=self.name,
            memory={"stack": self.stack_mem, "heap": self.heap_mem, "data": self.data_mem},
        )

    def _do_store(self, addr: int, w: int, val: int, observe: bool) -> None:
        mem, off = self._mem_at(addr, w)
        new = val.to_bytes(8, "little")[:w]
        changed = mem[off:off + w] != new
        if changed:
            mem[off:off + w] = new
        if isa.OUT_BASE <= addr < isa.OUT_BASE + isa.OUT_SIZE:
            self.events.append((addr, val & ((1 << (8 * w)) - 1), w))
        if self.store_cb is not None:
            self.store_cb(self.steps, addr, w, val)
        if changed and observe:
            first = addr & ~15
            last = (addr + w - 1) & ~15
            region_base = addr - off
            boff = first - region_base
            lo, hi = self._block_ct(mem, boff, first)
            self.obs.append(self.steps, first, lo, hi)
            if last != first:
                lo, hi = self._block_ct(mem, boff + 16, last)
                self.obs.append(self.steps, last, lo, hi)

    def _alu(self, op: int, a: int, b: int) -> int:
        if op == OP_XOR:
            r = a ^ b
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0)
        elif op == OP_AND:
            r = a & b
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0)
        elif op == OP_OR:
            r = a | b
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0)
        elif op == OP_ADD:
            full = a + b
            r = full & MASK
            self.flags = ((1 if r == 0 else 0)
                          | (2 if r & SIGN else 0)
                          | (4 if full > MASK else 0)
                          | (8 if (~(a ^ b) & (a ^ r)) & SIGN else 0))
        elif op == OP_SUB:
            r = (a - b) & MASK
            self.flags = ((1 if r == 0 else 0)
                          | (2 if r & SIGN else 0)
                          | (4 if a < b else 0)
                          | (8 if ((a ^ b) & (a ^ r)) & SIGN else 0))
        elif op == OP_SHL:
            amt = b & 63
            if amt == 0:
                return a
            r = (a << amt) & MASK
            cf = (a >> (64 - amt)) & 1
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0) | (4 if cf else 0)
        elif op == OP_SHR:
            amt = b & 63
            if amt == 0:
                return a
            r = a >> amt
            cf = (a >> (amt - 1)) & 1
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0) | (4 if cf else 0)
        elif op == OP_MUL:
            full = a * b
            r = full & MASK
            over = 12 if full > MASK else 0
            self.flags = (1 if r == 0 else 0) | (2 if r & SIGN else 0) | over
        else:  # pragma: no cover
            raise MachineError("bad-op", str(op))
        return r

    def _cost_table(self) -> list[int]:
        c = self.config.cost
        tab = [c.other] * len(OP_INDEX)
        tab[OP_LOAD] = c.mem
        tab[OP_STORE] = c.mem
        tab[OP_RDRAND] = c.rdrand
        tab[OP_PRF] = c.prf
        return tab


def run_encoded(enc: EncodedProgram, config: RunConfig, inputs: dict | None = None,
                step_cb=None, store_cb=None) -> RunResult:
    eng = Engine(enc, config)
    eng.step_cb = step_cb
    eng.store_cb = store_cb
    return eng.run(inputs)
