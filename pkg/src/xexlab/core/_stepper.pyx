# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of engine_py.  Same encoding, same observables, no hooks.

Any semantic change lands in engine_py first; the parity tests then force it
here.  Keep the two dispatch loops side by side when editing."""

from libc.string cimport memcmp, memcpy

from .. import isa as _isa
from ..encode import OP_INDEX
from ..nonces import random_buffer_bytes
from ..runtime import FunctionalTrace, MachineError, RunResult
from ..xex import ObservationTrace

cdef unsigned long long MASK = 0xFFFFFFFFFFFFFFFF
cdef unsigned long long SIGN = 1ULL << 63
cdef unsigned long long GOLDEN = 0x9E3779B97F4A7C15ULL

cdef unsigned long long STACK_LIMIT = _isa.STACK_LIMIT
cdef unsigned long long STACK_BASE = _isa.STACK_BASE
cdef unsigned long long HEAP_BASE = _isa.HEAP_BASE
cdef unsigned long long HEAP_END = _isa.HEAP_BASE + _isa.HEAP_SIZE
cdef unsigned long long DATA_BASE = _isa.DATA_BASE
cdef unsigned long long DATA_END = _isa.DATA_BASE + _isa.DATA_SIZE
cdef unsigned long long OUT_BASE = _isa.OUT_BASE
cdef unsigned long long OUT_END = _isa.OUT_BASE + _isa.OUT_SIZE
cdef int NUM_REGS = _isa.NUM_REGS
cdef int FLAGS_HOME = _isa.FLAGS_HOME
cdef int V_BASE = _isa.REG_V_BASE
cdef int PRF_KX = _isa.AES_STATE_LANES[2]
cdef int PRF_KY = _isa.AES_STATE_LANES[3]

cdef int OP_LOAD = OP_INDEX["load"]
cdef int OP_STORE = OP_INDEX["store"]
cdef int OP_MOV = OP_INDEX["mov"]
cdef int OP_XOR = OP_INDEX["xor"]
cdef int OP_AND = OP_INDEX["and"]
cdef int OP_OR = OP_INDEX["or"]
cdef int OP_ADD = OP_INDEX["add"]
cdef int OP_SUB = OP_INDEX["sub"]
cdef int OP_SHL = OP_INDEX["shl"]
cdef int OP_SHR = OP_INDEX["shr"]
cdef int OP_MUL = OP_INDEX["mul"]
cdef int OP_CMP = OP_INDEX["cmp"]
cdef int OP_TEST = OP_INDEX["test"]
cdef int OP_SELECT = OP_INDEX["select"]
cdef int OP_JMP = OP_INDEX["jmp"]
cdef int OP_BR = OP_INDEX["br_cond"]
cdef int OP_CALL = OP_INDEX["call"]
cdef int OP_RET = OP_INDEX["ret"]
cdef int OP_SAVEF = OP_INDEX["saveflags"]
cdef int OP_RESTF = OP_INDEX["restoreflags"]
cdef int OP_RDRAND = OP_INDEX["rdrand"]
cdef int OP_PRF = OP_INDEX["prf_enc"]
cdef int OP_ALLOC = OP_INDEX["heap_alloc"]
cdef int OP_TAINT = OP_INDEX["taint_label"]
cdef int OP_HALT = OP_INDEX["halt"]
cdef int N_OPS = len(OP_INDEX)


cdef inline unsigned long long mix64(unsigned long long x) nogil:
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL
    return x ^ (x >> 31)


cdef inline bint cond_ok(int cc, int flags) nogil:
    cdef int zf = flags & 1
    cdef int sf = (flags >> 1) & 1
    cdef int cf = (flags >> 2) & 1
    cdef int of = (flags >> 3) & 1
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
    return sf == of


cdef inline unsigned long long read_u64(const unsigned char *p) nogil:
    cdef unsigned long long v
    memcpy(&v, p, 8)
    return v


def run_encoded(enc, config, inputs=None):
    cdef short[::1] ops = enc.ops
    cdef long long[:, ::1] flds = enc.fields
    cdef long long[::1] sites = enc.sites

    stack_ba = bytearray(STACK_BASE - STACK_LIMIT)
    heap_ba = bytearray(HEAP_END - HEAP_BASE)
    data_ba = bytearray(DATA_END - DATA_BASE)
    cdef unsigned char[::1] stack_v = stack_ba
    cdef unsigned char[::1] heap_v = heap_ba
    cdef unsigned char[::1] data_v = data_ba
    cdef unsigned char *mems[3]
    mems[0] = &stack_v[0]
    mems[1] = &heap_v[0]
    mems[2] = &data_v[0]

    cdef unsigned long long regs[64]
    cdef int r
    for r in range(64):
        regs[r] = 0

    seeds = config.seeds
    model = seeds.model()
    cdef unsigned long long rk[8]
    cdef int n_rk = len(model.round_keys)
    for r in range(n_rk):
        rk[r] = model.round_keys[r]
    cdef unsigned long long tk_lo = model.tweak_key_lo
    cdef unsigned long long tk_hi = model.tweak_key_hi
    cdef unsigned long long rd_state = (<unsigned long long> seeds.rdrand
                                        + <unsigned long long> _isa.RAND_BUF_ENTRIES * GOLDEN)

    cdef long long cost_tab[64]
    cost = config.cost
    for r in range(N_OPS):
        cost_tab[r] = cost.other
    cost_tab[OP_LOAD] = cost.mem
    cost_tab[OP_STORE] = cost.mem
    cost_tab[OP_RDRAND] = cost.rdrand
    cost_tab[OP_PRF] = cost.prf

    # ---- setup (cold path, mirrors engine_py.Engine.setup) ----
    rb = random_buffer_bytes(seeds.rdrand)
    data_ba[_isa.RAND_BUF_OFF:_isa.RAND_BUF_OFF + len(rb)] = rb
    for addr_py, data in enc.heap_images:
        _write_raw(mems, addr_py, bytes(data))
    if inputs:
        for rid, v_py in inputs.get("regs", {}).items():
            rid = _isa.parse_reg(rid) if isinstance(rid, str) else rid
            regs[<int> rid] = <unsigned long long> (v_py & 0xFFFFFFFFFFFFFFFF)
        for addr_py, data in inputs.get("mem", {}).items():
            region = _isa.region_of(addr_py)
            if region is None or _isa.region_of(addr_py + max(len(data) - 1, 0)) != region:
                raise MachineError("bad-input", f"input at 0x{addr_py:x} outside one region")
            _write_raw(mems, addr_py, bytes(data))

    cdef unsigned long long sp = STACK_BASE - <unsigned long long> enc.entry_frame
    if sp < STACK_LIMIT:
        raise MachineError("stack-overflow", "entry frame too large")

    obs = ObservationTrace()
    obs_steps = obs.steps
    obs_addrs = obs.addrs
    obs_lo = obs.ct_lo
    obs_hi = obs.ct_hi
    cdef bint observe = config.observe
    cdef unsigned long long lo, hi, t_lo, t_hi, a0, a1
    cdef unsigned long long base_addr, blk, off, size
    cdef int k

    if observe:
        # step-0 snapshot of every nonzero block, region order fixed
        for k in range(3):
            if k == 0:
                base_addr = STACK_LIMIT
                size = STACK_BASE - STACK_LIMIT
            elif k == 1:
                base_addr = HEAP_BASE
                size = HEAP_END - HEAP_BASE
            else:
                base_addr = DATA_BASE
                size = DATA_END - DATA_BASE
            for off in range(0, <unsigned long long> size, 16):
                a0 = read_u64(mems[k] + off)
                a1 = read_u64(mems[k] + off + 8)
                if a0 | a1:
                    blk = base_addr + off
                    t_lo = mix64(tk_lo ^ blk)
                    t_hi = mix64(tk_hi ^ (blk * GOLDEN))
                    lo = a0 ^ t_lo
                    hi = a1 ^ t_hi
                    for r in range(n_rk):
                        lo, hi = hi, lo ^ mix64(hi + rk[r])
                    obs_steps.append(0)
                    obs_addrs.append(blk)
                    obs_lo.append(lo ^ t_lo)
                    obs_hi.append(hi ^ t_hi)

    events = []
    call_stack = []
    cdef long long limit = config.step_limit
    cdef long long steps = 0
    cdef long long total_cost = 0
    cdef unsigned long long heap_ptr = enc.heap_start
    cdef long long i = enc.entry_index
    cdef long long prev_i
    cdef int op, w, mi, flags = 0, halt_code = 0
    cdef long long f0, f1, f2, f3, f4
    cdef unsigned long long a, b, res, addr, val, base, first, last
    cdef unsigned long long ret_val = 0
    cdef int amt
    cdef bint changed
    cdef unsigned char *mp

    while True:
        if steps >= limit:
            raise MachineError("step-limit", f"exceeded {limit} steps")
        op = ops[i]
        f0 = flds[i, 0]
        f1 = flds[i, 1]
        f2 = flds[i, 2]
        f3 = flds[i, 3]
        f4 = flds[i, 4]
        steps += 1
        total_cost += cost_tab[op]
        prev_i = i
        i += 1
        if op == OP_MOV:
            regs[f0] = <unsigned long long> f2 if f1 else regs[f2]
        elif op == OP_LOAD:
            base = regs[f1] if f1 >= 0 else (sp if f1 == -1 else 0)
            addr = base + <unsigned long long> f2
            w = <int> f3
            if STACK_LIMIT <= addr and addr + w <= STACK_BASE:
                mi = 0
                off = addr - STACK_LIMIT
            elif HEAP_BASE <= addr and addr + w <= HEAP_END:
                mi = 1
                off = addr - HEAP_BASE
            elif DATA_BASE <= addr and addr + w <= DATA_END:
                mi = 2
                off = addr - DATA_BASE
            else:
                raise MachineError("oob", f"access of {w} bytes at 0x{addr:x}")
            val = 0
            memcpy(&val, mems[mi] + off, w)
            regs[f0] = val
        elif op == OP_STORE:
            base = regs[f0] if f0 >= 0 else (sp if f0 == -1 else 0)
            addr = base + <unsigned long long> f1
            w = <int> f2
            val = <unsigned long long> f4 if f3 else regs[f4]
            if STACK_LIMIT <= addr and addr + w <= STACK_BASE:
                mi = 0
                off = addr - STACK_LIMIT
            elif HEAP_BASE <= addr and addr + w <= HEAP_END:
                mi = 1
                off = addr - HEAP_BASE
            elif DATA_BASE <= addr and addr + w <= DATA_END:
                mi = 2
                off = addr - DATA_BASE
            else:
                raise MachineError("oob", f"access of {w} bytes at 0x{addr:x}")
            mp = mems[mi]
            changed = memcmp(mp + off, &val, w) != 0
            if changed:
                memcpy(mp + off, &val, w)
            if OUT_BASE <= addr and addr < OUT_END:
                if w == 8:
                    events.append((addr, val, w))
                else:
                    events.append((addr, val & ((1ULL << (8 * w)) - 1), w))
            if changed and observe:
                first = addr & ~<unsigned long long> 15
                last = (addr + w - 1) & ~<unsigned long long> 15
                blk = first - (addr - off)  # block offset within region
                while True:
                    a0 = read_u64(mp + blk)
                    a1 = read_u64(mp + blk + 8)
                    t_lo = mix64(tk_lo ^ first)
                    t_hi = mix64(tk_hi ^ (first * GOLDEN))
                    lo = a0 ^ t_lo
                    hi = a1 ^ t_hi
                    for r in range(n_rk):
                        lo, hi = hi, lo ^ mix64(hi + rk[r])
                    obs_steps.append(steps)
                    obs_addrs.append(first)
                    obs_lo.append(lo ^ t_lo)
                    obs_hi.append(hi ^ t_hi)
                    if first == last:
                        break
                    first += 16
                    blk += 16
        elif OP_XOR <= op <= OP_MUL:
            a = regs[f0]
            b = <unsigned long long> f2 if f1 else regs[f2]
            if op == OP_XOR:
                res = a ^ b
                flags = (1 if res == 0 else 0) | (2 if res & SIGN else 0)
            elif op == OP_AND:
                res = a & b
                flags = (1 if res == 0 else 0) | (2 if res & SIGN else 0)
            elif op == OP_OR:
                res = a | b
                flags = (1 if res == 0 else 0) | (2 if res & SIGN else 0)
            elif op == OP_ADD:
                res = a + b
                flags = ((1 if res == 0 else 0)
                         | (2 if res & SIGN else 0)
                         | (4 if res < a else 0)
                         | (8 if (~(a ^ b)) & (a ^ res) & SIGN else 0))
            elif op == OP_SUB:
                res = a - b
                flags = ((1 if res == 0 else 0)
                         | (2 if res & SIGN else 0)
                         | (4 if a < b else 0)
                         | (8 if (a ^ b) & (a ^ res) & SIGN else 0))
            elif op == OP_SHL:
                amt = <int> (b & 63)
                if amt == 0:
                    res = a
                else:
                    res = a << amt
                    flags = ((1 if res == 0 else 0)
                             | (2 if res & SIGN else 0)
                             | (4 if (a >> (64 - amt)) & 1 else 0))
            elif op == OP_SHR:
                amt = <int> (b & 63)
                if amt == 0:
                    res = a
                else:
                    res = a >> amt
                    flags = ((1 if res == 0 else 0)
                             | (2 if res & SIGN else 0)
                             | (4 if (a >> (amt - 1)) & 1 else 0))
            else:  # OP_MUL
                res = a * b
                # overflow iff truncated product no longer divides back
                flags = ((1 if res == 0 else 0)
                         | (2 if res & SIGN else 0)
                         | (12 if a != 0 and res // a != b else 0))
            regs[f0] = res
        elif op == OP_CMP:
            a = regs[f0]
            b = <unsigned long long> f2 if f1 else regs[f2]
            res = a - b
            flags = ((1 if res == 0 else 0)
                     | (2 if res & SIGN else 0)
                     | (4 if a < b else 0)
                     | (8 if (a ^ b) & (a ^ res) & SIGN else 0))
        elif op == OP_TEST:
            a = regs[f0]
            b = <unsigned long long> f2 if f1 else regs[f2]
            res = a & b
            flags = (1 if res == 0 else 0) | (2 if res & SIGN else 0)
        elif op == OP_BR:
            if cond_ok(<int> f0, flags):
                i = f1
        elif op == OP_JMP:
            i = f0
        elif op == OP_SELECT:
            if cond_ok(<int> f3, flags):
                regs[f0] = <unsigned long long> f2 if f1 else regs[f2]
        elif op == OP_CALL:
            call_stack.append((i, sp))
            sp -= <unsigned long long> f1
            if sp < STACK_LIMIT:
                raise MachineError("stack-overflow", f"call at site {sites[prev_i]}")
            i = f0
        elif op == OP_RET:
            if not call_stack:
                ret_val = regs[0]
                break
            i, sp_py = call_stack.pop()
            sp = sp_py
        elif op == OP_SAVEF:
            regs[FLAGS_HOME] = <unsigned long long> flags
        elif op == OP_RESTF:
            flags = <int> (regs[FLAGS_HOME] & 15)
        elif op == OP_RDRAND:
            rd_state += GOLDEN
            regs[f0] = mix64(rd_state)
        elif op == OP_PRF:
            k = V_BASE + ((<int> f0 - V_BASE) & ~1)
            a = regs[k]
            b = regs[k + 1]
            a, b = b, a ^ mix64(b + regs[PRF_KX])
            a, b = b, a ^ mix64(b + regs[PRF_KY])
            regs[k] = a
            regs[k + 1] = b
        elif op == OP_ALLOC:
            val = <unsigned long long> f2 if f1 else regs[f2]
            val = (val + 7) & ~<unsigned long long> 7
            if heap_ptr + val > HEAP_END:
                raise MachineError("heap-exhausted", f"alloc of {val}")
            regs[f0] = heap_ptr
            heap_ptr += val
        elif op == OP_TAINT:
            pass
        elif op == OP_HALT:
            halt_code = <int> f0
            if halt_code:
                raise MachineError("halt", f"code {halt_code}")
            ret_val = regs[0]
            break
        else:
            raise MachineError("bad-op", str(op))

    return RunResult(
        functional=FunctionalTrace(tuple(events), ret_val),
        obs=obs,
        cost=total_cost,
        steps=steps,
        regs=tuple(regs[r] for r in range(NUM_REGS)),
        flags=flags,
        halt_code=halt_code,
        engine="compiled",
        memory={"stack": stack_ba, "heap": heap_ba, "data": data_ba},
    )


cdef _write_raw(unsigned char **mems, object addr_py, bytes data):
    cdef unsigned long long addr = addr_py
    cdef unsigned long long n = len(data)
    cdef const unsigned char *src = data
    if STACK_LIMIT <= addr and addr + n <= STACK_BASE:
        memcpy(mems[0] + (addr - STACK_LIMIT), src, n)
    elif HEAP_BASE <= addr and addr + n <= HEAP_END:
        memcpy(mems[1] + (addr - HEAP_BASE), src, n)
    elif DATA_BASE <= addr and addr + n <= DATA_END:
        memcpy(mems[2] + (addr - DATA_BASE), src, n)
    else:
        raise MachineError("oob", f"image of {n} bytes at 0x{addr:x}")
