"""Dynamic taint tracking over the reference interpreter.

Shadow state mirrors the machine: one bit per register, one for the flags
word, one per memory byte.  Secrets enter through declared secret regions,
explicit taint_label instructions, or caller-marked input registers, and
spread through data flow plus an explicit control-taint scope for branches
taken on tainted flags (the scope closes at the branch block's immediate
postdominator, or at return when the arms never rejoin).

What falls out of a run:
  * sensitive store/load sites (leak points a ciphertext observer can use)
  * which stack slots of which function ever held secret bytes
  * which heap byte ranges ever held secret bytes

Stores into the output window are declassification by contract and are
never sensitive.  Passes that legitimately store masked secret material
register those sites as sanctioned; anything tainted hitting memory
outside that set is a violation the register-allocation audit reports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import cfg, isa, mir
from .core import engine_py
from .encode import EncodedProgram, OP_INDEX, encode_program
from .runtime import RunConfig, RunResult

OP_LOAD = OP_INDEX["load"]
OP_STORE = OP_INDEX["store"]
OP_MOV = OP_INDEX["mov"]
OP_XOR = OP_INDEX["xor"]
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


def program_fingerprint(p: mir.Program) -> str:
    return hashlib.sha256(mir.print_program(p).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SensitiveSites:
    """What the mitigation passes must protect, keyed to one program text."""

    fingerprint: str
    stores: frozenset[int] = frozenset()
    loads: frozenset[int] = frozenset()
    stack_slots: tuple[tuple[str, tuple[int, ...]], ...] = ()
    heap_regions: tuple[tuple[int, int], ...] = ()   # (base, length), 8-aligned

    def slots_of(self, func: str) -> tuple[int, ...]:
        for name, slots in self.stack_slots:
            if name == func:
                return slots
        return ()

    def merge(self, other: "SensitiveSites") -> "SensitiveSites":
        if self.fingerprint != other.fingerprint:
            raise ValueError("merging site sets of different programs")
        slots: dict[str, set[int]] = {}
        for name, ids in list(self.stack_slots) + list(other.stack_slots):
            slots.setdefault(name, set()).update(ids)
        return SensitiveSites(
            fingerprint=self.fingerprint,
            stores=self.stores | other.stores,
            loads=self.loads | other.loads,
            stack_slots=tuple(sorted((n, tuple(sorted(s))) for n, s in slots.items())),
            heap_regions=_coalesce(list(self.heap_regions) + list(other.heap_regions)),
        )

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "stores": sorted(self.stores),
            "loads": sorted(self.loads),
            "stack_slots": {n: list(ids) for n, ids in self.stack_slots},
            "heap": [{"base": b, "len": ln} for b, ln in self.heap_regions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitiveSites":
        return cls(
            fingerprint=d["fingerprint"],
            stores=frozenset(d["stores"]),
            loads=frozenset(d["loads"]),
            stack_slots=tuple(sorted(
                (n, tuple(sorted(ids))) for n, ids in d["stack_slots"].items())),
            heap_regions=tuple((r["base"], r["len"]) for r in d["heap"]),
        )


def _coalesce(regions: list[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Union of byte ranges, widened to 8-byte cells, merged when touching."""
    if not regions:
        return ()
    spans = sorted((b & ~7, (b + ln + 7) & ~7) for b, ln in regions if ln > 0)
    out: list[list[int]] = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return tuple((lo, hi - lo) for lo, hi in out)


@dataclass
class TaintRun:
    """One traced execution: merged observations plus the machine result."""

    sites: SensitiveSites
    result: RunResult
    tainted_stores: list[tuple[int, int, int]] = field(default_factory=list)   # (site, addr, step)
    tainted_loads: list[tuple[int, int, int]] = field(default_factory=list)
    violations: list[tuple[int, int, int]] = field(default_factory=list)


class _Tracker:
    def __init__(self, p: mir.Program, enc: EncodedProgram,
                 taint_regs: tuple, sanctioned: frozenset[int]):
        self.enc = enc
        self.sanctioned = sanctioned
        self.reg_t = [False] * isa.NUM_REGS
        for r in taint_regs:
            self.reg_t[isa.parse_reg(r) if isinstance(r, str) else r] = True
        self.flags_t = False
        self.stack_sh = bytearray(isa.STACK_BASE - isa.STACK_LIMIT)
        self.heap_sh = bytearray(isa.HEAP_SIZE)
        self.data_sh = bytearray(isa.DATA_SIZE)
        self.heap_ever = bytearray(isa.HEAP_SIZE)
        for addr, length in p.secret_regions:
            self._mark_region(addr, length)
        self.scopes: list[tuple[int | None, int]] = []    # (pdom index, call depth)
        self.store_sites: set[int] = set()
        self.load_sites: set[int] = set()
        self.slot_hits: dict[str, set[int]] = {}
        self.tainted_stores: list[tuple[int, int, int]] = []
        self.tainted_loads: list[tuple[int, int, int]] = []
        self.violations: list[tuple[int, int, int]] = []
        # per-function slot table (frame cell offset -> slot id) and the
        # postdominator jump targets for control-taint scoping
        self.slot_ids: dict[str, dict[int, int]] = {}
        self.pdom_index: dict[int, int | None] = {}
        spans: dict[str, list[int]] = {}
        for i, fname in enumerate(enc.func_of_index):
            spans.setdefault(fname, [i, i])[1] = i
        for f in p.functions:
            self.slot_ids[f.name] = {
                off: sid for sid, (off, _) in mir.stack_slots(f).items()}
            lo, hi = spans[f.name]
            pdoms = cfg.instruction_postdominators(enc.ops, enc.fields, lo, hi)
            for i in range(lo, hi + 1):
                if enc.ops[i] == OP_BR:
                    self.pdom_index[i] = pdoms[i]

    # ---- shadow helpers ----

    def _shadow(self, addr: int):
        if isa.STACK_LIMIT <= addr < isa.STACK_BASE:
            return self.stack_sh, addr - isa.STACK_LIMIT
        if isa.HEAP_BASE <= addr < isa.HEAP_BASE + isa.HEAP_SIZE:
            return self.heap_sh, addr - isa.HEAP_BASE
        if isa.DATA_BASE <= addr < isa.DATA_BASE + isa.DATA_SIZE:
            return self.data_sh, addr - isa.DATA_BASE
        return None, 0

    def _mark_region(self, addr: int, length: int) -> None:
        sh, off = self._shadow(addr)
        if sh is None:
            return
        sh[off:off + length] = b"\x01" * length
        if sh is self.heap_sh:
            self.heap_ever[off:off + length] = b"\x01" * length

    def _mem_tainted(self, addr: int, w: int) -> bool:
        sh, off = self._shadow(addr)
        return sh is not None and any(sh[off:off + w])

    @property
    def control(self) -> bool:
        return bool(self.scopes)

    # ---- the pre-step hook ----

    def __call__(self, eng: engine_py.Engine, i: int) -> None:
        depth = len(eng.call_stack)
        while self.scopes and self.scopes[-1][0] == i and self.scopes[-1][1] == depth:
            self.scopes.pop()
        op = eng.ops[i]
        f = eng.fields[i]
        rt = self.reg_t
        ctrl = bool(self.scopes)

        if op == OP_MOV:
            rt[f[0]] = (False if f[1] else rt[f[2]]) or ctrl
        elif OP_XOR <= op <= OP_MUL:
            src_t = False if f[1] else rt[f[2]]
            rt[f[0]] = rt[f[0]] or src_t or ctrl
            self.flags_t = rt[f[0]]
        elif op == OP_LOAD:
            b = f[1]
            base = eng.regs[b] if b >= 0 else (eng.sp if b == -1 else 0)
            addr = (base + f[2]) & isa.MASK64
            addr_t = rt[b] if b >= 0 else False
            mem_t = self._mem_tainted(addr, f[3])
            rt[f[0]] = addr_t or mem_t or ctrl
            if addr_t or mem_t:
                self.load_sites.add(self.enc.sites[i])
                self.tainted_loads.append((self.enc.sites[i], addr, eng.steps))
        elif op == OP_STORE:
            b = f[0]
            base = eng.regs[b] if b >= 0 else (eng.sp if b == -1 else 0)
            addr = (base + f[1]) & isa.MASK64
            w = f[2]
            addr_t = rt[b] if b >= 0 else False
            val_t = False if f[3] else rt[f[4]]
            t = addr_t or val_t or ctrl
            if isa.OUT_BASE <= addr < isa.OUT_BASE + isa.OUT_SIZE:
                return    # declassified output window
            sh, off = self._shadow(addr)
            if sh is not None:
                fill = b"\x01" * w if t else b"\x00" * w
                sh[off:off + w] = fill
                if t and sh is self.heap_sh:
                    self.heap_ever[off:off + w] = fill
            if t:
                site = self.enc.sites[i]
                self.store_sites.add(site)
                self.tainted_stores.append((site, addr, eng.steps))
                if site not in self.sanctioned:
                    self.violations.append((site, addr, eng.steps))
                if isa.STACK_LIMIT <= addr < isa.STACK_BASE:
                    fn = self.enc.func_of_index[i]
                    cell = (addr - eng.sp) & ~7
                    sid = self.slot_ids.get(fn, {}).get(cell)
                    if sid is not None:
                        self.slot_hits.setdefault(fn, set()).add(sid)
        elif op in (OP_CMP, OP_TEST):
            src_t = False if f[1] else rt[f[2]]
            self.flags_t = rt[f[0]] or src_t or ctrl
        elif op == OP_SELECT:
            src_t = False if f[1] else rt[f[2]]
            rt[f[0]] = rt[f[0]] or src_t or self.flags_t or ctrl
        elif op == OP_BR:
            if self.flags_t:
                self.scopes.append((self.pdom_index.get(i), depth))
        elif op == OP_RET:
            while self.scopes and self.scopes[-1][1] >= depth:
                self.scopes.pop()
        elif op == OP_SAVEF:
            rt[isa.FLAGS_HOME] = self.flags_t or ctrl
        elif op == OP_RESTF:
            self.flags_t = rt[isa.FLAGS_HOME] or ctrl
        elif op == OP_RDRAND:
            rt[f[0]] = ctrl
        elif op == OP_PRF:
            pair = isa.REG_V_BASE + ((f[0] - isa.REG_V_BASE) & ~1)
            t = (rt[pair] or rt[pair + 1]
                 or rt[isa.AES_STATE_LANES[2]] or rt[isa.AES_STATE_LANES[3]] or ctrl)
            rt[pair] = t
            rt[pair + 1] = t
        elif op == OP_ALLOC:
            rt[f[0]] = (False if f[1] else rt[f[2]]) or ctrl
        elif op == OP_TAINT:
            if f[0]:  # immediate address form
                self._mark_region(f[1] & isa.MASK64, f[2])
            elif f[2] > 0:
                self._mark_region(eng.regs[f[1]], f[2])
            else:
                rt[f[1]] = True
        # jmp, call, halt: no data effect

    # ---- results ----

    def sites(self, fingerprint: str) -> SensitiveSites:
        nz = np.flatnonzero(np.frombuffer(self.heap_ever, dtype=np.uint8))
        regions: list[tuple[int, int]] = []
        if len(nz):
            breaks = np.flatnonzero(np.diff(nz) > 1)
            lo = 0
            for b in list(breaks) + [len(nz) - 1]:
                regions.append((isa.HEAP_BASE + int(nz[lo]), int(nz[b]) - int(nz[lo]) + 1))
                lo = b + 1
        return SensitiveSites(
            fingerprint=fingerprint,
            stores=frozenset(self.store_sites),
            loads=frozenset(self.load_sites),
            stack_slots=tuple(sorted(
                (n, tuple(sorted(s))) for n, s in self.slot_hits.items())),
            heap_regions=_coalesce(regions),
        )


def trace_taint(p: mir.Program, inputs: dict | None = None,
                config: RunConfig | None = None, taint_regs: tuple = (),
                sanctioned_sites: frozenset[int] = frozenset(),
                enc: EncodedProgram | None = None) -> TaintRun:
    """Run once under the reference engine with taint tracking attached."""
    if enc is None:
        enc = encode_program(p)
    if config is None:
        config = RunConfig()
    tracker = _Tracker(p, enc, taint_regs, sanctioned_sites)
    result = engine_py.run_encoded(enc, config, inputs, step_cb=tracker)
    return TaintRun(
        sites=tracker.sites(program_fingerprint(p)),
        result=result,
        tainted_stores=tracker.tainted_stores,
        tainted_loads=tracker.tainted_loads,
        violations=tracker.violations,
    )


def analyze_sites(p: mir.Program, input_list: list[dict | None],
                  config: RunConfig | None = None,
                  taint_regs: tuple = ()) -> SensitiveSites:
    """Merged sensitive sites over several runs (inputs vary coverage)."""
    enc = encode_program(p)
    merged: SensitiveSites | None = None
    for inputs in input_list:
        run = trace_taint(p, inputs, config, taint_regs, enc=enc)
        merged = run.sites if merged is None else merged.merge(run.sites)
    assert merged is not None, "need at least one input"
    return merged
