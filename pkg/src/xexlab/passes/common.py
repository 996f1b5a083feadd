"""Shared machinery for the rewriting passes.

Every pass works the same way: walk a program, replace single
instructions with short macro sequences, and prepend per-function
setup code.  The helpers here keep that surgery honest: fresh site
ids minted above the input program's range, scratch registers proven
dead by liveness, spill slots carved from a reserved frame area, and
16-byte alignment for every frame a pass grows (so stack addresses
keep their block pairing no matter how many slots are appended).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import cfg, isa, mir
from ..mir import Block, Function, Imm, Instr, Mem, Program, Reg

SPILL_SLOTS = 4


def ceil16(n: int) -> int:
    return (n + 15) & ~15


class Rewriter:
    """Mints fresh site ids so inserted code never collides with the input."""

    def __init__(self, p: Program):
        self.next_site = p.max_site() + 1
        self.minted: list[int] = []

    def fresh(self) -> int:
        s = self.next_site
        self.next_site += 1
        self.minted.append(s)
        return s

    def ins(self, op: str, *args) -> Instr:
        return Instr(op, tuple(args), self.fresh())


@dataclass
class FrameLayout:
    """Frame growth plan for one function.

    Original cells stay at their offsets.  Above them, after padding to
    16 bytes, sit a fixed spill area and then one 8-byte nonce slot per
    masked cell.  The final frame is padded to 16 so every sp in the
    program stays 16-aligned and cell-to-block pairing is preserved.
    """

    orig_frame: int
    spill_base: int
    nonce_slots: dict[int, int] = field(default_factory=dict)   # cell off -> nonce off
    _next_nonce: int = 0

    @classmethod
    def for_function(cls, f: Function) -> "FrameLayout":
        base = ceil16(mir.frame_size(f))
        lay = cls(orig_frame=mir.frame_size(f), spill_base=base)
        lay._next_nonce = base + SPILL_SLOTS * 8
        return lay

    def spill_off(self, k: int) -> int:
        if not 0 <= k < SPILL_SLOTS:
            raise ValueError("spill slot index out of range")
        return self.spill_base + 8 * k

    def nonce_off(self, cell: int) -> int:
        if cell not in self.nonce_slots:
            self.nonce_slots[cell] = self._next_nonce
            self._next_nonce += 8
        return self.nonce_slots[cell]

    def frame_size(self) -> int:
        return ceil16(self._next_nonce)


def static_sp(p: Program, frame_sizes: dict[str, int]) -> dict[str, int]:
    """Best-effort static stack pointer per function.

    Exact when every function is reached at a single call depth, which
    holds for the shipped corpus.  An ambiguous or unreachable function
    keeps its first computed value (or an entry-depth guess); the choice
    only steers which random-buffer entry seeds a first store, never
    correctness, because decode always reads the stored nonce.
    """
    sp: dict[str, int] = {}
    entry = p.entry
    sp[entry] = isa.STACK_BASE - frame_sizes.get(entry, 0)
    work = [entry]
    while work:
        fn = work.pop()
        f = p.function(fn)
        for b in f.blocks:
            for ins in b.instrs:
                if ins.op == "call":
                    callee = ins.args[0]
                    val = sp[fn] - frame_sizes.get(callee, 0)
                    if callee not in sp:
                        sp[callee] = val
                        work.append(callee)
    for f in p.functions:
        sp.setdefault(f.name, isa.STACK_BASE - frame_sizes.get(f.name, 0))
    return sp


@dataclass(frozen=True)
class Scratch:
    """Scratch registers for one macro plus the spill traffic they cost."""

    regs: tuple[int, ...]
    pre: tuple[Instr, ...]
    post: tuple[Instr, ...]


def acquire_scratch(rw: Rewriter, f: Function, label: str, idx: int,
                    need: int, exclude: set[int], layout: FrameLayout) -> Scratch:
    """Pick `need` general registers usable at f/label/idx.

    Dead registers are free.  Live ones are spilled to the reserved slots
    and reloaded after the macro; the flags register g15 is never chosen.
    """
    live = cfg.live_at(f, label, idx)
    banned = set(exclude) | {isa.FLAGS_HOME}
    dead = [r for r in range(isa.NUM_GENERAL - 1, -1, -1)
            if r not in live and r not in banned]
    regs = dead[:need]
    pre: list[Instr] = []
    post: list[Instr] = []
    if len(regs) < need:
        want = need - len(regs)
        livec = [r for r in range(isa.NUM_GENERAL - 1, -1, -1)
                 if r not in banned and r not in regs]
        if want > SPILL_SLOTS or len(livec) < want:
            raise MaskError(f"{f.name}/{label}: cannot free {need} scratch registers")
        for k, r in enumerate(livec[:want]):
            off = layout.spill_off(k)
            pre.append(rw.ins("store", Mem(None, off), Reg(r)))
            post.append(rw.ins("load", Reg(r), Mem(None, off)))
            regs.append(r)
    return Scratch(tuple(regs), tuple(pre), tuple(post))


class MaskError(ValueError):
    """A pass cannot rewrite the program as asked."""


def replace_in_function(p: Program, fn_name: str,
                        repl: dict[tuple[str, int], list[Instr]]) -> Program:
    """Replace instructions of one function; keys are (label, index)."""
    funcs = []
    for f in p.functions:
        if f.name != fn_name:
            funcs.append(f)
            continue
        blocks = []
        for b in f.blocks:
            out: list[Instr] = []
            for i, ins in enumerate(b.instrs):
                seq = repl.get((b.label, i))
                out.extend(seq if seq is not None else [ins])
            blocks.append(Block(b.label, tuple(out)))
        funcs.append(Function(f.name, tuple(blocks)))
    return Program(tuple(funcs), p.entry, p.secret_regions, p.heap_images)


def prepend_block(p: Program, fn_name: str, label: str,
                  instrs: list[Instr]) -> Program:
    """Insert a new first block so loop headers are never re-entered into it."""
    if not instrs:
        return p
    funcs = []
    for f in p.functions:
        if f.name != fn_name:
            funcs.append(f)
            continue
        blocks = (Block(label, tuple(instrs)),) + f.blocks
        funcs.append(Function(f.name, blocks))
    return Program(tuple(funcs), p.entry, p.secret_regions, p.heap_images)


def append_function(p: Program, f: Function) -> Program:
    return Program(p.functions + (f,), p.entry, p.secret_regions, p.heap_images)


def rename_lane(p: Program, old: int, new: int) -> Program:
    """Substitute one register id for another across the whole program."""
    def sub(a):
        if isinstance(a, Reg) and a.id == old:
            return Reg(new)
        if isinstance(a, Mem) and a.base == old:
            return Mem(new, a.offset, a.width)
        return a

    funcs = []
    for f in p.functions:
        blocks = []
        for b in f.blocks:
            blocks.append(Block(b.label, tuple(
                Instr(i.op, tuple(sub(a) for a in i.args), i.site)
                for i in b.instrs)))
        funcs.append(Function(f.name, tuple(blocks)))
    return Program(tuple(funcs), p.entry, p.secret_regions, p.heap_images)


def used_regs(p: Program) -> set[int]:
    used: set[int] = set()
    for _, _, ins in p.instructions():
        for a in ins.args:
            if isinstance(a, Reg):
                used.add(a.id)
            elif isinstance(a, Mem) and a.is_reg_based():
                used.add(a.base)
        if ins.op == "prf_enc":
            lane = ins.args[0].id
            base = isa.REG_V_BASE + ((lane - isa.REG_V_BASE) & ~1)
            used.update({base, base + 1})
            used.update(isa.AES_STATE_LANES[2:])
    return used


def evict_reserved(p: Program, reserved: tuple[int, ...]) -> tuple[Program, dict[int, int]]:
    """Free the variant's reserved lanes by renaming collisions away.

    Renames each conflicting lane to one unused anywhere in the program.
    With 32 vector lanes that always succeeds in practice; running out is
    a hard error rather than a silent correctness risk.
    """
    used = used_regs(p)
    conflicts = [r for r in reserved if r in used]
    if not conflicts:
        return p, {}
    pool = [r for r in range(isa.REG_V_BASE, isa.NUM_REGS)
            if r not in used and r not in reserved]
    if len(pool) < len(conflicts):
        raise MaskError("no free lanes left to relocate reserved-lane users")
    moved: dict[int, int] = {}
    for old in conflicts:
        new = pool.pop(0)
        p = rename_lane(p, old, new)
        moved[old] = new
    return p, moved


def emit_addr(rw: Rewriter, dst: int, m: Mem, sp_val: int | None = None) -> list[Instr]:
    """Materialize the runtime address of a memory operand into `dst`.

    sp-relative operands need the caller to pass the static sp value;
    absolute and register-based forms never do.
    """
    if m.base == isa.ABS:
        return [rw.ins("mov", Reg(dst), Imm(m.offset))]
    if m.base is None:
        if sp_val is None:
            raise MaskError("sp-relative operand needs a static stack pointer")
        return [rw.ins("mov", Reg(dst), Imm((sp_val + m.offset) & isa.MASK64))]
    seq = [rw.ins("mov", Reg(dst), Reg(m.base))]
    if m.offset:
        seq.append(rw.ins("add", Reg(dst), Imm(m.offset)))
    return seq


def emit_heap_nonce_cell(rw: Rewriter, r: int) -> list[Instr]:
    """Turn an address in `r` into its normal-mode heap nonce cell address."""
    from .. import nonces
    return [
        rw.ins("and", Reg(r), Imm(nonces.ADDR_MASK)),
        rw.ins("mul", Reg(r), Imm(nonces.HASH_MULT)),
        rw.ins("shr", Reg(r), Imm(nonces.HASH_SHIFT)),
        rw.ins("shl", Reg(r), Imm(3)),
        rw.ins("add", Reg(r), Imm(isa.NONCE_STORE_BASE)),
    ]


def emit_rand_entry_load(rw: Rewriter, r: int) -> list[Instr]:
    """Turn an address in `r` into the matching RandomNonceBuffer entry value."""
    from .. import nonces
    return [
        rw.ins("and", Reg(r), Imm(nonces.INITIAL_INDEX_MASK)),
        rw.ins("shl", Reg(r), Imm(3)),
        rw.ins("add", Reg(r), Imm(isa.RAND_BUF_BASE)),
        rw.ins("load", Reg(r), Mem(r, 0)),
    ]


def width_mask(width: int) -> int:
    return (1 << (8 * width)) - 1
