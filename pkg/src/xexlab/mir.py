"""Machine IR: data types, text parser, printer, validator.

The IR is a small register machine over 16 general registers (g0..g15), a
flags word, and 32 vector lanes (v0L..v15H); all are uniform 64-bit cells.
Programs are immutable: rewrites build new Program values.  Every instruction
carries a site id; rewriting passes keep original ids on surviving
instructions and mint fresh ids above the previous maximum for insertions,
so diffing a mitigated program against its original is stable.

Text form
---------

    .entry main
    .secret 0x100000, 64
    .heap 0x100000, 8, 01 02 03 04 05 06 07 08
    func main {
    entry:
      mov g0, 0
      load g1, [g2+8]
      store.4 [sp+16], g1
      cmp g0, 10
      br_cond ult, loop
      halt
    }

Blocks start at labels; control falls through to the next block unless the
last instruction is jmp/ret/halt.  Memory operands are [reg+imm] or [sp+imm]
with an optional .1/.2/.4/.8 width suffix on the opcode (default 8).  A
trailing @N annotation pins an instruction's site id; the printer emits the
annotations only when ids are not the dense 0..n-1 sequence, so hand-written
fixtures round-trip byte for byte and rewritten programs round-trip id for id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from . import isa

# =============================================================================
# Types
# =============================================================================


@dataclass(frozen=True)
class Reg:
    id: int

    def __repr__(self) -> str:
        return isa.reg_name(self.id)


@dataclass(frozen=True)
class Imm:
    value: int

    def __repr__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Mem:
    """[base+offset] with an access width.

    base is a register id, None for sp-relative, or isa.ABS for an
    absolute address carried entirely in offset.
    """

    base: int | None
    offset: int
    width: int = 8

    def is_reg_based(self) -> bool:
        return self.base is not None and self.base >= 0

    def __repr__(self) -> str:
        if self.base == isa.ABS:
            return f"[{self.offset:#x}]"
        b = "sp" if self.base is None else isa.reg_name(self.base)
        if self.offset < 0:
            return f"[{b}-{-self.offset}]"
        return f"[{b}+{self.offset}]"


@dataclass(frozen=True)
class Instr:
    op: str
    args: tuple
    site: int

    def mem(self) -> Mem | None:
        for a in self.args:
            if isinstance(a, Mem):
                return a
        return None


@dataclass(frozen=True)
class Block:
    label: str
    instrs: tuple[Instr, ...]


@dataclass(frozen=True)
class Function:
    name: str
    blocks: tuple[Block, ...]

    def labels(self) -> tuple[str, ...]:
        return tuple(b.label for b in self.blocks)


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    entry: str
    secret_regions: tuple[tuple[int, int], ...] = ()      # (addr, length)
    heap_images: tuple[tuple[int, bytes], ...] = ()       # (addr, bytes)

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def instructions(self) -> Iterable[tuple[Function, Block, Instr]]:
        for f in self.functions:
            for b in f.blocks:
                for ins in b.instrs:
                    yield f, b, ins

    def max_site(self) -> int:
        return max((ins.site for _, _, ins in self.instructions()), default=-1)


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# =============================================================================
# Operand signatures per opcode
# =============================================================================
#
# R  register            RI register or immediate        M  memory operand
# L  label               C  condition code               F  function name
# I  immediate           I? optional immediate

_SIGS: dict[str, tuple[str, ...]] = {
    "load": ("R", "M"),
    "store": ("M", "RI"),
    "mov": ("R", "RI"),
    **{op: ("R", "RI") for op in isa.ALU_OPS},
    "cmp": ("R", "RI"),
    "test": ("R", "RI"),
    "select": ("R", "RI", "C"),
    "jmp": ("L",),
    "br_cond": ("C", "L"),
    "call": ("F",),
    "ret": (),
    "saveflags": (),
    "restoreflags": (),
    "rdrand": ("R",),
    "prf_enc": ("R",),
    "heap_alloc": ("R", "RI"),
    "taint_label": ("RI", "I"),
    "halt": ("I?",),
}

TERMINATORS = ("jmp", "ret", "halt")


def _parse_int(tok: str, line_no: int) -> int:
    t = tok.strip()
    try:
        return int(t, 0)
    except ValueError:
        raise ParseError(line_no, f"bad integer {tok!r}") from None


def _parse_mem(tok: str, width: int, line_no: int) -> Mem:
    t = tok.strip()
    if not (t.startswith("[") and t.endswith("]")):
        raise ParseError(line_no, f"bad memory operand {tok!r}")
    inner = t[1:-1].strip()
    if inner and (inner[0].isdigit()):
        return Mem(isa.ABS, _parse_int(inner, line_no), width)
    # split base and signed offset
    for i in range(1, len(inner)):
        if inner[i] in "+-":
            base_s, off_s = inner[:i], inner[i:]
            break
    else:
        base_s, off_s = inner, "+0"
    base_s = base_s.strip()
    off = _parse_int(off_s, line_no)
    if base_s == "sp":
        return Mem(None, off, width)
    try:
        return Mem(isa.parse_reg(base_s), off, width)
    except ValueError:
        raise ParseError(line_no, f"bad base register {base_s!r}") from None


def _split_args(rest: str) -> list[str]:
    """Comma-split that respects [..] brackets."""
    parts, depth, cur = [], 0, []
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur or parts:
        parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _parse_instr(line: str, line_no: int, default_site: int) -> Instr:
    site = default_site
    if "@" in line:
        line, _, ann = line.rpartition("@")
        site = _parse_int(ann, line_no)
    toks = line.strip().split(None, 1)
    head = toks[0]
    rest = toks[1] if len(toks) > 1 else ""
    width = 8
    if "." in head:
        head, _, w = head.partition(".")
        if w not in ("1", "2", "4", "8") or head not in ("load", "store"):
            raise ParseError(line_no, f"bad width suffix on {head!r}")
        width = int(w)
    if head not in _SIGS:
        raise ParseError(line_no, f"unknown opcode {head!r}")
    sig = _SIGS[head]
    raw = _split_args(rest)
    if sig and sig[-1] == "I?":
        if len(raw) not in (len(sig) - 1, len(sig)):
            raise ParseError(line_no, f"{head} takes 0 or 1 operands")
    elif len(raw) != len(sig):
        raise ParseError(line_no, f"{head} takes {len(sig)} operands, got {len(raw)}")
    args: list = []
    for kind, tok in zip(sig, raw):
        if kind == "R":
            try:
                args.append(Reg(isa.parse_reg(tok)))
            except ValueError:
                raise ParseError(line_no, f"bad register {tok!r}") from None
        elif kind == "RI":
            if tok.startswith("["):
                raise ParseError(line_no, f"{head}: memory operand not allowed here")
            try:
                args.append(Reg(isa.parse_reg(tok)))
            except ValueError:
                args.append(Imm(_parse_int(tok, line_no) & isa.MASK64))
        elif kind == "M":
            args.append(_parse_mem(tok, width, line_no))
        elif kind == "L" or kind == "F":
            args.append(tok)
        elif kind == "C":
            if tok not in isa.CONDS:
                raise ParseError(line_no, f"unknown condition {tok!r}")
            args.append(tok)
        elif kind in ("I", "I?"):
            args.append(Imm(_parse_int(tok, line_no) & isa.MASK64))
        else:  # pragma: no cover
            raise AssertionError(kind)
    if head == "halt" and not raw:
        args.append(Imm(0))
    return Instr(head, tuple(args), site)


# =============================================================================
# Parser
# =============================================================================


def parse_program(text: str) -> Program:
    functions: list[Function] = []
    entry: str | None = None
    secrets: list[tuple[int, int]] = []
    images: list[tuple[int, bytes]] = []

    cur_func: str | None = None
    blocks: list[Block] = []
    cur_label: str | None = None
    cur_instrs: list[Instr] = []
    next_site = 0

    def close_block(line_no: int):
        nonlocal cur_label, cur_instrs
        if cur_label is not None:
            blocks.append(Block(cur_label, tuple(cur_instrs)))
            cur_label, cur_instrs = None, []
        elif cur_instrs:
            raise ParseError(line_no, "instructions before first label")

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".entry"):
            entry = line[len(".entry"):].strip()
            if not entry:
                raise ParseError(line_no, ".entry needs a function name")
        elif line.startswith(".secret"):
            parts = _split_args(line[len(".secret"):])
            if len(parts) != 2:
                raise ParseError(line_no, ".secret ADDR, LEN")
            secrets.append((_parse_int(parts[0], line_no), _parse_int(parts[1], line_no)))
        elif line.startswith(".heap"):
            parts = _split_args(line[len(".heap"):])
            if len(parts) < 2:
                raise ParseError(line_no, ".heap ADDR, LEN, BYTES...")
            addr = _parse_int(parts[0], line_no)
            length = _parse_int(parts[1], line_no)
            byte_toks = " ".join(parts[2:]).split()
            try:
                data = bytes(int(b, 16) for b in byte_toks)
            except ValueError:
                raise ParseError(line_no, "bad hex byte in .heap") from None
            if len(data) != length:
                raise ParseError(line_no, f".heap length {length} != {len(data)} bytes given")
            images.append((addr, data))
        elif line.startswith("func "):
            if cur_func is not None:
                raise ParseError(line_no, "nested func")
            head = line[len("func "):].strip()
            if not head.endswith("{"):
                raise ParseError(line_no, "func NAME {")
            cur_func = head[:-1].strip()
            blocks = []
        elif line == "}":
            if cur_func is None:
                raise ParseError(line_no, "unmatched }")
            close_block(line_no)
            functions.append(Function(cur_func, tuple(blocks)))
            cur_func = None
        elif line.endswith(":") and " " not in line[:-1]:
            if cur_func is None:
                raise ParseError(line_no, "label outside func")
            close_block(line_no)
            cur_label = line[:-1]
        else:
            if cur_func is None:
                raise ParseError(line_no, f"statement outside func: {line!r}")
            if cur_label is None:
                raise ParseError(line_no, "instructions before first label")
            ins = _parse_instr(line, line_no, next_site)
            next_site = max(next_site, ins.site) + 1
            cur_instrs.append(ins)
    if cur_func is not None:
        raise ParseError(len(text.splitlines()), "unterminated func")
    if entry is None:
        raise ParseError(1, "missing .entry")
    return Program(tuple(functions), entry, tuple(secrets), tuple(images))


# =============================================================================
# Printer
# =============================================================================


def _fmt_operand(a) -> str:
    if isinstance(a, (Reg, Imm, Mem)):
        return repr(a)
    return str(a)


def _fmt_instr(ins: Instr, with_sites: bool) -> str:
    op = ins.op
    m = ins.mem()
    if m is not None and m.width != 8:
        op = f"{op}.{m.width}"
    args = ins.args
    if ins.op == "halt" and args == (Imm(0),):
        args = ()
    body = op if not args else f"{op} " + ", ".join(_fmt_operand(a) for a in args)
    return f"{body} @{ins.site}" if with_sites else body


def print_program(p: Program) -> str:
    sites = [ins.site for _, _, ins in p.instructions()]
    with_sites = sites != list(range(len(sites)))
    out: list[str] = [f".entry {p.entry}"]
    for addr, length in p.secret_regions:
        out.append(f".secret 0x{addr:x}, {length}")
    for addr, data in p.heap_images:
        out.append(f".heap 0x{addr:x}, {len(data)}, " + " ".join(f"{b:02x}" for b in data))
    for f in p.functions:
        out.append(f"func {f.name} {{")
        for b in f.blocks:
            out.append(f"{b.label}:")
            for ins in b.instrs:
                out.append("  " + _fmt_instr(ins, with_sites))
        out.append("}")
    return "\n".join(out) + "\n"


# =============================================================================
# Stack slot inference
# =============================================================================


def stack_slots(f: Function) -> dict[int, tuple[int, int]]:
    """slot_id -> (frame offset, size).  Slots are 8-byte cells ordered by
    offset; narrower accesses widen to their containing cell."""
    cells: set[int] = set()
    for b in f.blocks:
        for ins in b.instrs:
            m = ins.mem()
            if m is not None and m.base is None:
                cells.add(m.offset >> 3)
    return {i: (c << 3, 8) for i, c in enumerate(sorted(cells))}


def frame_size(f: Function) -> int:
    slots = stack_slots(f)
    if not slots:
        return 0
    return max(off for off, _ in slots.values()) + 8


# =============================================================================
# Validation
# =============================================================================


def validate(p: Program) -> list[str]:
    """Semantic diagnostics; empty list means the program is well formed."""
    diags: list[str] = []
    names = [f.name for f in p.functions]
    if len(set(names)) != len(names):
        diags.append("duplicate function names")
    if p.entry not in names:
        diags.append(f"entry function {p.entry!r} not defined")

    sites: dict[int, int] = {}
    for f, b, ins in p.instructions():
        sites[ins.site] = sites.get(ins.site, 0) + 1
    for s, n in sorted(sites.items()):
        if n > 1:
            diags.append(f"site id {s} used by {n} instructions")

    for f in p.functions:
        labels = set(f.labels())
        if len(labels) != len(f.blocks):
            diags.append(f"{f.name}: duplicate block labels")
        for b in f.blocks:
            for ins in b.instrs:
                if ins.op == "jmp" and ins.args[0] not in labels:
                    diags.append(f"{f.name}/{b.label}: jmp target {ins.args[0]!r} missing")
                if ins.op == "br_cond" and ins.args[1] not in labels:
                    diags.append(f"{f.name}/{b.label}: branch target {ins.args[1]!r} missing")
                if ins.op == "call" and ins.args[0] not in names:
                    diags.append(f"{f.name}/{b.label}: call target {ins.args[0]!r} missing")
                m = ins.mem()
                if m is not None and m.base is None and m.offset < 0:
                    diags.append(f"{f.name}/{b.label}: negative sp offset {m.offset}")
        # straddling (overlapping) stack accesses
        seen_overlap = False
        for b in f.blocks:
            for ins in b.instrs:
                m = ins.mem()
                if m is not None and m.base is None and (m.offset & 7) + m.width > 8:
                    seen_overlap = True
        if seen_overlap:
            diags.append(f"{f.name}: overlapping stack slots")
    for addr, length in p.secret_regions:
        if isa.region_of(addr) is None or isa.region_of(addr + max(length - 1, 0)) is None:
            diags.append(f"secret region 0x{addr:x}+{length} outside memory")
    for addr, data in p.heap_images:
        if not (isa.HEAP_BASE <= addr and addr + len(data) <= isa.HEAP_BASE + isa.HEAP_SIZE):
            diags.append(f"heap image 0x{addr:x}+{len(data)} outside heap")
    return diags


def renumber_fresh(p: Program) -> int:
    """First site id safely above everything in p."""
    return p.max_site() + 1
