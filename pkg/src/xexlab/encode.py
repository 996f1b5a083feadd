"""Program flattening: resolve labels and pack instructions into flat arrays.

Both engines (pure Python and compiled) execute the same encoded form: one
flat instruction stream with numeric operand fields, branch targets resolved
to instruction indices, and call sites annotated with the callee's entry
index and frame size.  Field meanings per opcode:

    load        f0=dst  f1=base(-1 sp)  f2=offset  f3=width
    store       f0=base(-1 sp)  f1=offset  f2=width  f3=src-is-imm  f4=src
    mov/alu/cmp/test/heap_alloc
                f0=dst  f1=src-is-imm  f2=src
    select      f0=dst  f1=src-is-imm  f2=src  f3=cond
    jmp         f0=target-index
    br_cond     f0=cond  f1=target-index          (fallthrough is i+1)
    call        f0=callee-entry-index  f1=callee-frame-size
    rdrand/prf_enc
                f0=dst
    taint_label f0=base-is-imm  f1=base  f2=length
    halt        f0=code
    ret/saveflags/restoreflags  (no fields)

Falling off the end of a function is an encode-time error; the parser leaves
that to us because rewriting passes build programs directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import isa
from .mir import Imm, Instr, Mem, Program, Reg

OP_INDEX = {name: i for i, name in enumerate(isa.OPCODES)}
COND_INDEX = {name: i for i, name in enumerate(isa.CONDS)}

NUM_FIELDS = 5


class EncodeError(ValueError):
    pass


@dataclass
class EncodedProgram:
    ops: np.ndarray            # int16[n]
    fields: np.ndarray         # int64[n, NUM_FIELDS]
    sites: np.ndarray          # int64[n]
    entry_index: int
    entry_frame: int
    heap_start: int            # bump allocator origin (past static images)
    heap_images: tuple[tuple[int, bytes], ...]
    # metadata for diagnostics and reverse mapping
    index_of_site: dict[int, int]
    func_of_index: tuple[str, ...]
    label_index: dict[tuple[str, str], int]   # (func, label) -> instr index
    func_frames: dict[str, int]

    def __len__(self) -> int:
        return len(self.ops)


def _ri(arg) -> tuple[int, int]:
    if isinstance(arg, Reg):
        return 0, arg.id
    if isinstance(arg, Imm):
        return 1, arg.value
    raise EncodeError(f"expected register or immediate, got {arg!r}")


def encode_program(p: Program, frame_sizes: dict[str, int] | None = None) -> EncodedProgram:
    """Flatten `p`.  `frame_sizes` overrides inferred frames (used by passes
    that add slots without touching every function)."""
    from .mir import frame_size as infer_frame

    frames = {f.name: infer_frame(f) for f in p.functions}
    if frame_sizes:
        frames.update(frame_sizes)

    # first pass: index layout
    label_index: dict[tuple[str, str], int] = {}
    func_entry: dict[str, int] = {}
    n = 0
    for f in p.functions:
        if not f.blocks:
            raise EncodeError(f"{f.name}: empty function")
        func_entry[f.name] = n
        for b in f.blocks:
            label_index[(f.name, b.label)] = n
            n += len(b.instrs)
        last = f.blocks[-1]
        if not last.instrs or last.instrs[-1].op not in ("ret", "halt", "jmp"):
            raise EncodeError(f"{f.name}: control falls off the end")
    if p.entry not in func_entry:
        raise EncodeError(f"entry function {p.entry!r} missing")

    ops = np.zeros(n, dtype=np.int16)
    fields = np.zeros((n, NUM_FIELDS), dtype=np.int64)
    sites = np.zeros(n, dtype=np.int64)
    func_of_index: list[str] = []
    index_of_site: dict[int, int] = {}

    i = 0
    for f in p.functions:
        for b in f.blocks:
            for ins in b.instrs:
                _encode_one(ins, i, f.name, ops, fields, label_index, func_entry, frames)
                sites[i] = ins.site
                index_of_site[ins.site] = i
                func_of_index.append(f.name)
                i += 1

    heap_end = isa.HEAP_BASE
    for addr, data in p.heap_images:
        heap_end = max(heap_end, addr + len(data))
    heap_start = (heap_end + 15) & ~15

    return EncodedProgram(
        ops=ops,
        fields=fields,
        sites=sites,
        entry_index=func_entry[p.entry],
        entry_frame=frames[p.entry],
        heap_start=heap_start,
        heap_images=p.heap_images,
        index_of_site=index_of_site,
        func_of_index=tuple(func_of_index),
        label_index=label_index,
        func_frames=dict(frames),
    )


def _encode_one(ins: Instr, i: int, fname: str,
                ops: np.ndarray, fields: np.ndarray,
                label_index: dict, func_entry: dict, frames: dict) -> None:
    op = ins.op
    ops[i] = OP_INDEX[op]
    F = fields[i]
    u64 = lambda v: np.int64(np.uint64(v & isa.MASK64))
    if op == "load":
        dst, m = ins.args
        F[0] = dst.id
        F[1] = -1 if m.base is None else m.base
        F[2] = m.offset
        F[3] = m.width
    elif op == "store":
        m, src = ins.args
        F[0] = -1 if m.base is None else m.base
        F[1] = m.offset
        F[2] = m.width
        k, v = _ri(src)
        F[3] = k
        F[4] = u64(v) if k else v
    elif op in ("mov", "cmp", "test", "heap_alloc") or op in isa.ALU_OPS:
        dst, src = ins.args
        F[0] = dst.id
        k, v = _ri(src)
        F[1] = k
        F[2] = u64(v) if k else v
    elif op == "select":
        dst, src, cond = ins.args
        F[0] = dst.id
        k, v = _ri(src)
        F[1] = k
        F[2] = u64(v) if k else v
        F[3] = COND_INDEX[cond]
    elif op == "jmp":
        key = (fname, ins.args[0])
        if key not in label_index:
            raise EncodeError(f"{fname}: jmp to unknown label {ins.args[0]!r}")
        F[0] = label_index[key]
    elif op == "br_cond":
        cond, label = ins.args
        key = (fname, label)
        if key not in label_index:
            raise EncodeError(f"{fname}: branch to unknown label {label!r}")
        F[0] = COND_INDEX[cond]
        F[1] = label_index[key]
    elif op == "call":
        callee = ins.args[0]
        if callee not in func_entry:
            raise EncodeError(f"{fname}: call to unknown function {callee!r}")
        F[0] = func_entry[callee]
        F[1] = frames[callee]
    elif op in ("rdrand", "prf_enc"):
        F[0] = ins.args[0].id
    elif op == "taint_label":
        k, v = _ri(ins.args[0])
        F[0] = k
        F[1] = u64(v) if k else v
        F[2] = ins.args[1].value
    elif op == "halt":
        F[0] = ins.args[0].value if ins.args else 0
    elif op in ("ret", "saveflags", "restoreflags"):
        pass
    else:  # pragma: no cover
        raise EncodeError(f"cannot encode {op}")
