"""Control-flow plumbing: successors, orderings, dominance, loops, liveness.

All analyses are per function and operate on block labels.  The postdominator
computation adds a virtual exit joined from every ret/halt block so that the
immediate postdominator of a branch is defined even when the two arms return
separately.
"""

from __future__ import annotations

from .mir import Function, Instr
from . import isa


def successors(f: Function) -> dict[str, tuple[str, ...]]:
    """Outgoing edges per block.  A br_cond may sit mid-block (its not-taken
    path continues within the block), so every branch target counts, not just
    the final instruction's."""
    order = f.labels()
    nxt = {order[i]: order[i + 1] if i + 1 < len(order) else None for i in range(len(order))}
    succ: dict[str, tuple[str, ...]] = {}
    for b in f.blocks:
        outs: list[str] = []
        for ins in b.instrs[:-1]:
            if ins.op == "br_cond":
                outs.append(ins.args[1])
        last = b.instrs[-1] if b.instrs else None
        if last is None:
            if nxt[b.label]:
                outs.append(nxt[b.label])
        elif last.op == "jmp":
            outs.append(last.args[0])
        elif last.op == "br_cond":
            outs.append(last.args[1])
            if nxt[b.label]:
                outs.append(nxt[b.label])
        elif last.op not in ("ret", "halt"):
            if nxt[b.label]:
                outs.append(nxt[b.label])
        dedup: list[str] = []
        for t in outs:
            if t not in dedup:
                dedup.append(t)
        succ[b.label] = tuple(dedup)
    return succ


def predecessors(f: Function) -> dict[str, tuple[str, ...]]:
    pred: dict[str, list[str]] = {b.label: [] for b in f.blocks}
    for src, outs in successors(f).items():
        for dst in outs:
            pred[dst].append(src)
    return {k: tuple(v) for k, v in pred.items()}


def _postorder(root: str, succ: dict[str, list[str] | tuple[str, ...]]) -> list[str]:
    """Iterative DFS postorder; immune to deep block chains."""
    seen = {root}
    out: list[str] = []
    stack: list[tuple[str, int]] = [(root, 0)]
    while stack:
        node, i = stack[-1]
        outs = succ.get(node, ())
        if i < len(outs):
            stack[-1] = (node, i + 1)
            child = outs[i]
            if child not in seen:
                seen.add(child)
                stack.append((child, 0))
        else:
            out.append(node)
            stack.pop()
    return out


def reverse_postorder(f: Function) -> list[str]:
    if not f.blocks:
        return []
    succ = successors(f)
    post = _postorder(f.blocks[0].label, succ)
    seen = set(post)
    out = list(post)
    # unreachable blocks trail in layout order
    for b in f.blocks:
        if b.label not in seen:
            out.insert(0, b.label)
    out.reverse()
    return out


def _idom(order: list[str], preds: dict[str, tuple[str, ...]], root: str) -> dict[str, str | None]:
    """Cooper-Harvey-Kennedy iterative dominators over an RPO ordering."""
    index = {l: i for i, l in enumerate(order)}
    idom: dict[str, str | None] = {l: None for l in order}
    idom[root] = root

    def intersect(a: str, b: str) -> str:
        while a != b:
            while index[a] > index[b]:
                a = idom[a]  # type: ignore[assignment]
            while index[b] > index[a]:
                b = idom[b]  # type: ignore[assignment]
        return a

    changed = True
    while changed:
        changed = False
        for l in order:
            if l == root:
                continue
            new: str | None = None
            for p in preds.get(l, ()):
                if p in index and idom.get(p) is not None:
                    new = p if new is None else intersect(new, p)
            if new is not None and idom[l] != new:
                idom[l] = new
                changed = True
    idom[root] = None
    return idom


def immediate_postdominators(f: Function) -> dict[str, str | None]:
    """Label -> immediate postdominator label (None for exit blocks and for
    blocks with no path to any exit)."""
    succ = successors(f)
    VIRT = "__exit__"
    # reversed graph: edges flipped, every exit block feeds the virtual exit
    rsucc: dict[str, list[str]] = {l: [] for l in succ}
    rsucc[VIRT] = []
    for l, outs in succ.items():
        if outs:
            for d in outs:
                rsucc[d].append(l)
        else:
            rsucc[VIRT].append(l)
    post = _postorder(VIRT, rsucc)
    seen = set(post)
    order = list(reversed(post))
    # predecessors in the reversed graph = original successors (exit -> VIRT)
    rpreds: dict[str, tuple[str, ...]] = {VIRT: ()}
    for l in succ:
        if l not in seen:
            continue
        outs = succ[l]
        rpreds[l] = tuple(outs) if outs else (VIRT,)
    idom = _idom(order, rpreds, VIRT)
    return {l: (None if idom.get(l) in (None, VIRT) else idom.get(l)) for l in succ}


def instruction_postdominators(ops, fields, lo: int, hi: int) -> dict[int, int | None]:
    """Instruction-granular immediate postdominators over one function's
    encoded index range [lo, hi], virtual exit behind every ret/halt.

    The block-level view above cannot express a br_cond sitting mid-block
    whose fallthrough path leaves the function without rejoining; control
    taint scoping needs the exact rejoin point, so it uses this one.
    """
    from .encode import OP_INDEX
    op_jmp, op_br = OP_INDEX["jmp"], OP_INDEX["br_cond"]
    op_ret, op_halt = OP_INDEX["ret"], OP_INDEX["halt"]
    EXIT = -1
    succ: dict[int, tuple[int, ...]] = {}
    for i in range(lo, hi + 1):
        op = ops[i]
        if op == op_jmp:
            succ[i] = (int(fields[i, 0]),)
        elif op == op_br:
            succ[i] = (int(fields[i, 1]), i + 1)
        elif op == op_ret or op == op_halt:
            succ[i] = ()
        else:
            succ[i] = (i + 1,)
    rsucc: dict[int, list[int]] = {n: [] for n in succ}
    rsucc[EXIT] = []
    for i, outs in succ.items():
        if outs:
            for d in outs:
                rsucc[d].append(i)
        else:
            rsucc[EXIT].append(i)
    order = list(reversed(_postorder(EXIT, rsucc)))
    rpreds: dict[int, tuple[int, ...]] = {EXIT: ()}
    for i, outs in succ.items():
        rpreds[i] = outs if outs else (EXIT,)
    idom = _idom(order, rpreds, EXIT)
    return {i: (None if idom.get(i) in (None, EXIT) else idom.get(i)) for i in succ}


def natural_loops(f: Function) -> list[tuple[str, frozenset[str]]]:
    """(header, body labels) for each natural loop found via back edges."""
    succ = successors(f)
    preds = predecessors(f)
    order = reverse_postorder(f)
    dom = _idom(order, preds, order[0]) if order else {}

    def dominates(a: str, b: str) -> bool:
        while b is not None:
            if a == b:
                return True
            b = dom.get(b)  # type: ignore[assignment]
        return False

    loops: list[tuple[str, frozenset[str]]] = []
    for src, outs in succ.items():
        for dst in outs:
            if dominates(dst, src):
                body = {dst}
                stack = [src]
                while stack:
                    n = stack.pop()
                    if n in body:
                        continue
                    body.add(n)
                    stack.extend(preds.get(n, ()))
                loops.append((dst, frozenset(body)))
    return loops


# =============================================================================
# Register liveness
# =============================================================================


def _uses_defs(ins: Instr) -> tuple[set[int], set[int]]:
    from .mir import Reg, Mem

    uses: set[int] = set()
    defs: set[int] = set()
    for a in ins.args:
        if isinstance(a, Mem) and a.is_reg_based():
            uses.add(a.base)
    op = ins.op
    if op == "load":
        defs.add(ins.args[0].id)
    elif op == "store":
        if isinstance(ins.args[1], Reg):
            uses.add(ins.args[1].id)
    elif op in ("mov", "rdrand", "heap_alloc"):
        defs.add(ins.args[0].id)
        for a in ins.args[1:]:
            if isinstance(a, Reg):
                uses.add(a.id)
    elif op in isa.ALU_OPS:
        uses.add(ins.args[0].id)
        defs.add(ins.args[0].id)
        if isinstance(ins.args[1], Reg):
            uses.add(ins.args[1].id)
    elif op in ("cmp", "test"):
        uses.add(ins.args[0].id)
        if isinstance(ins.args[1], Reg):
            uses.add(ins.args[1].id)
    elif op == "select":
        uses.add(ins.args[0].id)  # keeps its value when the condition fails
        defs.add(ins.args[0].id)
        if isinstance(ins.args[1], Reg):
            uses.add(ins.args[1].id)
    elif op == "saveflags":
        defs.add(isa.FLAGS_HOME)
    elif op == "restoreflags":
        uses.add(isa.FLAGS_HOME)
    elif op == "prf_enc":
        base = (ins.args[0].id - isa.REG_V_BASE) // 2 * 2 + isa.REG_V_BASE
        uses.update({base, base + 1})
        defs.update({base, base + 1})
        for l in isa.AES_STATE_LANES[2:]:
            uses.add(l)
    elif op == "taint_label":
        if isinstance(ins.args[0], Reg):
            uses.add(ins.args[0].id)
    elif op == "ret":
        uses.add(0)  # g0 carries the return value by convention
    elif op == "call":
        uses.update(range(6))  # g0..g5 argument convention
        defs.add(0)
    return uses, defs


def live_out(f: Function) -> dict[str, set[int]]:
    """Label -> set of register ids live at block exit.  Calls conservatively
    use g0..g5 and define g0; everything not in the fixed conventions flows
    through the standard backward dataflow."""
    succ = successors(f)
    gen: dict[str, set[int]] = {}
    kill: dict[str, set[int]] = {}
    for b in f.blocks:
        g: set[int] = set()
        k: set[int] = set()
        for ins in b.instrs:
            uses, defs = _uses_defs(ins)
            g |= uses - k
            k |= defs
        gen[b.label], kill[b.label] = g, k
    lin: dict[str, set[int]] = {b.label: set() for b in f.blocks}
    lout: dict[str, set[int]] = {b.label: set() for b in f.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(f.blocks):
            new_out: set[int] = set()
            for s in succ[b.label]:
                new_out |= lin[s]
            new_in = gen[b.label] | (new_out - kill[b.label])
            if new_out != lout[b.label] or new_in != lin[b.label]:
                lout[b.label], lin[b.label] = new_out, new_in
                changed = True
    return lout


def live_at(f: Function, label: str, index: int) -> set[int]:
    """Registers live just before instruction `index` of block `label`."""
    lout = live_out(f)
    block = next(b for b in f.blocks if b.label == label)
    live = set(lout[label])
    for ins in reversed(block.instrs[index:]):
        uses, defs = _uses_defs(ins)
        live -= defs
        live |= uses
    return live
