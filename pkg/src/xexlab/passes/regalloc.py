"""Secret-aware stack-to-lane promotion.

Stack cells that hold secrets never stop leaking through deterministic
memory encryption, so the strongest fix is to keep them out of memory
entirely.  This pass promotes the busiest sensitive stack slots into
the wide register file's spare lanes: stores become lane writes, loads
become lane reads, and the cell drops out of the ciphertext stream.

Promotion is capped by the lane pool.  Slots are ranked by how many
blocks touch them, lanes are recycled as live ranges close, and any
slot that cannot be promoted (pool exhausted, narrow accesses, a read
that does not start its live range with a dominating store) is left
for the masking pass to wrap.  Nothing is ever silently left raw: the
caller gets the exact residue, and `audit_no_secret_stores` re-checks
the final program by dynamic taint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import cfg, isa, mir
from ..mir import Block, Function, Imm, Instr, Mem, Program, Reg
from ..runtime import RunConfig
from ..taint import SensitiveSites, trace_taint
from .common import MaskError, Rewriter, replace_in_function


@dataclass(frozen=True)
class SlotUsage:
    fn: str
    slot: int
    cell: int
    count: int                       # number of blocks touching the slot
    blocks: tuple[str, ...]          # in reverse postorder
    extended: tuple[str, ...]        # blocks plus enclosing loop bodies


@dataclass(frozen=True)
class StackUsage:
    entries: tuple[SlotUsage, ...]

    def for_function(self, fn: str) -> tuple[SlotUsage, ...]:
        return tuple(e for e in self.entries if e.fn == fn)


def build_stack_usage(p: Program, sites: SensitiveSites) -> StackUsage:
    """Location counts per sensitive stack slot, loop-extended.

    A slot accessed inside a loop keeps its lane for the whole loop, so
    the extent used for lane lifetimes is the access blocks unioned with
    every loop body that contains one of them.
    """
    entries: list[SlotUsage] = []
    for f in p.functions:
        slot_ids = sites.slots_of(f.name)
        if not slot_ids:
            continue
        cells = mir.stack_slots(f)
        loops = cfg.natural_loops(f)
        rpo = cfg.reverse_postorder(f)
        pos = {label: i for i, label in enumerate(rpo)}
        for sid in slot_ids:
            if sid not in cells:
                continue
            cell = cells[sid][0]
            touched: set[str] = set()
            for b in f.blocks:
                for ins in b.instrs:
                    m = ins.mem()
                    if m is not None and m.base is None and (m.offset & ~7) == cell:
                        touched.add(b.label)
            ext = set(touched)
            changed = True
            while changed:
                changed = False
                for _, body in loops:
                    if ext & body and not body <= ext:
                        ext |= body
                        changed = True
            ordered = tuple(sorted(touched, key=lambda l: pos.get(l, 1 << 30)))
            extended = tuple(sorted(ext, key=lambda l: pos.get(l, 1 << 30)))
            entries.append(SlotUsage(f.name, sid, cell, len(touched),
                                     ordered, extended))
    return StackUsage(tuple(entries))


def select_stack_opt(usage: StackUsage | tuple[SlotUsage, ...],
                     cap: int = len(isa.S2_LANE_POOL)) -> tuple[SlotUsage, ...]:
    """Rank by descending location count, ties by ascending slot id."""
    entries = usage.entries if isinstance(usage, StackUsage) else tuple(usage)
    ranked = sorted(entries, key=lambda e: (-e.count, e.slot))
    return tuple(ranked[:cap])


@dataclass(frozen=True)
class Promotion:
    fn: str
    slot: int
    cell: int
    lane: int
    span: tuple[str, ...]            # blocks whose accesses were rewritten
    rewritten_sites: tuple[int, ...]


@dataclass
class RegallocPlan:
    promoted: tuple[Promotion, ...] = ()
    residual_slots: tuple[tuple[str, int, str], ...] = ()   # (fn, slot, reason)
    residual_sites: tuple[int, ...] = ()
    pool_by_fn: dict[str, tuple[int, ...]] = field(default_factory=dict)
    lane_peak: dict[str, int] = field(default_factory=dict)

    def report(self) -> dict:
        """Allocation report: who got a lane, over what range, who fell
        back to masking and why."""
        return {
            "schema": "xexlab-alloc/1",
            "promoted": [
                {"fn": pr.fn, "slot": pr.slot, "cell": pr.cell,
                 "lane": isa.reg_name(pr.lane), "blocks": list(pr.span),
                 "sites": list(pr.rewritten_sites)}
                for pr in self.promoted
            ],
            "residual": [
                {"fn": fn, "slot": slot, "reason": reason}
                for fn, slot, reason in self.residual_slots
            ],
            "lane_peak": dict(self.lane_peak),
            "pool": {fn: [isa.reg_name(r) for r in pool]
                     for fn, pool in self.pool_by_fn.items()},
        }

    def to_dict(self) -> dict:
        return {
            "promoted": [
                {"fn": pr.fn, "slot": pr.slot, "cell": pr.cell, "lane": pr.lane,
                 "span": list(pr.span), "sites": list(pr.rewritten_sites)}
                for pr in self.promoted
            ],
            "residual_slots": [list(t) for t in self.residual_slots],
            "residual_sites": list(self.residual_sites),
            "pool_by_fn": {fn: list(v) for fn, v in self.pool_by_fn.items()},
            "lane_peak": dict(self.lane_peak),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegallocPlan":
        return cls(
            promoted=tuple(
                Promotion(e["fn"], e["slot"], e["cell"], e["lane"],
                          tuple(e["span"]), tuple(e["sites"]))
                for e in d["promoted"]),
            residual_slots=tuple((a, b, c) for a, b, c in d["residual_slots"]),
            residual_sites=tuple(d["residual_sites"]),
            pool_by_fn={fn: tuple(v) for fn, v in d["pool_by_fn"].items()},
            lane_peak=dict(d["lane_peak"]),
        )


def _dominators(f: Function) -> dict[str, set[str]]:
    rpo = cfg.reverse_postorder(f)
    preds = cfg.predecessors(f)
    idom = cfg._idom(rpo, preds, f.blocks[0].label)
    doms: dict[str, set[str]] = {}

    def chain(label: str) -> set[str]:
        if label in doms:
            return doms[label]
        out = {label}
        d = idom.get(label)
        if d is not None and d != label:
            out |= chain(d)
        doms[label] = out
        return out

    for b in f.blocks:
        chain(b.label)
    return doms


def _call_graph_order(p: Program) -> list[str]:
    """Callers before callees; ancestor lane sets must be subtracted."""
    order: list[str] = []
    seen: set[str] = set()

    def visit(fn: str) -> None:
        if fn in seen:
            return
        seen.add(fn)
        order.append(fn)
        f = p.function(fn)
        for b in f.blocks:
            for ins in b.instrs:
                if ins.op == "call":
                    visit(ins.args[0])

    visit(p.entry)
    for f in p.functions:
        visit(f.name)
    return order


def _callees(p: Program, fn: str) -> set[str]:
    out: set[str] = set()
    work = [fn]
    while work:
        cur = work.pop()
        for b in p.function(cur).blocks:
            for ins in b.instrs:
                if ins.op == "call" and ins.args[0] not in out:
                    out.add(ins.args[0])
                    work.append(ins.args[0])
    return out


def allocate_rewrite(p: Program, sites: SensitiveSites, *,
                     pool: tuple[int, ...] = isa.S2_LANE_POOL,
                     reserved: tuple[int, ...] = (),
                     rw: Rewriter | None = None) -> tuple[Program, RegallocPlan]:
    """Promote sensitive stack slots to lanes and rewrite their traffic.

    Heap traffic is never promoted here; its site ids come back in
    `residual_sites` together with any slot the allocator had to give
    up on, and the caller routes that residue to masking or diversion.
    """
    rw = rw or Rewriter(p)
    usage = build_stack_usage(p, sites)
    used_lanes = {
        r for r in _lanes_in_use(p) if r in pool}
    base_pool = tuple(r for r in pool if r not in reserved and r not in used_lanes)

    order = _call_graph_order(p)
    assigned: dict[str, set[int]] = {}
    promotions: list[Promotion] = []
    residual_slots: list[tuple[str, int, str]] = []
    pool_by_fn: dict[str, tuple[int, ...]] = {}
    lane_peak: dict[str, int] = {}
    out = p

    for fn in order:
        entries = usage.for_function(fn)
        if not entries:
            continue
        taken: set[int] = set()
        for other, lanes in assigned.items():
            if fn in _callees(p, other) or other == fn:
                taken |= lanes
        fn_pool = tuple(r for r in base_pool if r not in taken)
        pool_by_fn[fn] = fn_pool
        got = _allocate_function(out, p.function(fn), entries, fn_pool, rw)
        out = got.program
        promotions.extend(got.promoted)
        residual_slots.extend(got.residual)
        assigned[fn] = {pr.lane for pr in got.promoted}
        lane_peak[fn] = got.peak

    # residue: unpromoted stack sites plus every heap site
    promoted_sites: set[int] = set()
    for pr in promotions:
        promoted_sites.update(pr.rewritten_sites)
    residual_ids: set[int] = set()
    for f in p.functions:
        for b in f.blocks:
            for ins in b.instrs:
                sid = ins.site
                if sid not in set(sites.stores) | set(sites.loads):
                    continue
                if sid in promoted_sites:
                    continue
                residual_ids.add(int(sid))

    plan = RegallocPlan(
        promoted=tuple(promotions),
        residual_slots=tuple(residual_slots),
        residual_sites=tuple(sorted(residual_ids)),
        pool_by_fn=pool_by_fn,
        lane_peak=lane_peak,
    )
    diags = mir.validate(out)
    if diags:
        raise MaskError("regalloc produced invalid program: " + "; ".join(diags))
    return out, plan


def _lanes_in_use(p: Program) -> set[int]:
    used: set[int] = set()
    for _, _, ins in p.instructions():
        for a in ins.args:
            if isinstance(a, Reg) and a.id >= isa.REG_V_BASE:
                used.add(a.id)
            elif isinstance(a, Mem) and a.is_reg_based() and a.base >= isa.REG_V_BASE:
                used.add(a.base)
    return used


@dataclass
class _FnResult:
    program: Program
    promoted: list[Promotion]
    residual: list[tuple[str, int, str]]
    peak: int


def _allocate_function(out: Program, f: Function, entries: tuple[SlotUsage, ...],
                       fn_pool: tuple[int, ...], rw: Rewriter) -> _FnResult:
    rpo = cfg.reverse_postorder(f)
    pos = {label: i for i, label in enumerate(rpo)}
    doms = _dominators(f)

    # eligibility: whole-cell accesses only, and the first access must be
    # a store in a block dominating every other access block, otherwise a
    # rewritten read could see a lane nothing has written yet
    candidates: list[SlotUsage] = []
    residual: list[tuple[str, int, str]] = []
    first_store_block: dict[int, str] = {}
    for e in entries:
        ok = True
        reason = ""
        first_block = None
        for label in e.extended:
            block = next(b for b in f.blocks if b.label == label)
            for ins in block.instrs:
                m = ins.mem()
                if m is None or m.base is not None or (m.offset & ~7) != e.cell:
                    continue
                if m.width != 8 or (m.offset & 7):
                    ok, reason = False, "narrow access"
                    break
                if first_block is None:
                    if ins.op != "store":
                        ok, reason = False, "read before first store"
                    first_block = label
            if not ok:
                break
        if ok and first_block is None:
            ok, reason = False, "no accesses in span"
        if ok:
            for label in e.blocks:
                if first_block not in doms.get(label, set()):
                    ok, reason = False, "first store does not dominate uses"
                    break
        if ok:
            candidates.append(e)
            first_store_block[e.slot] = first_block
        else:
            residual.append((e.fn, e.slot, reason))

    end_pos: dict[int, int] = {}          # slot -> last rpo position of extent
    start_pos: dict[int, int] = {}
    reachable: list[SlotUsage] = []
    for e in candidates:
        spans = [pos[l] for l in e.extended if l in pos]
        if first_store_block[e.slot] not in pos or not spans:
            residual.append((e.fn, e.slot, "unreachable blocks"))
            continue
        start_pos[e.slot] = pos[first_store_block[e.slot]]
        end_pos[e.slot] = max(spans)
        reachable.append(e)
    candidates = reachable

    admitted = list(select_stack_opt(StackUsage(tuple(candidates)),
                                     cap=len(fn_pool)))
    waiting = [e for e in sorted(candidates, key=lambda e: (-e.count, e.slot))
               if e not in admitted]

    free = list(fn_pool)
    bound: dict[int, int] = {}            # slot -> lane

    promoted: list[Promotion] = []
    peak = 0
    admitted_slots = {e.slot for e in admitted}
    by_slot = {e.slot: e for e in candidates}
    release_at: dict[int, list[int]] = {}
    for label in rpo:
        here = pos[label]
        # bind slots whose dominating store block this is
        starters = [s for s in sorted(admitted_slots,
                                      key=lambda s: (-by_slot[s].count, s))
                    if start_pos[s] == here and s not in bound]
        for s in starters:
            if not free:
                residual.append((f.name, s, "lane pool exhausted"))
                admitted_slots.discard(s)
                continue
            lane = free.pop(0)
            bound[s] = lane
            release_at.setdefault(end_pos[s], []).append(s)
        peak = max(peak, len(bound))
        for s in release_at.get(here, ()):
            lane = bound[s]
            e = by_slot[s]
            sites_rw = _rewrite_slot(out, f, e, lane, rw)
            out = sites_rw[0]
            promoted.append(Promotion(f.name, s, e.cell, lane, e.extended,
                                      sites_rw[1]))
            del bound[s]
            free.append(lane)
            # lane freed: promote the next-largest waiting slot whose
            # range has not already begun
            while waiting:
                nxt = waiting.pop(0)
                if start_pos[nxt.slot] > here:
                    admitted_slots.add(nxt.slot)
                    break
                residual.append((f.name, nxt.slot, "window passed"))
    # anything admitted but never bound (start position unreachable)
    for s in admitted_slots:
        if s not in {pr.slot for pr in promoted} and s not in bound:
            if not any(r[1] == s for r in residual):
                residual.append((f.name, s, "never bound"))
    for e in waiting:
        residual.append((f.name, e.slot, "not selected"))
    return _FnResult(out, promoted, residual, peak)


def _rewrite_slot(out: Program, f: Function, e: SlotUsage, lane: int,
                  rw: Rewriter) -> tuple[Program, tuple[int, ...]]:
    repl: dict[tuple[str, int], list[Instr]] = {}
    rewritten: list[int] = []
    cur = out.function(f.name)
    for label in e.extended:
        block = next(b for b in cur.blocks if b.label == label)
        for i, ins in enumerate(block.instrs):
            m = ins.mem()
            if m is None or m.base is not None or (m.offset & ~7) != e.cell:
                continue
            if ins.op == "store":
                repl[(label, i)] = [Instr("mov", (Reg(lane), ins.args[1]), ins.site)]
            else:
                repl[(label, i)] = [Instr("mov", (ins.args[0], Reg(lane)), ins.site)]
            rewritten.append(int(ins.site))
    return replace_in_function(out, f.name, repl), tuple(rewritten)


def audit_no_secret_stores(p: Program, inputs_list=None, *,
                           sanctioned: frozenset[int] = frozenset(),
                           config: RunConfig | None = None) -> list[tuple[int, int, int]]:
    """Dynamic re-check: run taint on the final program and report every
    tainted store that is not a sanctioned macro store.  Clean hardening
    returns an empty list."""
    violations: list[tuple[int, int, int]] = []
    for inputs in (inputs_list or [None]):
        run = trace_taint(p, inputs, config, sanctioned_sites=sanctioned)
        violations.extend(run.violations)
    return violations
