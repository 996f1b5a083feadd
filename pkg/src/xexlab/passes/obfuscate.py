"""Diversion rewriting: secret heap traffic splits across paired cells.

Every protected 16-byte block owns a hashed twin entry inside the
SecureBuffer.  A fixed parity of the accessed address decides which of the
two homes carries the true value; the other one absorbs a fresh decoy on
every write.  Both ciphertext blocks therefore change on every protected
store, and a watcher diffing ciphertext deltas cannot tell the carrier
from the chaff.

The pairing is asymmetric on purpose.  The low half of a block keeps its
truth in the buffer entry and leaves a decoy at home; the high half stays
home and plants its decoy in the entry.  No 16-byte block on either side
ever holds two true halves, so block-granular collision tests only ever
see mixed blocks.

Pre-imaged data (inputs and images the loader placed at their original
addresses) must reach the buffer before the first diverted read.  The
entry prologue walks each protected region once, copies the low halves
over, papers the vacated cells with decoys, and then clears the flags
back to their start-of-program state.

Stack traffic is out of scope here: sp-relative sites are left alone for
the masking pass (or a promotion pass) to handle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import cfg, isa, mir, nonces
from ..mir import Block, Function, Imm, Instr, Mem, Program, Reg
from ..taint import SensitiveSites
from .common import (FrameLayout, MaskError, Rewriter, acquire_scratch,
                     ceil16, emit_addr, evict_reserved, replace_in_function)

ROLLER = isa.DECOY_LANE
BLOCK_KEY_MASK = nonces.ADDR_MASK & ~0xF    # block base inside the 1 MiB window


class ObfError(MaskError):
    """The diversion pass cannot rewrite the program as asked."""


def static_truth_addr(addr: int) -> int:
    """Truth home of a byte address known at rewrite time."""
    return nonces.secure_truth_addr(addr & ~7) + (addr & 7)


def static_decoy_addr(addr: int) -> int:
    """Decoy home of a byte address known at rewrite time."""
    return nonces.secure_decoy_addr(addr & ~7) + (addr & 7)


@dataclass(frozen=True)
class ObfSite:
    """One diverted access, with the macro's load-bearing instructions
    named by site id so audits and fault injection can find them.

    `static` marks accesses whose address was a compile-time constant:
    both homes are folded into the instruction stream and the runtime
    parity dispatch disappears."""

    site: int
    kind: str                  # "load" | "store"
    fn: str
    span: tuple[int, ...]
    roles: dict[str, int]
    static: bool = False

    def to_dict(self) -> dict:
        return {"site": self.site, "kind": self.kind, "fn": self.fn,
                "span": list(self.span), "roles": dict(self.roles),
                "static": self.static}

    @classmethod
    def from_dict(cls, d: dict) -> "ObfSite":
        return cls(site=d["site"], kind=d["kind"], fn=d["fn"],
                   span=tuple(d["span"]), roles=dict(d["roles"]),
                   static=d.get("static", False))


@dataclass
class ObfPlan:
    sites: tuple[ObfSite, ...] = ()
    migrated: tuple[tuple[int, int], ...] = ()    # block-widened (base, len)
    prologue: tuple[int, ...] = ()                # every prologue instruction
    migration_stores: tuple[int, ...] = ()        # the truth copies within it
    moved_lanes: dict[int, int] = field(default_factory=dict)
    spill_sites: tuple[int, ...] = ()
    seed_index: int = 0                           # roller's RandomNonceBuffer entry

    @property
    def sanctioned_sites(self) -> frozenset[int]:
        ids: set[int] = set(self.migration_stores) | set(self.spill_sites)
        for s in self.sites:
            if "truth_store" in s.roles:
                ids.add(s.roles["truth_store"])
        return frozenset(ids)

    def site_for(self, site_id: int) -> ObfSite | None:
        for s in self.sites:
            if s.site == site_id:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "sites": [s.to_dict() for s in self.sites],
            "migrated": [list(r) for r in self.migrated],
            "prologue": list(self.prologue),
            "migration_stores": list(self.migration_stores),
            "moved_lanes": {str(k): v for k, v in self.moved_lanes.items()},
            "spill_sites": list(self.spill_sites),
            "seed_index": self.seed_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObfPlan":
        return cls(
            sites=tuple(ObfSite.from_dict(s) for s in d["sites"]),
            migrated=tuple((r[0], r[1]) for r in d["migrated"]),
            prologue=tuple(d["prologue"]),
            migration_stores=tuple(d["migration_stores"]),
            moved_lanes={int(k): v for k, v in d["moved_lanes"].items()},
            spill_sites=tuple(d["spill_sites"]),
            seed_index=d.get("seed_index", 0),
        )


@dataclass
class _Site:
    site: int
    fn: str
    label: str
    idx: int
    ins: Instr
    kind: str


def _classify(p: Program, targets: set[int]) -> dict[str, list[_Site]]:
    per_fn: dict[str, list[_Site]] = {}
    for f in p.functions:
        found: list[_Site] = []
        for b in f.blocks:
            for i, ins in enumerate(b.instrs):
                if ins.site not in targets:
                    continue
                if ins.op not in ("load", "store"):
                    raise ObfError(
                        f"sensitive site {ins.site} is a {ins.op}, not a memory access")
                m = ins.mem()
                if m.base is None:
                    continue    # stack cells are another pass's business
                if m.base == isa.ABS:
                    lo = m.offset
                    if not (isa.HEAP_BASE <= lo and lo + m.width <= isa.HEAP_BASE + isa.HEAP_SIZE):
                        raise ObfError(
                            f"site {ins.site}: diverted access outside the heap")
                    if (lo & 7) + m.width > 8:
                        raise ObfError(
                            f"site {ins.site}: access straddles a block half")
                elif m.width != 8:
                    # a runtime address gives no static alignment proof, so a
                    # narrow access could straddle the parity boundary
                    raise ObfError(
                        f"site {ins.site}: narrow access at a runtime address")
                found.append(_Site(ins.site, f.name, b.label, i, ins, ins.op))
        if found:
            per_fn[f.name] = found
    return per_fn


def _blocks_of(regions) -> tuple[tuple[int, int], ...]:
    """Widen byte regions to whole 16-byte blocks and merge them."""
    spans = sorted((base & ~0xF, ceil16(base + ln)) for base, ln in regions)
    out: list[list[int]] = []
    for lo, hi in spans:
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return tuple((lo, hi - lo) for lo, hi in out)


def _guard_static_accesses(p: Program, targets: set[int],
                           migrated: tuple[tuple[int, int], ...]) -> None:
    """Fail closed on raw traffic into diverted or reserved territory.

    After migration the original low cells hold decoys, so any access not
    going through a macro would read chaff or corrupt a truth cell.  Only
    statically addressed instructions can be checked here; register-based
    strays surface later as trace divergence.
    """
    sb_lo = isa.SECURE_BUF_BASE
    sb_hi = sb_lo + isa.SECURE_BUF_SIZE
    for f in p.functions:
        for b in f.blocks:
            for ins in b.instrs:
                if ins.op not in ("load", "store"):
                    continue
                m = ins.mem()
                if m.base != isa.ABS:
                    continue
                lo, hi = m.offset, m.offset + m.width
                if sb_lo < hi and lo < sb_hi:
                    raise ObfError(
                        f"site {ins.site}: program addresses the SecureBuffer directly")
                if ins.site in targets:
                    continue
                for base, ln in migrated:
                    if base < hi and lo < base + ln:
                        raise ObfError(
                            f"site {ins.site}: unprotected access into diverted "
                            f"block {base:#x}")


class _Emitter:
    def __init__(self, p: Program, rw: Rewriter, layouts: dict[str, FrameLayout]):
        self.p = p
        self.rw = rw
        self.layouts = layouts
        self.records: list[ObfSite] = []
        self.spill_sites: list[int] = []
        self.spilled_fns: set[str] = set()

    def _scratch(self, s: _Site, need: int):
        excl: set[int] = set()
        for a in s.ins.args:
            if isinstance(a, Reg) and 0 <= a.id < isa.NUM_GENERAL:
                excl.add(a.id)
            if isinstance(a, Mem) and a.base is not None and a.base >= 0:
                excl.add(a.base)
        sc = acquire_scratch(self.rw, self.p.function(s.fn), s.label, s.idx,
                             need, excl, self.layouts[s.fn])
        if sc.pre:
            self.spill_sites.extend(i.site for i in sc.pre + sc.post)
            self.spilled_fns.add(s.fn)
        return sc

    # the address dance: st ends up holding the truth address, sa the decoy
    # address.  Parity comes from bit 3; select keeps its destination when
    # the condition fails, which is what makes the two-select swap work.
    def _dispatch(self, m: Mem, sa: int, si: int, st: int,
                  roles: dict[str, int]) -> list[Instr]:
        rw = self.rw
        seq = emit_addr(rw, sa, m)
        seq += [
            rw.ins("mov", Reg(si), Reg(sa)),
            rw.ins("and", Reg(si), Imm(BLOCK_KEY_MASK)),
            rw.ins("mul", Reg(si), Imm(nonces.HASH_MULT)),
            rw.ins("shr", Reg(si), Imm(nonces.HASH_SHIFT)),
            rw.ins("shl", Reg(si), Imm(4)),
            rw.ins("add", Reg(si), Imm(isa.SECURE_BUF_BASE)),
            rw.ins("mov", Reg(st), Reg(sa)),
            rw.ins("and", Reg(st), Imm(0xF)),
            rw.ins("add", Reg(si), Reg(st)),
            rw.ins("and", Reg(st), Imm(8)),
            rw.ins("cmp", Reg(st), Imm(8)),
        ]
        pick = rw.ins("mov", Reg(st), Reg(si))
        tsel = rw.ins("select", Reg(st), Reg(sa), "eq")
        dsel = rw.ins("select", Reg(sa), Reg(si), "eq")
        roles["select_truth"] = tsel.site
        roles["select_decoy"] = dsel.site
        seq += [pick, tsel, dsel]
        return seq

    def emit_load(self, s: _Site) -> dict[tuple[str, int], list[Instr]]:
        rw = self.rw
        m = s.ins.mem()
        dst = s.ins.args[0]
        if m.base == isa.ABS:
            # constant address: the dispatch folds away entirely
            t = static_truth_addr(m.offset)
            tload = Instr("load", (dst, Mem(isa.ABS, t, m.width)), s.ins.site)
            self.records.append(ObfSite(
                site=s.site, kind="load", fn=s.fn, span=(s.ins.site,),
                roles={"truth_load": s.ins.site}, static=True))
            return {(s.label, s.idx): [tload]}
        roles: dict[str, int] = {}
        sc = self._scratch(s, 3)
        sa, si, st = sc.regs
        save = rw.ins("saveflags")
        seq = list(sc.pre) + [save]
        seq += self._dispatch(m, sa, si, st, roles)
        tload = Instr("load", (dst, Mem(st, 0, m.width)), s.ins.site)
        rest = rw.ins("restoreflags")
        seq += [tload, rest] + list(sc.post)
        roles.update(saveflags=save.site, restoreflags=rest.site,
                     truth_load=s.ins.site)
        self.records.append(ObfSite(site=s.site, kind="load", fn=s.fn,
                                    span=tuple(i.site for i in seq),
                                    roles=roles))
        return {(s.label, s.idx): seq}

    def emit_store(self, s: _Site) -> dict[tuple[str, int], list[Instr]]:
        rw = self.rw
        m = s.ins.mem()
        src = s.ins.args[1]
        if m.base == isa.ABS:
            t = static_truth_addr(m.offset)
            d = static_decoy_addr(m.offset)
            save = rw.ins("saveflags")
            roll = rw.ins("add", Reg(ROLLER), Imm(nonces.NONCE_INCREMENT))
            tstore = Instr("store", (Mem(isa.ABS, t, m.width), src), s.ins.site)
            dstore = rw.ins("store", Mem(isa.ABS, d, m.width), Reg(ROLLER))
            rest = rw.ins("restoreflags")
            seq = [save, roll, tstore, dstore, rest]
            roles = {"saveflags": save.site, "restoreflags": rest.site,
                     "roller_update": roll.site, "truth_store": s.ins.site,
                     "decoy_store": dstore.site}
            self.records.append(ObfSite(
                site=s.site, kind="store", fn=s.fn,
                span=tuple(i.site for i in seq), roles=roles, static=True))
            return {(s.label, s.idx): seq}
        roles: dict[str, int] = {}
        sc = self._scratch(s, 3)
        sa, si, st = sc.regs
        save = rw.ins("saveflags")
        seq = list(sc.pre) + [save]
        seq += self._dispatch(m, sa, si, st, roles)
        roll = rw.ins("add", Reg(ROLLER), Imm(nonces.NONCE_INCREMENT))
        tstore = Instr("store", (Mem(st, 0, m.width), src), s.ins.site)
        dstore = rw.ins("store", Mem(sa, 0, m.width), Reg(ROLLER))
        rest = rw.ins("restoreflags")
        seq += [roll, tstore, dstore, rest] + list(sc.post)
        roles.update(saveflags=save.site, restoreflags=rest.site,
                     roller_update=roll.site, truth_store=s.ins.site,
                     decoy_store=dstore.site)
        self.records.append(ObfSite(site=s.site, kind="store", fn=s.fn,
                                    span=tuple(i.site for i in seq),
                                    roles=roles))
        return {(s.label, s.idx): seq}


def _prologue_blocks(rw: Rewriter, entry_fn: Function,
                     migrated: tuple[tuple[int, int], ...],
                     seed_index: int) -> tuple[list[Block], list[int], list[int]]:
    """Build the entry prologue: roller seeding, one migration loop per
    region, and a flags reset so the original entry code still starts
    from the clear state."""
    live = cfg.live_at(entry_fn, entry_fn.blocks[0].label, 0)
    dead = [r for r in range(isa.NUM_GENERAL - 1, -1, -1)
            if r not in live and r != isa.FLAGS_HOME]
    if len(dead) < 3:
        raise ObfError("no free registers for the migration prologue")
    sa, sv, si = dead[:3]

    blocks: list[Block] = []
    all_ids: list[int] = []
    truth_ids: list[int] = []

    head: list[Instr] = [
        rw.ins("load", Reg(ROLLER),
               Mem(isa.ABS, isa.RAND_BUF_BASE + 8 * seed_index)),
    ]
    for k, (base, ln) in enumerate(migrated):
        head.append(rw.ins("mov", Reg(sa), Imm(base)))
        blocks.append(Block(f"__obf_mig{k}" if k else "__obf_init", tuple(head)))
        truth = rw.ins("store", Mem(si, 0), Reg(sv))
        decoy = rw.ins("store", Mem(sa, 0), Reg(ROLLER))
        body = [
            rw.ins("load", Reg(sv), Mem(sa, 0)),
            rw.ins("mov", Reg(si), Reg(sa)),
            rw.ins("and", Reg(si), Imm(BLOCK_KEY_MASK)),
            rw.ins("mul", Reg(si), Imm(nonces.HASH_MULT)),
            rw.ins("shr", Reg(si), Imm(nonces.HASH_SHIFT)),
            rw.ins("shl", Reg(si), Imm(4)),
            rw.ins("add", Reg(si), Imm(isa.SECURE_BUF_BASE)),
            truth,
            rw.ins("add", Reg(ROLLER), Imm(nonces.NONCE_INCREMENT)),
            decoy,
            rw.ins("add", Reg(sa), Imm(16)),
            rw.ins("cmp", Reg(sa), Imm(base + ln)),
            rw.ins("br_cond", "ult", f"__obf_copy{k}"),
        ]
        blocks.append(Block(f"__obf_copy{k}", tuple(body)))
        truth_ids.append(truth.site)
        head = []
    tail = list(head)    # no regions: just the roller seed
    tail += [rw.ins("mov", Reg(sv), Imm(2)),
             rw.ins("cmp", Reg(sv), Imm(1))]
    blocks.append(Block("__obf_go", tuple(tail)))

    for b in blocks:
        all_ids.extend(i.site for i in b.instrs)
    return blocks, all_ids, truth_ids


def obfuscate_rewrite(p: Program, sites: SensitiveSites, *,
                      regions=None, only=None,
                      rw: Rewriter | None = None) -> tuple[Program, ObfPlan]:
    """Divert every sensitive heap access through its paired cells.

    `regions` overrides which pre-imaged byte ranges migrate into the
    SecureBuffer at entry; by default the sensitive heap regions from the
    taint report are used.  `only` restricts the rewrite to a subset of
    site ids.  Returns the rewritten program and the diversion plan.
    """
    rw = rw or Rewriter(p)
    targets = set(sites.stores) | set(sites.loads)
    if only is not None:
        targets &= set(only)
    raw_regions = sites.heap_regions if regions is None else tuple(regions)
    if not _classify(p, targets) and not raw_regions:
        return p, ObfPlan()

    p, moved = evict_reserved(p, (ROLLER,))
    per_fn = _classify(p, targets)
    handled = {s.site for sl in per_fn.values() for s in sl}

    migrated = _blocks_of(raw_regions)
    for base, ln in migrated:
        if not (isa.HEAP_BASE <= base and base + ln <= isa.HEAP_BASE + isa.HEAP_SIZE):
            raise ObfError(
                f"diverted region {base:#x}+{ln:#x} is not heap memory")
    _guard_static_accesses(p, handled, migrated)

    layouts = {fn: FrameLayout.for_function(p.function(fn)) for fn in per_fn}
    em = _Emitter(p, rw, layouts)
    out = p
    for fn, slist in per_fn.items():
        repl: dict[tuple[str, int], list[Instr]] = {}
        for s in slist:
            if s.kind == "load":
                repl.update(em.emit_load(s))
            else:
                repl.update(em.emit_store(s))
        out = replace_in_function(out, fn, repl)

    # spills grew a frame by up to half a block: pad it back to a multiple
    # of 16 so callee stack cells keep their block pairing
    for fn in sorted(em.spilled_fns):
        lay = layouts[fn]
        pad = Block("__obf_pad",
                    (rw.ins("store", Mem(None, lay.spill_off(3)), Imm(0)),))
        out = _insert_blocks(out, fn, [pad])

    seed_addr = migrated[0][0] if migrated else isa.HEAP_BASE
    seed_index = nonces.initial_nonce_index(seed_addr)
    blocks, prologue_ids, truth_ids = _prologue_blocks(
        rw, p.function(p.entry), migrated, seed_index)
    out = _insert_blocks(out, out.entry, blocks)

    diags = mir.validate(out)
    if diags:
        raise ObfError("rewrite produced invalid program: " + "; ".join(diags))

    plan = ObfPlan(
        sites=tuple(em.records),
        migrated=migrated,
        prologue=tuple(prologue_ids),
        migration_stores=tuple(truth_ids),
        moved_lanes=moved,
        spill_sites=tuple(em.spill_sites),
        seed_index=seed_index,
    )
    return out, plan


def _insert_blocks(p: Program, fn_name: str, blocks: list[Block]) -> Program:
    funcs = []
    for f in p.functions:
        if f.name == fn_name:
            f = Function(f.name, tuple(blocks) + f.blocks)
        funcs.append(f)
    return Program(tuple(funcs), p.entry, p.secret_regions, p.heap_images)
