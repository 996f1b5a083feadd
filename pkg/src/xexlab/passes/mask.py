"""Software masking of secret memory traffic.

Every sensitive cell gets a companion nonce cell.  Stores write
``value XOR nonce'`` after advancing the nonce, loads undo the mask
with the stored nonce, and a zero nonce decodes as identity so cells
that were never masked still read back correctly.  Freshness comes
from the nonce update: the same value stored twice in a row produces
two different ciphertexts because the nonce moved in between.

Three update variants are provided.  ``rdrand`` draws the first nonce
per cell from the RandomNonceBuffer and then steps by the fixed
increment; ``aes`` runs the nonce through the per-run keyed PRF;
``xs`` takes the next output of a global XorShift128+ generator kept
in vector lanes.  All three blend with the buffer entry for the first
store to a cell (stored nonce still zero).

Stack cells get their nonce slots appended to the owning frame and
zero-initialized on function entry.  Heap cells hash their address
into the shared nonce store; in expanded mode the hash picks a group
of tagged entries probed by an emitted helper so that colliding
addresses coexist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import cfg, isa, mir, nonces
from ..mir import Block, Function, Imm, Instr, Mem, Program, Reg
from ..taint import SensitiveSites
from .common import (FrameLayout, MaskError, Rewriter, Scratch, acquire_scratch,
                     ceil16, emit_addr, emit_heap_nonce_cell, evict_reserved,
                     prepend_block, append_function, replace_in_function,
                     static_sp, width_mask)

VARIANTS = ("rdrand", "aes", "xs")

RESERVED_LANES = {
    "rdrand": (),
    "aes": isa.AES_STATE_LANES,
    "xs": isa.XS_STATE_LANES,
}

PROBE_FN = "__nonce_probe"
PROBE_CLOBBERS = (11, 12, 13, 14)   # helper register convention, arg/ret in g14
HALT_NONCE_OVERFLOW = 40


@dataclass(frozen=True)
class MaskedSite:
    """One rewritten access.  `roles` names the load-bearing instructions
    of the macro by site id so audits and fault injection can find them."""

    site: int
    kind: str                  # "load" | "store" | "fused-load" | "fused-store"
    region: str                # "stack" | "heap"
    fn: str
    cell: int | None           # stack cell offset; None for heap
    nonce_off: int | None
    span: tuple[int, ...]
    roles: dict[str, int]
    partner: int | None = None

    def to_dict(self) -> dict:
        return {
            "site": self.site, "kind": self.kind, "region": self.region,
            "fn": self.fn, "cell": self.cell, "nonce_off": self.nonce_off,
            "span": list(self.span), "roles": dict(self.roles),
            "partner": self.partner,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskedSite":
        return cls(site=d["site"], kind=d["kind"], region=d["region"],
                   fn=d["fn"], cell=d["cell"], nonce_off=d["nonce_off"],
                   span=tuple(d["span"]), roles=dict(d["roles"]),
                   partner=d.get("partner"))


@dataclass
class MaskPlan:
    variant: str
    sites: tuple[MaskedSite, ...] = ()
    nonce_slots: dict[str, dict[int, int]] = field(default_factory=dict)
    frame_sizes: dict[str, int] = field(default_factory=dict)
    prologue: dict[str, tuple[int, ...]] = field(default_factory=dict)
    moved_lanes: dict[int, int] = field(default_factory=dict)
    spill_sites: tuple[int, ...] = ()
    helper: str | None = None
    helper_stores: tuple[int, ...] = ()
    expanded: bool = False

    @property
    def sanctioned_sites(self) -> frozenset[int]:
        ids: set[int] = set(self.helper_stores) | set(self.spill_sites)
        for fn_sites in self.prologue.values():
            ids.update(fn_sites)
        for s in self.sites:
            for role in ("nonce_store", "data_store"):
                if role in s.roles:
                    ids.add(s.roles[role])
        return frozenset(ids)

    def site_for(self, site_id: int) -> MaskedSite | None:
        for s in self.sites:
            if s.site == site_id:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "sites": [s.to_dict() for s in self.sites],
            "nonce_slots": {fn: {str(k): v for k, v in m.items()}
                            for fn, m in self.nonce_slots.items()},
            "frame_sizes": dict(self.frame_sizes),
            "prologue": {fn: list(v) for fn, v in self.prologue.items()},
            "moved_lanes": {str(k): v for k, v in self.moved_lanes.items()},
            "spill_sites": list(self.spill_sites),
            "helper": self.helper,
            "helper_stores": list(self.helper_stores),
            "expanded": self.expanded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls(
            variant=d["variant"],
            sites=tuple(MaskedSite.from_dict(s) for s in d["sites"]),
            nonce_slots={fn: {int(k): v for k, v in m.items()}
                         for fn, m in d["nonce_slots"].items()},
            frame_sizes=dict(d["frame_sizes"]),
            prologue={fn: tuple(v) for fn, v in d["prologue"].items()},
            moved_lanes={int(k): v for k, v in d["moved_lanes"].items()},
            spill_sites=tuple(d["spill_sites"]),
            helper=d.get("helper"),
            helper_stores=tuple(d.get("helper_stores", ())),
            expanded=d.get("expanded", False),
        )


@dataclass
class _Site:
    site: int
    fn: str
    label: str
    idx: int
    ins: Instr
    kind: str                 # "load" | "store"
    region: str
    cell: int | None = None   # stack cell offset
    shift: int = 0            # bit shift of a narrow stack access inside its cell
    fused_with: "_Site | None" = None   # store half points at load half


def _touched_regs(instrs) -> set[int]:
    out: set[int] = set()
    for ins in instrs:
        uses, defs = cfg._uses_defs(ins)
        out |= uses | defs
    return out


def _classify(p: Program, targets: set[int]) -> dict[str, list[_Site]]:
    per_fn: dict[str, list[_Site]] = {}
    for f in p.functions:
        found: list[_Site] = []
        for b in f.blocks:
            for i, ins in enumerate(b.instrs):
                if ins.site not in targets:
                    continue
                if ins.op not in ("load", "store"):
                    raise MaskError(
                        f"sensitive site {ins.site} is a {ins.op}, not a memory access")
                m = ins.mem()
                kind = ins.op
                if m.base is None:
                    cell = m.offset & ~7
                    inner = m.offset & 7
                    if inner + m.width > 8:
                        raise MaskError(
                            f"site {ins.site}: access straddles an 8-byte cell")
                    found.append(_Site(ins.site, f.name, b.label, i, ins,
                                       kind, "stack", cell, inner * 8))
                else:
                    if m.width != 8 and kind == "store":
                        raise MaskError(
                            f"site {ins.site}: sub-word sensitive heap store")
                    found.append(_Site(ins.site, f.name, b.label, i, ins,
                                       kind, "heap"))
        if found:
            per_fn[f.name] = found
    return per_fn


def _pair_fusable(p: Program, per_fn: dict[str, list[_Site]]) -> None:
    """Mark load/store pairs on the same cell with no call, branch, or
    other sensitive site in between.  The store half then reuses the
    nonce the load half fetched instead of reloading it."""
    for fn, slist in per_fn.items():
        f = p.function(fn)
        by_block: dict[str, list[_Site]] = {}
        for s in slist:
            by_block.setdefault(s.label, []).append(s)
        for label, group in by_block.items():
            block = next(b for b in f.blocks if b.label == label)
            group.sort(key=lambda s: s.idx)
            for k, ld in enumerate(group):
                if ld.kind != "load" or ld.fused_with is not None:
                    continue
                if ld.ins.mem().width < 8:
                    continue    # narrow accesses take the unfused path
                for st in group[k + 1:]:
                    if st.ins.mem() != ld.ins.mem():
                        continue
                    if st.kind != "store":
                        break    # an intervening load of the cell kills fusion
                    between = block.instrs[ld.idx + 1:st.idx]
                    if any(x.op in ("call", "jmp", "br_cond", "ret", "halt")
                           for x in between):
                        break
                    if any(x.site in {s.site for s in slist} for x in between):
                        break
                    if any(x.mem() == ld.ins.mem() for x in between):
                        break
                    base = ld.ins.mem().base
                    if base is not None and base >= 0:
                        if any(base in cfg._uses_defs(x)[1] for x in between):
                            break
                    st.fused_with = ld
                    break


class _Emitter:
    def __init__(self, p: Program, rw: Rewriter, variant: str, expanded: bool,
                 layouts: dict[str, FrameLayout], sp_map: dict[str, int]):
        self.p = p
        self.rw = rw
        self.variant = variant
        self.expanded = expanded
        self.layouts = layouts
        self.sp_map = sp_map
        self.records: list[MaskedSite] = []
        self.spill_sites: list[int] = []

    # nonce candidate generation: leaves the new nonce in `sn`, using `st`
    # as the blended first-store value.  Flags are already parked in g15.
    def _cand_blend(self, sn: int, st: int, roles: dict[str, int]) -> list[Instr]:
        rw = self.rw
        seq: list[Instr] = []
        if self.variant == "rdrand":
            upd = rw.ins("add", Reg(sn), Imm(nonces.NONCE_INCREMENT))
            cmp_ = rw.ins("cmp", Reg(sn), Imm(nonces.NONCE_INCREMENT))
            seq += [upd, cmp_]
        elif self.variant == "aes":
            t0, t1 = isa.AES_STATE_LANES[0], isa.AES_STATE_LANES[1]
            seq.append(rw.ins("mov", Reg(t0), Reg(sn)))
            seq.append(rw.ins("mov", Reg(t1), Imm(0)))
            upd = rw.ins("prf_enc", Reg(t0))
            cmp_ = rw.ins("cmp", Reg(sn), Imm(0))
            seq += [upd, cmp_, rw.ins("mov", Reg(sn), Reg(t0))]
        else:   # xs
            s0, s1 = isa.XS_STATE_LANES[0], isa.XS_STATE_LANES[1]
            t0, t1 = isa.XS_STATE_LANES[2], isa.XS_STATE_LANES[3]
            seq += [
                rw.ins("mov", Reg(t0), Reg(s0)),
                rw.ins("mov", Reg(s0), Reg(s1)),
                rw.ins("mov", Reg(t1), Reg(t0)),
                rw.ins("shl", Reg(t1), Imm(23)),
                rw.ins("xor", Reg(t0), Reg(t1)),
                rw.ins("mov", Reg(t1), Reg(t0)),
                rw.ins("shr", Reg(t1), Imm(17)),
                rw.ins("xor", Reg(t0), Reg(t1)),
                rw.ins("mov", Reg(t1), Reg(s1)),
                rw.ins("shr", Reg(t1), Imm(26)),
                rw.ins("xor", Reg(t0), Reg(t1)),
                rw.ins("xor", Reg(t0), Reg(s1)),
                rw.ins("mov", Reg(s1), Reg(t0)),
            ]
            upd = rw.ins("add", Reg(t0), Reg(s0))
            cmp_ = rw.ins("cmp", Reg(sn), Imm(0))
            seq += [upd, cmp_, rw.ins("mov", Reg(sn), Reg(t0))]
        sel = rw.ins("select", Reg(sn), Reg(st), "eq")
        seq.append(sel)
        roles["update"] = upd.site
        roles["blend_cmp"] = cmp_.site
        roles["blend_select"] = sel.site
        return seq

    def _stack_r_entry(self, fn: str, cell: int) -> int:
        addr = (self.sp_map[fn] + cell) & isa.MASK64
        idx = nonces.initial_nonce_index(addr)
        return isa.RAND_BUF_BASE + 8 * idx

    # heap address plumbing: leaves the nonce cell address in `si` and a
    # copy of the data address in `sa` (expanded mode goes through the
    # probe helper and reports which registers it clobbered).
    def _heap_nonce_cell(self, si: int, sa: int, m: Mem,
                         roles: dict[str, int]) -> list[Instr]:
        rw = self.rw
        seq = emit_addr(rw, sa, m)
        if self.expanded:
            seq.append(rw.ins("mov", Reg(14), Reg(sa)))
            call = rw.ins("call", PROBE_FN)
            seq.append(call)
            seq.append(rw.ins("mov", Reg(si), Reg(14)))
            roles["probe_call"] = call.site
        else:
            seq.append(rw.ins("mov", Reg(si), Reg(sa)))
            seq += emit_heap_nonce_cell(rw, si)
        return seq

    def _r_load_from_addr(self, st: int, sa: int) -> list[Instr]:
        rw = self.rw
        return [
            rw.ins("mov", Reg(st), Reg(sa)),
            rw.ins("and", Reg(st), Imm(nonces.INITIAL_INDEX_MASK)),
            rw.ins("shl", Reg(st), Imm(3)),
            rw.ins("add", Reg(st), Imm(isa.RAND_BUF_BASE)),
            rw.ins("load", Reg(st), Mem(st, 0)),
        ]

    def _scratch(self, site: _Site, need: int, hold_until: _Site | None = None) -> Scratch:
        f = self.p.function(site.fn)
        exclude: set[int] = set()
        uses, defs = cfg._uses_defs(site.ins)
        exclude |= {r for r in uses | defs if r < isa.NUM_GENERAL}
        if hold_until is not None:
            block = next(b for b in f.blocks if b.label == site.label)
            span = block.instrs[site.idx + 1:hold_until.idx + 1]
            exclude |= {r for r in _touched_regs(span) if r < isa.NUM_GENERAL}
        if site.region == "heap" and self.expanded:
            exclude |= set(PROBE_CLOBBERS)
        sc = acquire_scratch(self.rw, f, site.label, site.idx, need,
                             exclude, self.layouts[site.fn])
        self.spill_sites.extend(i.site for i in sc.pre)
        return sc

    def emit_load(self, s: _Site) -> dict[tuple[str, int], list[Instr]]:
        rw = self.rw
        roles: dict[str, int] = {}
        m = s.ins.mem()
        dst = s.ins.args[0]
        before = len(rw.minted)
        if s.region == "stack":
            noff = self.layouts[s.fn].nonce_off(s.cell)
            sc = self._scratch(s, 1)
            sn = sc.regs[0]
            save = rw.ins("saveflags")
            nload = rw.ins("load", Reg(sn), Mem(None, noff))
            body = [save, s.ins, nload]
            if s.shift:
                body.append(rw.ins("shr", Reg(sn), Imm(s.shift)))
            dec = rw.ins("xor", dst, Reg(sn))
            rest = rw.ins("restoreflags")
            body.append(dec)
            if m.width < 8:
                body.append(rw.ins("and", dst, Imm(width_mask(m.width))))
            body.append(rest)
            seq = list(sc.pre) + body + list(sc.post)
            roles.update(save=save.site, nonce_load=nload.site,
                         decode_xor=dec.site, restore=rest.site,
                         data_load=s.ins.site)
            rec_cell, rec_noff = s.cell, noff
        else:
            need = 3 if self.expanded else 2
            sc = self._scratch(s, need)
            if self.expanded:
                si, sn, sa = sc.regs
            else:
                si, sn = sc.regs
                sa = si
            save = rw.ins("saveflags")
            seq = list(sc.pre) + [save]
            if self.expanded:
                seq += self._heap_nonce_cell(si, sa, m, roles)
                data_load = Instr("load", (dst, Mem(sa, 0, m.width)), s.ins.site)
            else:
                seq += emit_addr(rw, si, m)
                seq += emit_heap_nonce_cell(rw, si)
                data_load = s.ins
            nload = rw.ins("load", Reg(sn), Mem(si, 0))
            dec = rw.ins("xor", dst, Reg(sn))
            rest = rw.ins("restoreflags")
            seq += [data_load, nload, dec]
            if m.width < 8:
                seq.append(rw.ins("and", dst, Imm(width_mask(m.width))))
            seq.append(rest)
            seq += list(sc.post)
            roles.update(save=save.site, nonce_load=nload.site,
                         decode_xor=dec.site, restore=rest.site,
                         data_load=s.ins.site)
            rec_cell, rec_noff = None, None
        span = tuple(rw.minted[before:])
        self.records.append(MaskedSite(s.site, "load", s.region, s.fn,
                                       rec_cell, rec_noff, span, roles))
        return {(s.label, s.idx): seq}

    def emit_store(self, s: _Site) -> dict[tuple[str, int], list[Instr]]:
        rw = self.rw
        roles: dict[str, int] = {}
        m = s.ins.mem()
        src = s.ins.args[1]
        before = len(rw.minted)
        if s.region == "stack":
            noff = self.layouts[s.fn].nonce_off(s.cell)
            if s.ins.mem().width < 8:
                return self._emit_stack_rmw_store(s, noff, before)
            sc = self._scratch(s, 2)
            sn, st = sc.regs
            save = rw.ins("saveflags")
            nload = rw.ins("load", Reg(sn), Mem(None, noff))
            rload = rw.ins("load", Reg(st), Mem(isa.ABS, self._stack_r_entry(s.fn, s.cell)))
            seq = list(sc.pre) + [save, nload, rload]
            seq += self._cand_blend(sn, st, roles)
            seq.append(rw.ins("mov", Reg(st), src))
            enc = rw.ins("xor", Reg(st), Reg(sn))
            rest = rw.ins("restoreflags")
            nstore = rw.ins("store", Mem(None, noff), Reg(sn))
            dstore = Instr("store", (Mem(None, s.cell, 8), Reg(st)), s.ins.site)
            seq += [enc, rest, nstore, dstore]
            seq += list(sc.post)
            roles.update(save=save.site, nonce_load=nload.site, r_load=rload.site,
                         encode_xor=enc.site, restore=rest.site,
                         nonce_store=nstore.site, data_store=s.ins.site)
            rec_cell, rec_noff = s.cell, noff
        else:
            need = 4 if self.expanded else 3
            sc = self._scratch(s, need)
            if self.expanded:
                si, sn, st, sa = sc.regs
            else:
                si, sn, st = sc.regs
                sa = None
            save = rw.ins("saveflags")
            seq = list(sc.pre) + [save]
            if self.expanded:
                seq += self._heap_nonce_cell(si, sa, m, roles)
                seq += self._r_load_from_addr(st, sa)
                target_mem = Mem(sa, 0, 8)
            else:
                addr_seq = emit_addr(rw, st, m)
                addr_seq.append(rw.ins("mov", Reg(si), Reg(st)))
                addr_seq += emit_heap_nonce_cell(rw, si)
                seq += addr_seq
                seq += [
                    rw.ins("and", Reg(st), Imm(nonces.INITIAL_INDEX_MASK)),
                    rw.ins("shl", Reg(st), Imm(3)),
                    rw.ins("add", Reg(st), Imm(isa.RAND_BUF_BASE)),
                    rw.ins("load", Reg(st), Mem(st, 0)),
                ]
                target_mem = m
            roles["r_load"] = seq[-1].site
            nload = rw.ins("load", Reg(sn), Mem(si, 0))
            seq.append(nload)
            seq += self._cand_blend(sn, st, roles)
            seq.append(rw.ins("mov", Reg(st), src))
            enc = rw.ins("xor", Reg(st), Reg(sn))
            rest = rw.ins("restoreflags")
            nstore = rw.ins("store", Mem(si, 0), Reg(sn))
            dstore = Instr("store", (target_mem, Reg(st)), s.ins.site)
            seq += [enc, rest, nstore, dstore]
            seq += list(sc.post)
            roles.update(save=save.site, nonce_load=nload.site,
                         encode_xor=enc.site, restore=rest.site,
                         nonce_store=nstore.site, data_store=s.ins.site)
            rec_cell, rec_noff = None, None
        span = tuple(rw.minted[before:])
        self.records.append(MaskedSite(s.site, "store", s.region, s.fn,
                                       rec_cell, rec_noff, span, roles))
        return {(s.label, s.idx): seq}

    def _emit_stack_rmw_store(self, s: _Site, noff: int, before: int):
        """Narrow store into a masked cell: decode the whole cell, splice
        the stored bytes in, re-encode.  The data store widens to 8."""
        rw = self.rw
        roles: dict[str, int] = {}
        m = s.ins.mem()
        src = s.ins.args[1]
        sc = self._scratch(s, 3)
        sv, sn, st = sc.regs
        save = rw.ins("saveflags")
        vload = rw.ins("load", Reg(sv), Mem(None, s.cell))
        nload = rw.ins("load", Reg(sn), Mem(None, noff))
        dec = rw.ins("xor", Reg(sv), Reg(sn))
        hole = ~(width_mask(m.width) << s.shift) & isa.MASK64
        seq = list(sc.pre) + [save, vload, nload, dec,
                              rw.ins("and", Reg(sv), Imm(hole)),
                              rw.ins("mov", Reg(st), src),
                              rw.ins("and", Reg(st), Imm(width_mask(m.width)))]
        if s.shift:
            seq.append(rw.ins("shl", Reg(st), Imm(s.shift)))
        seq.append(rw.ins("or", Reg(sv), Reg(st)))
        rload = rw.ins("load", Reg(st), Mem(isa.ABS, self._stack_r_entry(s.fn, s.cell)))
        seq.append(rload)
        seq += self._cand_blend(sn, st, roles)
        enc = rw.ins("xor", Reg(sv), Reg(sn))
        rest = rw.ins("restoreflags")
        nstore = rw.ins("store", Mem(None, noff), Reg(sn))
        dstore = Instr("store", (Mem(None, s.cell, 8), Reg(sv)), s.ins.site)
        seq += [enc, rest, nstore, dstore]
        seq += list(sc.post)
        roles.update(save=save.site, nonce_load=nload.site, r_load=rload.site,
                     decode_xor=dec.site, encode_xor=enc.site, restore=rest.site,
                     nonce_store=nstore.site, data_store=s.ins.site)
        span = tuple(rw.minted[before:])
        self.records.append(MaskedSite(s.site, "store", s.region, s.fn,
                                       s.cell, noff, span, roles))
        return {(s.label, s.idx): seq}

    def emit_fused(self, ld: _Site, st_site: _Site):
        """Load half decodes and parks the nonce in a scratch register;
        store half advances it and re-encodes without reloading."""
        rw = self.rw
        m = ld.ins.mem()
        dst = ld.ins.args[0]
        src = st_site.ins.args[1]
        roles_l: dict[str, int] = {}
        roles_s: dict[str, int] = {}
        before = len(rw.minted)
        if ld.region == "stack":
            noff = self.layouts[ld.fn].nonce_off(ld.cell)
            sc = self._scratch(ld, 2, hold_until=st_site)
            sn, st = sc.regs
            save1 = rw.ins("saveflags")
            nload = rw.ins("load", Reg(sn), Mem(None, noff))
            dec = rw.ins("xor", dst, Reg(sn))
            rest1 = rw.ins("restoreflags")
            seq_l = list(sc.pre) + [save1, ld.ins, nload, dec, rest1]
            span_l = tuple(rw.minted[before:])
            roles_l.update(save=save1.site, nonce_load=nload.site,
                           decode_xor=dec.site, restore=rest1.site,
                           data_load=ld.ins.site)
            before_s = len(rw.minted)
            save2 = rw.ins("saveflags")
            rload = rw.ins("load", Reg(st), Mem(isa.ABS, self._stack_r_entry(ld.fn, ld.cell)))
            seq_s = [save2, rload]
            seq_s += self._cand_blend(sn, st, roles_s)
            seq_s.append(rw.ins("mov", Reg(st), src))
            enc = rw.ins("xor", Reg(st), Reg(sn))
            rest2 = rw.ins("restoreflags")
            nstore = rw.ins("store", Mem(None, noff), Reg(sn))
            dstore = Instr("store", (Mem(None, ld.cell, 8), Reg(st)), st_site.ins.site)
            seq_s += [enc, rest2, nstore, dstore]
            seq_s += list(sc.post)
            span_s = tuple(rw.minted[before_s:])
            roles_s.update(save=save2.site, r_load=rload.site,
                           encode_xor=enc.site, restore=rest2.site,
                           nonce_store=nstore.site, data_store=st_site.ins.site)
            rec_cell, rec_noff = ld.cell, noff
        else:
            need = 4 if self.expanded else 3
            sc = self._scratch(ld, need, hold_until=st_site)
            if self.expanded:
                si, sn, st, sa = sc.regs
            else:
                si, sn, st = sc.regs
                sa = None
            save1 = rw.ins("saveflags")
            seq_l = list(sc.pre) + [save1]
            if self.expanded:
                seq_l += self._heap_nonce_cell(si, sa, m, roles_l)
                data_load = Instr("load", (dst, Mem(sa, 0, m.width)), ld.ins.site)
            else:
                seq_l += emit_addr(rw, si, m)
                seq_l += emit_heap_nonce_cell(rw, si)
                data_load = ld.ins
            nload = rw.ins("load", Reg(sn), Mem(si, 0))
            dec = rw.ins("xor", dst, Reg(sn))
            rest1 = rw.ins("restoreflags")
            seq_l += [data_load, nload, dec, rest1]
            span_l = tuple(rw.minted[before:])
            roles_l.update(save=save1.site, nonce_load=nload.site,
                           decode_xor=dec.site, restore=rest1.site,
                           data_load=ld.ins.site)
            before_s = len(rw.minted)
            save2 = rw.ins("saveflags")
            seq_s = [save2]
            if self.expanded:
                seq_s += self._r_load_from_addr(st, sa)
                target_mem = Mem(sa, 0, 8)
            else:
                seq_s += emit_addr(rw, st, m)
                seq_s += [
                    rw.ins("and", Reg(st), Imm(nonces.INITIAL_INDEX_MASK)),
                    rw.ins("shl", Reg(st), Imm(3)),
                    rw.ins("add", Reg(st), Imm(isa.RAND_BUF_BASE)),
                    rw.ins("load", Reg(st), Mem(st, 0)),
                ]
                target_mem = m
            roles_s["r_load"] = seq_s[-1].site
            seq_s += self._cand_blend(sn, st, roles_s)
            seq_s.append(rw.ins("mov", Reg(st), src))
            enc = rw.ins("xor", Reg(st), Reg(sn))
            rest2 = rw.ins("restoreflags")
            nstore = rw.ins("store", Mem(si, 0), Reg(sn))
            dstore = Instr("store", (target_mem, Reg(st)), st_site.ins.site)
            seq_s += [enc, rest2, nstore, dstore]
            seq_s += list(sc.post)
            span_s = tuple(rw.minted[before_s:])
            roles_s.update(save=save2.site, encode_xor=enc.site,
                           restore=rest2.site, nonce_store=nstore.site,
                           data_store=st_site.ins.site)
            rec_cell, rec_noff = None, None
        self.records.append(MaskedSite(ld.site, "fused-load", ld.region, ld.fn,
                                       rec_cell, rec_noff, span_l, roles_l,
                                       partner=st_site.site))
        self.records.append(MaskedSite(st_site.site, "fused-store", ld.region,
                                       ld.fn, rec_cell, rec_noff, span_s,
                                       roles_s, partner=ld.site))
        return {(ld.label, ld.idx): seq_l, (st_site.label, st_site.idx): seq_s}


def _probe_function(rw: Rewriter) -> tuple[Function, tuple[int, ...]]:
    """Expanded-mode group probe.  g14 in: cell address, out: nonce cell
    address.  Clobbers g11..g13 and flags; branches only on entry tags,
    never on secret data."""
    groups = isa.EXPANDED_GROUPS
    tag_store = rw.ins("store", Mem(12, 0), Reg(14))
    entry = Block("probe", (
        rw.ins("mov", Reg(12), Reg(14)),
        rw.ins("and", Reg(12), Imm(nonces.ADDR_MASK)),
        rw.ins("mul", Reg(12), Imm(nonces.HASH_MULT)),
        rw.ins("shr", Reg(12), Imm(nonces.HASH_SHIFT)),
        rw.ins("mul", Reg(12), Imm(groups * 16)),
        rw.ins("add", Reg(12), Imm(isa.NONCE_STORE_BASE)),
        rw.ins("mov", Reg(13), Reg(12)),
        rw.ins("add", Reg(13), Imm(groups * 16)),
    ))
    loop = Block("scan", (
        rw.ins("load", Reg(11), Mem(12, 0)),
        rw.ins("cmp", Reg(11), Imm(0)),
        rw.ins("br_cond", "eq", "claim"),
        rw.ins("cmp", Reg(11), Reg(14)),
        rw.ins("br_cond", "eq", "found"),
        rw.ins("add", Reg(12), Imm(16)),
        rw.ins("cmp", Reg(12), Reg(13)),
        rw.ins("br_cond", "ult", "scan"),
        rw.ins("halt", Imm(HALT_NONCE_OVERFLOW)),
    ))
    claim = Block("claim", (tag_store,))
    found = Block("found", (
        rw.ins("mov", Reg(14), Reg(12)),
        rw.ins("add", Reg(14), Imm(8)),
        rw.ins("ret"),
    ))
    return Function(PROBE_FN, (entry, loop, claim, found)), (tag_store.site,)


def mask_rewrite(p: Program, sites: SensitiveSites, variant: str = "rdrand", *,
                 expanded: bool = False, only=None,
                 rw: Rewriter | None = None) -> tuple[Program, MaskPlan]:
    """Wrap every sensitive memory access in a masking macro.

    `only` restricts the rewrite to a subset of site ids, which is how
    the pipeline hands this pass the residue another pass left behind.
    Returns the rewritten program and the plan that audits, verification,
    and fault injection consume.
    """
    if variant not in VARIANTS:
        raise MaskError(f"unknown masking variant {variant!r}")
    rw = rw or Rewriter(p)
    p, moved = evict_reserved(p, RESERVED_LANES[variant])

    targets = set(sites.stores) | set(sites.loads)
    if only is not None:
        targets &= set(only)
    per_fn = _classify(p, targets)
    _pair_fusable(p, per_fn)

    layouts = {fn: FrameLayout.for_function(p.function(fn)) for fn in per_fn}
    # pre-assign nonce slots so frame sizes, and with them the static
    # stack addresses feeding the R-buffer index, are fixed before emission
    for fn, slist in per_fn.items():
        for s in slist:
            if s.region == "stack":
                layouts[fn].nonce_off(s.cell)
    frames = {f.name: mir.frame_size(f) for f in p.functions}
    frames.update({fn: lay.frame_size() for fn, lay in layouts.items()})
    sp_map = static_sp(p, frames)

    em = _Emitter(p, rw, variant, expanded, layouts, sp_map)
    repl_by_fn: dict[str, dict[tuple[str, int], list[Instr]]] = {}
    for fn, slist in per_fn.items():
        repl: dict[tuple[str, int], list[Instr]] = {}
        for s in slist:
            if s.fused_with is not None:
                continue    # handled from the load half
            partner = next((t for t in slist if t.fused_with is s), None)
            if partner is not None:
                repl.update(em.emit_fused(s, partner))
            elif s.kind == "load":
                repl.update(em.emit_load(s))
            else:
                repl.update(em.emit_store(s))
        repl_by_fn[fn] = repl

    out = p
    for fn, repl in repl_by_fn.items():
        out = replace_in_function(out, fn, repl)

    # per-function prologues: zero the nonce slots (plus an alignment pad
    # so the grown frame stays a multiple of 16), then seed variant state
    # in the program entry
    prologue: dict[str, tuple[int, ...]] = {}
    for fn, lay in layouts.items():
        seq: list[Instr] = []
        for cell in sorted(lay.nonce_slots):
            seq.append(rw.ins("store", Mem(None, lay.nonce_slots[cell]), Imm(0)))
        used_end = lay._next_nonce
        if lay.nonce_slots and used_end % 16:
            seq.append(rw.ins("store", Mem(None, used_end), Imm(0)))
        if fn == out.entry:
            if variant == "aes":
                seq.append(rw.ins("rdrand", Reg(isa.AES_STATE_LANES[2])))
                seq.append(rw.ins("rdrand", Reg(isa.AES_STATE_LANES[3])))
            elif variant == "xs":
                seq.append(rw.ins("rdrand", Reg(isa.XS_STATE_LANES[0])))
                seq.append(rw.ins("rdrand", Reg(isa.XS_STATE_LANES[1])))
                seq.append(rw.ins("or", Reg(isa.XS_STATE_LANES[0]), Imm(1)))
                # the or dirtied the flags; programs start with them clear
                t = isa.XS_STATE_LANES[2]
                seq.append(rw.ins("mov", Reg(t), Imm(2)))
                seq.append(rw.ins("cmp", Reg(t), Imm(1)))
        if seq:
            out = prepend_block(out, fn, "__mask_init", seq)
            prologue[fn] = tuple(i.site for i in seq)
    if out.entry not in prologue and variant in ("aes", "xs"):
        seq = []
        if variant == "aes":
            seq = [rw.ins("rdrand", Reg(isa.AES_STATE_LANES[2])),
                   rw.ins("rdrand", Reg(isa.AES_STATE_LANES[3]))]
        else:
            seq = [rw.ins("rdrand", Reg(isa.XS_STATE_LANES[0])),
                   rw.ins("rdrand", Reg(isa.XS_STATE_LANES[1])),
                   rw.ins("or", Reg(isa.XS_STATE_LANES[0]), Imm(1)),
                   rw.ins("mov", Reg(isa.XS_STATE_LANES[2]), Imm(2)),
                   rw.ins("cmp", Reg(isa.XS_STATE_LANES[2]), Imm(1))]
        out = prepend_block(out, out.entry, "__mask_init", seq)
        prologue[out.entry] = tuple(i.site for i in seq)

    helper = None
    helper_stores: tuple[int, ...] = ()
    if expanded and any(s.region == "heap" for sl in per_fn.values() for s in sl):
        probe, helper_stores = _probe_function(rw)
        out = append_function(out, probe)
        helper = PROBE_FN

    diags = mir.validate(out)
    if diags:
        raise MaskError("rewrite produced invalid program: " + "; ".join(diags))

    plan = MaskPlan(
        variant=variant,
        sites=tuple(em.records),
        nonce_slots={fn: dict(lay.nonce_slots) for fn, lay in layouts.items()
                     if lay.nonce_slots},
        frame_sizes={fn: lay.frame_size() for fn, lay in layouts.items()},
        prologue=prologue,
        moved_lanes=moved,
        spill_sites=tuple(em.spill_sites),
        helper=helper,
        helper_stores=helper_stores,
        expanded=expanded,
    )
    return out, plan
