"""Semantic preservation and mitigation-integrity checks.

Three layers of assurance, weakest trust assumption first:

  trace_equiv        run original and rewritten programs on shared inputs
                     and compare what they observably did: the ordered
                     output-region writes and the entry return value
  audit_obligations  static plan-versus-program checks (every sensitive
                     site is wrapped, macros are complete and branch-free,
                     nonce slots do not collide, diverted addresses stay
                     in bounds) plus a dynamic taint re-run that catches
                     raw secret stores the plans did not sanction
  fault injection    a catalogue of ten targeted macro corruptions, each
                     of which must be caught by one of the layers above

The catalogue earns the other layers their keep: a checker that stays
silent on a broken macro would sail through here, so every entry records
which layer fired.

The structural audit deliberately checks existence and opcode of each
macro role, not operand values.  Wrong-operand corruption (a retargeted
nonce store, swapped diversion homes) is exactly what the trace layer is
for, and keeping the audit shallow means a corruption is pinned to the
layer that owns it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import cfg, isa, machine, mir, nonces
from .mir import Block, Function, Imm, Instr, Mem, Program, Reg
from .passes import PlanBundle, audit_no_secret_stores
from .runtime import MachineError, RunConfig
from .taint import SensitiveSites

# =============================================================================
# Trace equivalence
# =============================================================================


@dataclass(frozen=True)
class Divergence:
    run: int                   # index into the inputs list
    kind: str                  # "machine-error" | "halt" | "ret" | "events"
    detail: str

    def to_dict(self) -> dict:
        return {"run": self.run, "kind": self.kind, "detail": self.detail}


@dataclass(frozen=True)
class EquivReport:
    ok: bool
    runs: int
    divergences: tuple[Divergence, ...] = ()

    def to_dict(self) -> dict:
        return {"ok": self.ok, "runs": self.runs,
                "divergences": [d.to_dict() for d in self.divergences]}


def _first_event_mismatch(a, b) -> str:
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            ea, eb = a[i], b[i]
            return (f"event {i}: original stores {ea[1]:#x}/{ea[2]} at "
                    f"{ea[0]:#x}, rewritten stores {eb[1]:#x}/{eb[2]} at "
                    f"{eb[0]:#x}")
    return f"original emitted {len(a)} output events, rewritten {len(b)}"


def trace_equiv(p_ref: Program, p_rw: Program, inputs_list,
                config: RunConfig | None = None) -> EquivReport:
    """Functional equivalence over a list of input bindings.

    Mitigations may change step counts, register pressure, and every
    byte of non-output memory; they must not change the output-region
    write sequence or the return value.  Observation is switched off
    because the ciphertext stream is irrelevant here and the runs get
    cheaper without it.
    """
    cfg_run = replace(config or RunConfig(), observe=False)
    divs: list[Divergence] = []
    for i, inputs in enumerate(inputs_list):
        try:
            ref = machine.run(p_ref, inputs, cfg_run)
        except MachineError as e:
            divs.append(Divergence(i, "machine-error",
                                   f"original program failed: {e}"))
            continue
        try:
            got = machine.run(p_rw, inputs, cfg_run)
        except MachineError as e:
            divs.append(Divergence(i, "machine-error",
                                   f"rewritten program failed: {e}"))
            continue
        if ref.halt_code != got.halt_code:
            divs.append(Divergence(i, "halt",
                                   f"halt {ref.halt_code} != {got.halt_code}"))
        elif ref.functional.ret != got.functional.ret:
            divs.append(Divergence(
                i, "ret",
                f"ret {ref.functional.ret:#x} != {got.functional.ret:#x}"))
        elif ref.functional.events != got.functional.events:
            divs.append(Divergence(
                i, "events",
                _first_event_mismatch(ref.functional.events,
                                      got.functional.events)))
    return EquivReport(not divs, len(inputs_list), tuple(divs))


# =============================================================================
# Plan obligations
# =============================================================================


@dataclass(frozen=True)
class Obligation:
    oid: str
    title: str
    ok: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"id": self.oid, "title": self.title, "ok": self.ok,
                "detail": self.detail}


def _site_index(p: Program):
    """site id -> instruction, and site id -> (fn, label, index)."""
    idx: dict[int, Instr] = {}
    pos: dict[int, tuple[str, str, int]] = {}
    for f in p.functions:
        for b in f.blocks:
            for i, ins in enumerate(b.instrs):
                idx[ins.site] = ins
                pos[ins.site] = (f.name, b.label, i)
    return idx, pos


# expected opcode per macro role; roles not listed are existence-only
_ROLE_OPS = {
    "update": ("add", "prf_enc"),
    "encode_xor": ("xor",),
    "decode_xor": ("xor",),
    "nonce_store": ("store",),
    "nonce_load": ("load",),
    "r_load": ("load",),
    "data_load": ("load",),
    "data_store": ("store",),
    "save": ("saveflags",),
    "restore": ("restoreflags",),
    "saveflags": ("saveflags",),
    "restoreflags": ("restoreflags",),
    "blend_cmp": ("cmp",),
    "blend_select": ("select",),
    "probe_call": ("call",),
    "roller_update": ("add",),
    "truth_store": ("store",),
    "decoy_store": ("store",),
    "truth_load": ("load",),
    "select_truth": ("select",),
    "select_decoy": ("select",),
}

_FLOW_OPS = ("jmp", "br_cond", "call", "ret", "halt")


def _all_plan_sites(bundle: PlanBundle):
    if bundle.mask:
        yield from bundle.mask.sites
    if bundle.obf:
        yield from bundle.obf.sites


def _check_coverage(p_orig: Program, bundle: PlanBundle,
                    sites: SensitiveSites) -> Obligation:
    scope = set(sites.stores) | set(sites.loads)
    if bundle.strategy == "obfuscate":
        # stack traffic is explicitly out of this strategy's contract
        idx, _ = _site_index(p_orig)
        scope = {s for s in scope
                 if s in idx and idx[s].mem() is not None
                 and idx[s].mem().base is not None}
    accounted: set[int] = {s.site for s in _all_plan_sites(bundle)}
    if bundle.alloc:
        for pr in bundle.alloc.promoted:
            accounted.update(pr.rewritten_sites)
    missing = sorted(scope - accounted)
    return Obligation(
        "coverage", "every sensitive access is wrapped or promoted",
        not missing,
        "" if not missing else f"unprotected sites: {missing}")


def _check_residue(bundle: PlanBundle) -> Obligation | None:
    if bundle.alloc is None:
        return None
    wrapped: set[int] = {s.site for s in _all_plan_sites(bundle)}
    loose = sorted(set(bundle.alloc.residual_sites) - wrapped)
    return Obligation(
        "residue", "allocator residue fell through to another pass",
        not loose,
        "" if not loose else f"residual sites left raw: {loose}")


def _check_macro_shape(p_rw: Program, bundle: PlanBundle) -> Obligation:
    idx, _ = _site_index(p_rw)
    broken: list[str] = []
    for s in _all_plan_sites(bundle):
        for role, sid in s.roles.items():
            ins = idx.get(sid)
            if ins is None:
                broken.append(f"site {s.site}: role {role} (id {sid}) missing")
                continue
            want = _ROLE_OPS.get(role)
            if want and ins.op not in want:
                broken.append(f"site {s.site}: role {role} is {ins.op}, "
                              f"wanted {'/'.join(want)}")
    if bundle.alloc:
        for pr in bundle.alloc.promoted:
            for sid in pr.rewritten_sites:
                ins = idx.get(sid)
                if ins is None or ins.op != "mov":
                    broken.append(f"promoted slot {pr.fn}/{pr.slot}: site "
                                  f"{sid} is not a lane move")
    return Obligation(
        "macro-shape", "every macro keeps its load-bearing instructions",
        not broken, "; ".join(broken[:4]))


def _check_branch_free(p_rw: Program, bundle: PlanBundle) -> Obligation:
    idx, _ = _site_index(p_rw)
    bad: list[str] = []
    for s in _all_plan_sites(bundle):
        allowed = {s.roles.get("probe_call")}
        for sid in s.span:
            ins = idx.get(sid)
            if ins is not None and ins.op in _FLOW_OPS and sid not in allowed:
                bad.append(f"site {s.site}: {ins.op} inside the macro span")
    return Obligation(
        "branch-free", "macro spans contain no control flow",
        not bad, "; ".join(bad[:4]))


def _check_nonce_layout(p_orig: Program, p_rw: Program,
                        bundle: PlanBundle) -> Obligation:
    if bundle.mask is None or not bundle.mask.nonce_slots:
        return Obligation("nonce-layout", "nonce cells are private", True)
    idx, pos = _site_index(p_rw)
    orig_frames = {f.name: mir.frame_size(f) for f in p_orig.functions}
    spill_offs: dict[str, set[int]] = {}
    for sid in bundle.mask.spill_sites:
        ins = idx.get(sid)
        if ins is None or ins.op != "store":
            continue
        m = ins.mem()
        if m is not None and m.base is None:
            spill_offs.setdefault(pos[sid][0], set()).add(m.offset & ~7)
    bad: list[str] = []
    for fn, slots in bundle.mask.nonce_slots.items():
        offs = list(slots.values())
        if len(set(offs)) != len(offs):
            bad.append(f"{fn}: nonce offsets collide")
        floor = orig_frames.get(fn, 0)
        low = [o for o in offs if o < floor]
        if low:
            bad.append(f"{fn}: nonce slot at {min(low)} inside the data frame")
        hit = set(offs) & spill_offs.get(fn, set())
        if hit:
            bad.append(f"{fn}: spill slot overlaps nonce cell at {min(hit)}")
    return Obligation(
        "nonce-layout", "nonce cells are private",
        not bad, "; ".join(bad[:4]))


def _check_init_zero(p_rw: Program, bundle: PlanBundle) -> Obligation:
    if bundle.mask is None or not bundle.mask.nonce_slots:
        return Obligation("init-zero", "nonce cells start from zero", True)
    idx, _ = _site_index(p_rw)
    missing: list[str] = []
    for fn, slots in bundle.mask.nonce_slots.items():
        zeroed: set[int] = set()
        for sid in bundle.mask.prologue.get(fn, ()):
            ins = idx.get(sid)
            if ins is None or ins.op != "store":
                continue
            m = ins.mem()
            if m is not None and m.base is None:
                zeroed.add(m.offset)
        for cell, noff in slots.items():
            if noff not in zeroed:
                missing.append(f"{fn}: cell {cell} nonce at {noff}")
    return Obligation(
        "init-zero", "nonce cells start from zero",
        not missing, "; ".join(missing[:4]))


def _check_divert_bounds(bundle: PlanBundle) -> Obligation:
    if bundle.obf is None:
        return Obligation("divert-bounds", "diverted homes stay in bounds", True)
    sb_lo = isa.SECURE_BUF_BASE
    sb_hi = sb_lo + isa.SECURE_BUF_SIZE
    heap_lo = isa.HEAP_BASE
    heap_hi = isa.HEAP_BASE + isa.HEAP_SIZE

    def placed(addr: int, width: int = 8) -> bool:
        return (sb_lo <= addr and addr + width <= sb_hi) or \
               (heap_lo <= addr and addr + width <= heap_hi)

    bad: list[str] = []
    for base, ln in bundle.obf.migrated:
        for blk in range(base, base + ln, 16):
            entry = sb_lo + nonces.heap_nonce_index(blk) * 16
            if not (sb_lo <= entry and entry + 16 <= sb_hi):
                bad.append(f"block {blk:#x}: entry {entry:#x} out of bounds")
            for half in (blk, blk + 8):
                if not placed(nonces.secure_truth_addr(half)):
                    bad.append(f"half {half:#x}: truth home out of bounds")
                if not placed(nonces.secure_decoy_addr(half)):
                    bad.append(f"half {half:#x}: decoy home out of bounds")
    return Obligation(
        "divert-bounds", "diverted homes stay in bounds",
        not bad, "; ".join(bad[:3]))


def audit_obligations(p_orig: Program, p_rw: Program, bundle: PlanBundle,
                      sites: SensitiveSites, *, inputs_list=None,
                      config: RunConfig | None = None) -> tuple[Obligation, ...]:
    """Check the rewrite against its own plan, then against the machine.

    The static obligations need only the programs and the plan.  The
    final obligation re-runs taint on the rewritten program and flags
    every tainted store the plan did not sanction; pass `inputs_list`
    to exercise it with real secrets rather than the zero image.
    """
    out: list[Obligation] = [
        _check_coverage(p_orig, bundle, sites),
        _check_macro_shape(p_rw, bundle),
        _check_branch_free(p_rw, bundle),
        _check_nonce_layout(p_orig, p_rw, bundle),
        _check_init_zero(p_rw, bundle),
        _check_divert_bounds(bundle),
    ]
    res = _check_residue(bundle)
    if res is not None:
        out.insert(1, res)
    violations = audit_no_secret_stores(
        p_rw, inputs_list, sanctioned=bundle.sanctioned_sites, config=config)
    waived = 0
    if bundle.strategy == "obfuscate":
        # diversion alone never claims the stack; raw stack traffic is a
        # known gap of the standalone strategy, not a broken rewrite
        waived = sum(1 for _, a, _ in violations
                     if isa.region_of(a) == "stack")
        violations = [v for v in violations if isa.region_of(v[1]) != "stack"]
    shown = ", ".join(f"site {s} -> {a:#x} @ step {t}"
                      for s, a, t in violations[:3])
    detail = "" if not violations else f"{len(violations)} violations: {shown}"
    if waived:
        note = f"{waived} stack stores outside the strategy contract"
        detail = f"{detail}; {note}" if detail else note
    out.append(Obligation(
        "raw-stores", "no tainted store escapes the sanctioned set",
        not violations, detail))
    return tuple(out)


def obligations_ok(obs) -> bool:
    return all(o.ok for o in obs)


# =============================================================================
# Fault injection
# =============================================================================

MUTATIONS = (
    "drop-nonce-update",
    "drop-encode-xor",
    "drop-decode-xor",
    "retarget-nonce-store",
    "drop-nonce-store",
    "drop-flag-bracket",
    "insert-raw-store",
    "swap-truth-decoy",
    "drop-decoy-store",
    "drop-zero-init",
)

# where the inserted raw store dumps its secret: a quiet heap corner no
# fixture touches
RAW_SINK = isa.HEAP_BASE + 0xF8000


class MutationError(ValueError):
    """The requested corruption has no matching macro in this plan."""


def _edit(p: Program, editor) -> Program:
    """Rebuild the program, letting `editor` drop (None), replace, or
    expand (list) each instruction."""
    funcs = []
    for f in p.functions:
        blocks = []
        for b in f.blocks:
            out: list[Instr] = []
            for ins in b.instrs:
                r = editor(ins)
                if r is None:
                    continue
                out.extend(r) if isinstance(r, list) else out.append(r)
            blocks.append(Block(b.label, tuple(out)))
        funcs.append(Function(f.name, tuple(blocks)))
    return Program(tuple(funcs), p.entry, p.secret_regions, p.heap_images)


def _drop_sites(p: Program, ids) -> Program:
    gone = set(ids)
    return _edit(p, lambda ins: None if ins.site in gone else ins)


def _masked_stores(bundle: PlanBundle):
    if bundle.mask is None:
        return []
    return [s for s in bundle.mask.sites if "store" in s.kind]


def _observable_pair(p_rw: Program, bundle: PlanBundle):
    """A masked store whose cell is read back through a masked load, so
    corrupting the stored value must surface in the output."""
    if bundle.mask is None:
        raise MutationError("no masking plan")
    idx, _ = _site_index(p_rw)
    loads = [s for s in bundle.mask.sites if "load" in s.kind]
    for st in _masked_stores(bundle):
        if st.kind == "fused-store" and st.partner is not None:
            ld = next((l for l in loads if l.site == st.partner), None)
            if ld is not None:
                return st, ld
        for ld in loads:
            if st.region == "stack" and ld.region == "stack" \
                    and st.fn == ld.fn and st.cell == ld.cell:
                return st, ld
            if st.region == "heap" and ld.region == "heap":
                ms = idx[st.roles["data_store"]].mem()
                ml = idx[ld.roles["data_load"]].mem()
                if ms is not None and ml is not None \
                        and ms.base == isa.ABS and ml.base == isa.ABS \
                        and ms.offset & ~7 == ml.offset & ~7:
                    return st, ld
    raise MutationError("no masked store feeds a masked load")


# between a macro's restoreflags and the branch it must protect, only
# flag-neutral instructions may appear
_NEUTRAL_OPS = ("store", "load", "mov", "select", "saveflags", "restoreflags")


def _bracket_before_branch(p_rw: Program, bundle: PlanBundle):
    if bundle.mask is None:
        raise MutationError("no masking plan")
    _, pos = _site_index(p_rw)
    fns = {f.name: f for f in p_rw.functions}
    for s in bundle.mask.sites:
        if "restore" not in s.roles or "save" not in s.roles:
            continue
        fn, label, i = pos[s.roles["restore"]]
        block = next(b for b in fns[fn].blocks if b.label == label)
        tail = block.instrs[i + 1:]
        # skip the macro's own trailing stores and spill restores
        k = 0
        while k < len(tail) and tail[k].site in s.span:
            if tail[k].op not in _NEUTRAL_OPS:
                break
            k += 1
        for ins in tail[k:]:
            if ins.op == "br_cond":
                return s
            if ins.op not in _NEUTRAL_OPS:
                break
    raise MutationError("no flag bracket guards a conditional branch")


def _once_store(p_rw: Program, bundle: PlanBundle):
    """A masked store outside every loop, for the single-shot raw leak."""
    stores = _masked_stores(bundle)
    if not stores:
        raise MutationError("no masked stores")
    _, pos = _site_index(p_rw)
    loop_blocks: dict[str, set[str]] = {}
    for f in p_rw.functions:
        body: set[str] = set()
        for _, members in cfg.natural_loops(f):
            body |= members
        loop_blocks[f.name] = body
    for s in stores:
        fn, label, _ = pos[s.roles["data_store"]]
        if label not in loop_blocks.get(fn, set()):
            return s
    return stores[0]


def _obf_store(bundle: PlanBundle):
    if bundle.obf is None:
        raise MutationError("no diversion plan")
    for s in bundle.obf.sites:
        if s.kind == "store":
            return s
    raise MutationError("no diverted stores")


def corrupt(p_rw: Program, bundle: PlanBundle, name: str) -> tuple[Program, str]:
    """Apply one catalogue corruption to a rewritten program.

    Returns the corrupted program and a human-readable note naming the
    macro that was broken.  Raises MutationError when the plan has no
    macro of the required shape.
    """
    idx, _ = _site_index(p_rw)
    if name == "drop-nonce-update":
        targets = [s for s in _masked_stores(bundle) if "update" in s.roles]
        if not targets:
            raise MutationError("no masked stores")
        s = targets[0]
        return (_drop_sites(p_rw, [s.roles["update"]]),
                f"site {s.site}: nonce never advances")
    if name == "drop-encode-xor":
        s, _ld = _observable_pair(p_rw, bundle)
        return (_drop_sites(p_rw, [s.roles["encode_xor"]]),
                f"site {s.site}: plaintext stored unmasked")
    if name == "drop-decode-xor":
        _st, ld = _observable_pair(p_rw, bundle)
        return (_drop_sites(p_rw, [ld.roles["decode_xor"]]),
                f"site {ld.site}: load keeps the mask on")
    if name == "retarget-nonce-store":
        s, _ld = _observable_pair(p_rw, bundle)
        sid = s.roles["nonce_store"]
        ins = idx[sid]
        m = ins.mem()
        moved = Instr(ins.op, (Mem(m.base, m.offset + 8, m.width),) + ins.args[1:],
                      ins.site)
        return (_edit(p_rw, lambda x: moved if x.site == sid else x),
                f"site {s.site}: nonce lands one cell over")
    if name == "drop-nonce-store":
        s, _ld = _observable_pair(p_rw, bundle)
        return (_drop_sites(p_rw, [s.roles["nonce_store"]]),
                f"site {s.site}: stored nonce goes stale")
    if name == "drop-flag-bracket":
        s = _bracket_before_branch(p_rw, bundle)
        return (_drop_sites(p_rw, [s.roles["save"], s.roles["restore"]]),
                f"site {s.site}: macro clobbers the branch flags")
    if name == "insert-raw-store":
        s = _once_store(p_rw, bundle)
        enc = s.roles["encode_xor"]
        raw_reg = idx[enc].args[0]
        fresh = max(idx) + 1
        leak = Instr("store", (Mem(isa.ABS, RAW_SINK, 8), raw_reg), fresh)

        def editor(x):
            return [leak, x] if x.site == enc else x
        return (_edit(p_rw, editor),
                f"site {s.site}: raw value copied to {RAW_SINK:#x}")
    if name == "swap-truth-decoy":
        s = _obf_store(bundle)
        tid, did = s.roles["truth_store"], s.roles["decoy_store"]
        tm, dm = idx[tid].mem(), idx[did].mem()

        def editor(x):
            if x.site == tid:
                return Instr(x.op, (dm,) + x.args[1:], x.site)
            if x.site == did:
                return Instr(x.op, (tm,) + x.args[1:], x.site)
            return x
        return (_edit(p_rw, editor),
                f"site {s.site}: truth and decoy homes swapped")
    if name == "drop-decoy-store":
        s = _obf_store(bundle)
        return (_drop_sites(p_rw, [s.roles["decoy_store"]]),
                f"site {s.site}: decoy half never written")
    if name == "drop-zero-init":
        if bundle.mask is None or not bundle.mask.nonce_slots:
            raise MutationError("no nonce cells to initialize")
        for fn, slots in bundle.mask.nonce_slots.items():
            offs = set(slots.values())
            for sid in bundle.mask.prologue.get(fn, ()):
                ins = idx.get(sid)
                if ins is None or ins.op != "store":
                    continue
                m = ins.mem()
                if m is not None and m.base is None and m.offset in offs:
                    return (_drop_sites(p_rw, [sid]),
                            f"{fn}: nonce cell at {m.offset} never zeroed")
        raise MutationError("no prologue zero store found")
    raise MutationError(f"unknown mutation {name!r}")


def applicable_mutations(p_rw: Program, bundle: PlanBundle) -> tuple[str, ...]:
    out = []
    for name in MUTATIONS:
        try:
            corrupt(p_rw, bundle, name)
        except MutationError:
            continue
        out.append(name)
    return tuple(out)


@dataclass(frozen=True)
class FaultOutcome:
    mutation: str
    detail: str
    caught_by: tuple[str, ...]     # "trace" and/or "audit:<id>" entries

    @property
    def caught(self) -> bool:
        return bool(self.caught_by)

    def to_dict(self) -> dict:
        return {"mutation": self.mutation, "detail": self.detail,
                "caught": self.caught, "caught_by": list(self.caught_by)}


def fault_injection(p_ref: Program, p_rw: Program, bundle: PlanBundle,
                    sites: SensitiveSites, name: str, inputs_list,
                    config: RunConfig | None = None) -> FaultOutcome:
    """Corrupt one macro, then see which layer notices."""
    bad, detail = corrupt(p_rw, bundle, name)
    caught: list[str] = []
    eq = trace_equiv(p_ref, bad, inputs_list, config)
    if not eq.ok:
        caught.append("trace")
    audit_inputs = list(inputs_list)[:1]
    for o in audit_obligations(p_ref, bad, bundle, sites,
                               inputs_list=audit_inputs, config=config):
        if not o.ok:
            caught.append(f"audit:{o.oid}")
    return FaultOutcome(name, detail, tuple(caught))
