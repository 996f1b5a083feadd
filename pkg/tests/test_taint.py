"""Taint propagation rules, each pinned by a minimal program."""

import pytest

from xexlab import isa, mir, taint

OUT = isa.OUT_BASE


def trace(src, **kw):
    return taint.trace_taint(mir.parse_program(src), **kw)


def wrap(body, directives=""):
    return f".entry t\n{directives}func t {{\nentry:\n{body}\n  ret\n}}\n"


SECRET8 = ".secret 0x100000, 8\n.heap 0x100000, 8, 0f 0e 0d 0c 0b 0a 09 08\n"


class TestDataFlow:
    def test_secret_region_load_taints_register_and_site(self):
        src = wrap("mov g1, 0x100000\n  load g2, [g1+0]\n  store [sp+0], g2", SECRET8)
        run = trace(src)
        sites = run.sites
        # load at site 1 sensitive, store at site 2 sensitive
        assert 1 in sites.loads
        assert 2 in sites.stores
        assert sites.slots_of("t") == (0,)

    def test_untainted_flow_is_clean(self):
        src = wrap("mov g1, 5\n  add g1, 9\n  store [sp+0], g1")
        sites = trace(src).sites
        assert not sites.stores
        assert not sites.loads
        assert not sites.heap_regions

    def test_alu_mixes_taint_in(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  mov g3, 7\n"
            "  xor g3, g2\n  store [sp+8], g3", SECRET8)
        run = trace(src)
        assert any(s == run.sites.stores for s in [run.sites.stores])
        assert run.sites.slots_of("t") == (0,)

    def test_mov_overwrites_taint(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  mov g2, 5\n  store [sp+0], g2",
            SECRET8)
        assert not trace(src).sites.stores

    def test_taint_through_memory_round_trip(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  store [sp+0], g2\n"
            "  load g3, [sp+0]\n  store [g1+8], g3", SECRET8)
        sites = trace(src).sites
        # heap cell 0x100008 now tainted too, coalesced with the declared secret
        assert sites.heap_regions == ((0x100000, 16),)

    def test_narrow_store_taints_only_its_bytes(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  store.1 [sp+0], g2\n"
            "  load.1 g3, [sp+7]\n  store [g1+16], g3", SECRET8)
        sites = trace(src).sites
        # byte 7 of the slot was never tainted, so the final store is clean
        assert sites.heap_regions == ((0x100000, 8),)

    def test_tainted_address_marks_load_and_store(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  and g2, 0xF8\n"
            "  add g2, 0x100100\n  load g3, [g2+0]\n  store [g2+8], 1", SECRET8)
        sites = trace(src).sites
        assert 4 in sites.loads    # secret-indexed read
        assert 5 in sites.stores   # secret-indexed write


class TestDeclassification:
    def test_output_stores_never_sensitive(self):
        src = wrap(
            f"mov g1, 0x100000\n  load g2, [g1+0]\n  store [{OUT:#x}], g2", SECRET8)
        sites = trace(src).sites
        assert not sites.stores
        assert 1 in sites.loads

    def test_output_region_shadow_not_set(self):
        src = wrap(
            f"mov g1, 0x100000\n  load g2, [g1+0]\n  store [{OUT:#x}], g2\n"
            f"  load g3, [{OUT:#x}]\n  store [g1+8], g3", SECRET8)
        sites = trace(src).sites
        # value reloaded from the output window counts as public
        assert sites.heap_regions == ((0x100000, 8),)


class TestControlFlow:
    def test_branch_on_secret_taints_both_arms(self):
        src = """.entry t
.secret 0x100000, 8
.heap 0x100000, 8, 01 00 00 00 00 00 00 00
func t {
entry:
  mov g1, 0x100000
  load g2, [g1+0]
  test g2, 1
  br_cond ne, one
  mov g3, 10
  jmp join
one:
  mov g3, 20
  jmp join
join:
  store [sp+0], g3
  ret
}
"""
        run = trace(src)
        assert run.sites.slots_of("t") == (0,)

    def test_scope_closes_at_postdominator(self):
        src = """.entry t
.secret 0x100000, 8
.heap 0x100000, 8, 01 00 00 00 00 00 00 00
func t {
entry:
  mov g1, 0x100000
  load g2, [g1+0]
  test g2, 1
  br_cond ne, one
  jmp join
one:
  jmp join
join:
  mov g4, 5
  store [sp+8], g4
  ret
}
"""
        sites = trace(src).sites
        # writes after the join are clean again
        assert not sites.stores

    def test_branch_arms_that_both_return(self):
        src = """.entry t
.secret 0x100000, 8
.heap 0x100000, 8, 01 00 00 00 00 00 00 00
func t {
entry:
  call helper
  store [sp+0], g0
  ret
}
func helper {
entry:
  mov g1, 0x100000
  load g2, [g1+0]
  test g2, 1
  br_cond ne, one
  mov g0, 10
  ret
one:
  mov g0, 20
  ret
}
"""
        run = trace(src)
        # g0 tainted inside helper under secret control; caller store flagged
        assert run.sites.slots_of("t") == (0,)

    def test_scope_does_not_leak_into_caller_after_join(self):
        src = """.entry t
.secret 0x100000, 8
.heap 0x100000, 8, 01 00 00 00 00 00 00 00
func t {
entry:
  call helper
  mov g5, 1
  store [sp+0], g5
  ret
}
func helper {
entry:
  mov g1, 0x100000
  load g2, [g1+0]
  test g2, 1
  br_cond ne, one
  jmp fin
one:
  jmp fin
fin:
  ret
}
"""
        assert not trace(src).sites.stores

    def test_select_on_tainted_flags(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  cmp g2, 5\n"
            "  mov g3, 1\n  select g3, 2, ult\n  store [sp+0], g3", SECRET8)
        assert trace(src).sites.slots_of("t") == (0,)

    def test_saveflags_carries_taint(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  cmp g2, 5\n"
            "  saveflags\n  store [sp+0], g15", SECRET8)
        assert trace(src).sites.slots_of("t") == (0,)


class TestSourcesAndSpecials:
    def test_taint_label_register_form(self):
        src = wrap("mov g1, 0xAA\n  taint_label g1, 0\n  store [sp+0], g1")
        assert trace(src).sites.slots_of("t") == (0,)

    def test_taint_label_region_form(self):
        src = wrap(
            "taint_label 0x100040, 8\n  mov g1, 0x100040\n"
            "  load g2, [g1+0]\n  store [sp+0], g2")
        run = trace(src)
        assert run.sites.slots_of("t") == (0,)
        assert run.sites.heap_regions == ((0x100040, 8),)

    def test_taint_regs_parameter(self):
        src = wrap("store [sp+0], g1")
        assert trace(src, taint_regs=("g1",)).sites.slots_of("t") == (0,)
        assert not trace(src).sites.stores

    def test_rdrand_clears_taint(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  rdrand g2\n  store [sp+0], g2",
            SECRET8)
        assert not trace(src).sites.stores

    def test_prf_enc_taints_pair_from_key(self):
        src = wrap(
            "mov g1, 0x100000\n  load g2, [g1+0]\n  mov v15L, g2\n  mov v15H, 1\n"
            "  mov v0L, 1\n  mov v0H, 2\n  prf_enc v0L\n  store [sp+0], v0H", SECRET8)
        assert trace(src).sites.slots_of("t") == (0,)


class TestViolationsAndMerge:
    def test_sanctioned_sites_not_violations(self):
        src = wrap("mov g1, 0x100000\n  load g2, [g1+0]\n  store [sp+0], g2", SECRET8)
        p = mir.parse_program(src)
        run = taint.trace_taint(p, sanctioned_sites=frozenset({2}))
        assert run.tainted_stores and not run.violations
        run2 = taint.trace_taint(p)
        assert run2.violations

    def test_merge_unions_everything(self):
        src = """.entry t
.secret 0x100000, 8
func t {
entry:
  load g2, [g1+0]
  cmp g3, 0
  br_cond eq, a
  store [sp+0], g2
  ret
a:
  store [sp+8], g2
  ret
}
"""
        p = mir.parse_program(src)
        sites = taint.analyze_sites(
            p,
            [{"regs": {"g1": 0x100000, "g3": 0}},
             {"regs": {"g1": 0x100000, "g3": 1}}])
        assert sites.slots_of("t") == (0, 1)
        assert len(sites.stores) == 2

    def test_merge_rejects_different_programs(self):
        a = trace(wrap("ret")).sites
        b = trace(wrap("mov g1, 1\n  ret")).sites
        with pytest.raises(ValueError):
            a.merge(b)

    def test_json_round_trip(self):
        src = wrap("mov g1, 0x100000\n  load g2, [g1+0]\n  store [sp+0], g2", SECRET8)
        sites = trace(src).sites
        assert taint.SensitiveSites.from_dict(sites.to_dict()) == sites
