"""Execution engine semantics: ALU flags, control flow, memory, observation.

Flag expectations are written out by hand from the x86-style definitions,
not read back from the engine, so a dispatch bug cannot hide behind its
own output.
"""

import pytest

from xexlab import isa, machine, mir
from xexlab.runtime import MachineError, RunConfig, Seeds


def run_src(src, inputs=None, config=None, **kw):
    return machine.run(mir.parse_program(src), inputs=inputs, config=config, **kw)


def wrap(body, extra_funcs=""):
    return f".entry t\nfunc t {{\nentry:\n{body}\n}}\n{extra_funcs}"


def flags_after(setup):
    # saveflags copies the flags word into g15; halt path preserves it
    src = wrap(f"{setup}\n  saveflags\n  mov g0, g15\n  ret")
    return run_src(src).functional.ret


ZF, SF, CF, OF = isa.FLAG_ZF, isa.FLAG_SF, isa.FLAG_CF, isa.FLAG_OF


class TestFlags:
    def test_add_carry_to_zero(self):
        assert flags_after("mov g1, 0xFFFFFFFFFFFFFFFF\n  add g1, 1") == ZF | CF

    def test_add_signed_overflow(self):
        assert flags_after("mov g1, 0x7FFFFFFFFFFFFFFF\n  add g1, 1") == SF | OF

    def test_add_plain(self):
        assert flags_after("mov g1, 2\n  add g1, 3") == 0

    def test_sub_borrow(self):
        assert flags_after("mov g1, 0\n  sub g1, 1") == SF | CF

    def test_sub_signed_overflow(self):
        assert flags_after("mov g1, 0x8000000000000000\n  sub g1, 1") == OF

    def test_sub_to_zero(self):
        assert flags_after("mov g1, 9\n  sub g1, 9") == ZF

    def test_cmp_does_not_write_dst(self):
        src = wrap("mov g1, 5\n  cmp g1, 7\n  mov g0, g1\n  ret")
        assert run_src(src).functional.ret == 5

    def test_cmp_flags_match_sub(self):
        assert flags_after("mov g1, 5\n  cmp g1, 7") == SF | CF

    def test_logic_clears_carry_and_overflow(self):
        assert flags_after("mov g1, 0xFFFFFFFFFFFFFFFF\n  add g1, 1\n  xor g1, g1") == ZF

    def test_test_sets_zf_sf_only(self):
        assert flags_after("mov g1, 0x8000000000000000\n  test g1, g1") == SF
        assert flags_after("mov g1, 5\n  test g1, 2") == ZF

    def test_shl_sign_and_carry(self):
        assert flags_after("mov g1, 1\n  shl g1, 63") == SF
        assert flags_after("mov g1, 3\n  shl g1, 63") == SF | CF

    def test_shift_by_zero_preserves_flags(self):
        # the sub sets ZF; a zero shift must not disturb it
        assert flags_after("mov g1, 9\n  sub g1, 9\n  mov g2, 5\n  shl g2, 0") == ZF

    def test_shift_amount_masked_to_six_bits(self):
        src = wrap("mov g1, 0xABCD\n  mov g2, 64\n  shl g1, g2\n  mov g0, g1\n  ret")
        assert run_src(src).functional.ret == 0xABCD

    def test_shr_carry_is_last_bit_out(self):
        assert flags_after("mov g1, 2\n  shr g1, 1") == 0
        assert flags_after("mov g1, 3\n  shr g1, 1") == CF

    def test_mul_overflow_sets_cf_of(self):
        assert flags_after("mov g1, 0x100000000\n  mul g1, 0x100000000") == ZF | CF | OF

    def test_mul_no_overflow(self):
        assert flags_after("mov g1, 3\n  mul g1, 5") == 0

    def test_restoreflags_round_trip(self):
        src = wrap(
            "mov g1, 0\n  sub g1, 1\n  saveflags\n"      # SF|CF into g15
            "  mov g2, 1\n  add g2, 1\n"                 # clobber flags
            "  restoreflags\n  saveflags\n  mov g0, g15\n  ret")
        assert run_src(src).functional.ret == SF | CF


class TestControl:
    def test_br_cond_taken_and_fallthrough(self):
        src = """.entry t
func t {
entry:
  mov g1, 5
  cmp g1, 5
  br_cond eq, yes
  mov g0, 1
  ret
yes:
  mov g0, 2
  ret
}
"""
        assert run_src(src).functional.ret == 2

    def test_select_true_false(self):
        src = wrap("mov g1, 7\n  cmp g1, 7\n  mov g0, 1\n  select g0, 99, eq\n  ret")
        assert run_src(src).functional.ret == 99
        src = wrap("mov g1, 7\n  cmp g1, 8\n  mov g0, 1\n  select g0, 99, eq\n  ret")
        assert run_src(src).functional.ret == 1

    def test_call_ret_frames_are_independent(self):
        src = """.entry t
func t {
entry:
  store [sp+0], 11
  call leaf
  load g1, [sp+0]
  add g0, g1
  ret
}
func leaf {
entry:
  store [sp+0], 500
  load g0, [sp+0]
  ret
}
"""
        assert run_src(src).functional.ret == 511

    def test_return_value_travels_in_g0(self):
        src = wrap("call leaf\n  add g0, 1\n  ret",
                   "func leaf {\nentry:\n  mov g0, 41\n  ret\n}\n")
        assert run_src(src).functional.ret == 42

    def test_halt_nonzero_raises(self):
        with pytest.raises(MachineError) as e:
            run_src(wrap("halt 3"))
        assert e.value.kind == "halt"

    def test_halt_zero_returns(self):
        res = run_src(wrap("mov g0, 5\n  halt"))
        assert res.halt_code == 0
        assert res.functional.ret == 5

    def test_step_limit_enforced(self):
        src = """.entry t
func t {
spin:
  jmp spin
}
"""
        with pytest.raises(MachineError) as e:
            run_src(src, config=RunConfig(step_limit=1000))
        assert e.value.kind == "step-limit"


class TestMemory:
    def test_narrow_store_load(self):
        src = wrap(
            "mov g1, 0x1122334455667788\n  store [sp+0], g1\n"
            "  load.4 g0, [sp+0]\n  load.1 g2, [sp+7]\n"
            "  shl g2, 32\n  or g0, g2\n  ret")
        assert run_src(src).functional.ret == 0x11_55667788

    def test_unwritten_memory_reads_zero(self):
        src = wrap("mov g1, 0x180000\n  load g0, [g1+0]\n  ret")
        assert run_src(src).functional.ret == 0

    def test_out_of_range_access_faults(self):
        with pytest.raises(MachineError) as e:
            run_src(wrap("mov g1, 0x10\n  load g0, [g1+0]\n  ret"))
        assert e.value.kind == "oob"

    def test_stack_overflow_on_call_faults(self):
        src = """.entry t
func t {
entry:
  store [sp+0], 1
  call t
  ret
}
"""
        with pytest.raises(MachineError) as e:
            run_src(src, config=RunConfig(step_limit=10_000_000))
        assert e.value.kind == "stack-overflow"

    def test_heap_alloc_bumps_and_aligns(self):
        src = wrap("heap_alloc g1, 24\n  heap_alloc g2, 3\n  sub g2, g1\n  mov g0, g2\n  ret")
        assert run_src(src).functional.ret == 24
        src = wrap("heap_alloc g1, 3\n  heap_alloc g2, 8\n  sub g2, g1\n  mov g0, g2\n  ret")
        assert run_src(src).functional.ret == 8

    def test_heap_images_preloaded(self):
        src = """.entry t
.heap 0x100100, 8, ef cd ab 89 67 45 23 01
func t {
entry:
  mov g1, 0x100100
  load g0, [g1+0]
  ret
}
"""
        assert run_src(src).functional.ret == 0x0123456789ABCDEF

    def test_input_registers_and_memory(self):
        src = wrap("load g0, [g1+0]\n  add g0, g2\n  ret")
        res = run_src(src, inputs={
            "regs": {"g1": 0x100040, "g2": 5},
            "mem": {0x100040: (100).to_bytes(8, "little")},
        })
        assert res.functional.ret == 105


class TestObservation:
    def test_out_stores_become_events(self):
        src = wrap(f"store [{isa.OUT_BASE:#x}], 7\n  store [{isa.OUT_BASE + 8:#x}], 9\n  ret")
        assert run_src(src).functional.events == ((isa.OUT_BASE, 7, 8), (isa.OUT_BASE + 8, 9, 8))

    def test_identical_store_emits_no_record(self):
        a = isa.HEAP_BASE
        src = wrap(f"mov g1, {a:#x}\n  store [g1+0], 5\n  store [g1+0], 5\n  ret")
        res = run_src(src)
        assert len(list(res.obs.for_addr(a).records())) == 1

    def test_changed_store_reencrypts(self):
        a = isa.HEAP_BASE
        src = wrap(f"mov g1, {a:#x}\n  store [g1+0], 5\n  store [g1+0], 6\n  ret")
        recs = list(run_src(src).obs.for_addr(a).records())
        assert len(recs) == 2
        assert recs[0][2:] != recs[1][2:]

    def test_straddling_store_records_both_blocks(self):
        a = isa.HEAP_BASE + 12
        src = wrap(f"mov g1, {a:#x}\n  store [g1+0], 0x0101010101010101\n  ret")
        res = run_src(src)
        changed = {r[1] for r in res.obs.records() if r[0] > 0}
        assert changed == {isa.HEAP_BASE, isa.HEAP_BASE + 16}

    def test_snapshot_covers_preloaded_state(self):
        src = """.entry t
.heap 0x100000, 2, ff ff
func t {
entry:
  ret
}
"""
        res = run_src(src)
        snap = {r[1] for r in res.obs.records() if r[0] == 0}
        assert 0x100000 in snap
        # R buffer occupies 512 blocks of the data region
        assert sum(1 for a in snap if isa.RAND_BUF_BASE <= a < isa.RAND_BUF_BASE + 0x2000) == 512

    def test_observation_can_be_disabled(self):
        src = wrap(f"mov g1, {isa.HEAP_BASE:#x}\n  store [g1+0], 5\n  ret")
        res = run_src(src, config=RunConfig(observe=False))
        assert list(res.obs.records()) == []

    def test_trace_consistency_on_real_run(self):
        from xexlab import xex
        a = isa.HEAP_BASE
        body = f"mov g1, {a:#x}\n"
        body += "".join(f"  store [g1+0], {v}\n" for v in range(1, 30))
        res = run_src(wrap(body + "  ret"))
        assert xex.verify_trace_consistency(res.obs) == []


class TestDeterminism:
    def test_rdrand_stream_reproducible(self):
        src = wrap("rdrand g1\n  rdrand g2\n  xor g1, g2\n  mov g0, g1\n  ret")
        a = run_src(src).functional.ret
        b = run_src(src).functional.ret
        assert a == b != 0

    def test_rdrand_depends_on_seed(self):
        src = wrap("rdrand g0\n  ret")
        a = run_src(src, config=RunConfig(seeds=Seeds(rdrand=1))).functional.ret
        b = run_src(src, config=RunConfig(seeds=Seeds(rdrand=2))).functional.ret
        assert a != b

    def test_rdrand_continues_past_buffer_prefill(self):
        # the R buffer consumed the first 1024 draws; rdrand must not repeat them
        from xexlab import nonces
        buf = nonces.random_buffer_bytes(seed=1)
        first = run_src(wrap("rdrand g0\n  ret")).functional.ret
        entries = {int.from_bytes(buf[i:i + 8], "little") for i in range(0, len(buf), 8)}
        assert first not in entries

    def test_prf_enc_deterministic_and_key_dependent(self):
        src = wrap(
            "mov v0L, 123\n  mov v0H, 456\n  mov v15L, g1\n  mov v15H, 9\n"
            "  prf_enc v0L\n  mov g0, v0L\n  ret")
        a = run_src(src, inputs={"regs": {"g1": 1}}).functional.ret
        b = run_src(src, inputs={"regs": {"g1": 1}}).functional.ret
        c = run_src(src, inputs={"regs": {"g1": 2}}).functional.ret
        assert a == b
        assert a != c

    def test_identical_runs_identical_traces(self):
        src = wrap(
            f"mov g1, {isa.HEAP_BASE:#x}\n  mov g2, 0\nloop_head:\n"
            "  store [g1+0], g2\n  add g2, 1\n  cmp g2, 50\n  br_cond ult, loop_head\n  ret")
        src = src.replace("loop_head:\n", "")  # body written flat below
        prog = """.entry t
func t {
entry:
  mov g1, 0x100000
  mov g2, 1
head:
  store [g1+0], g2
  add g2, 1
  cmp g2, 50
  br_cond ult, head
  ret
}
"""
        r1 = run_src(prog)
        r2 = run_src(prog)
        assert list(r1.obs.records()) == list(r2.obs.records())
        assert r1.cost == r2.cost == run_src(prog).cost


class TestCost:
    def test_cost_model_weights(self):
        base = run_src(wrap("ret")).cost
        assert run_src(wrap("mov g1, 1\n  ret")).cost == base + 1
        assert run_src(wrap("load g1, [sp+0]\n  ret"),
                       config=RunConfig()).cost == base + 3
        assert run_src(wrap("rdrand g1\n  ret")).cost == base + 150
        assert run_src(wrap("mov v15L, 1\n  mov v15H, 2\n  prf_enc v0L\n  ret")).cost == base + 2 + 4
