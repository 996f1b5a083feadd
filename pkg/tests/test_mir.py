"""Parser/printer fidelity and static validation."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xexlab import isa, mir

SAMPLE = """\
.entry main
.secret 0x100200, 64
.heap 0x100200, 4, 01 02 03 04

func main {
entry:
  mov g1, 0x100200
  load g2, [g1+0]
  load.4 g3, [g1+4]
  store.1 [sp+16], g3
  add g2, g3
  cmp g2, 1000
  br_cond ult, small
  jmp done
small:
  xor g2, g2
  jmp done
done:
  store [0x4480000], g2
  call leaf
  ret
}

func leaf {
entry:
  store [sp+0], g0
  load g0, [sp+0]
  ret
}
"""


def test_sample_parses_and_validates():
    p = mir.parse_program(SAMPLE)
    assert p.entry == "main"
    assert p.secret_regions == ((0x100200, 64),)
    assert p.heap_images == ((0x100200, b"\x01\x02\x03\x04"),)
    assert mir.validate(p) == []
    assert [f.name for f in p.functions] == ["main", "leaf"]
    assert p.function("main").labels() == ("entry", "small", "done")


def test_print_parse_round_trip_on_sample():
    p = mir.parse_program(SAMPLE)
    text = mir.print_program(p)
    assert mir.print_program(mir.parse_program(text)) == text


def test_sites_default_sequential_and_annotations_round_trip():
    p = mir.parse_program(SAMPLE)
    sites = [ins.site for _, _, ins in p.instructions()]
    assert sites == list(range(len(sites)))
    # explicit annotations survive
    src = ".entry m\nfunc m {\ne:\n  mov g0, 1 @7\n  ret @3\n}\n"
    p2 = mir.parse_program(src)
    assert [i.site for _, _, i in p2.instructions()] == [7, 3]
    printed = mir.print_program(p2)
    assert "@7" in printed and "@3" in printed


def test_width_suffix_round_trip():
    src = ".entry m\nfunc m {\ne:\n  load.2 g1, [g2+6]\n  store.4 [sp+4], 9\n  ret\n}\n"
    p = mir.parse_program(src)
    load = p.functions[0].blocks[0].instrs[0]
    assert load.mem().width == 2
    assert mir.print_program(mir.parse_program(mir.print_program(p))) == mir.print_program(p)


def test_absolute_memory_operand():
    src = ".entry m\nfunc m {\ne:\n  store [0x4480000], 5\n  ret\n}\n"
    p = mir.parse_program(src)
    m = p.functions[0].blocks[0].instrs[0].mem()
    assert m.base == isa.ABS
    assert m.offset == 0x4480000
    assert not m.is_reg_based()


def test_parse_errors_carry_line_numbers():
    with pytest.raises(mir.ParseError) as e:
        mir.parse_program(".entry m\nfunc m {\ne:\n  bogus g1\n}\n")
    assert e.value.line_no == 4
    with pytest.raises(mir.ParseError):
        mir.parse_program("func m {\ne:\n  ret\n}\n")  # missing .entry
    with pytest.raises(mir.ParseError):
        mir.parse_program(".entry m\nfunc m {\n  ret\n}\n")  # no label


def test_validate_catches_broken_references():
    bad = ".entry m\nfunc m {\ne:\n  jmp nowhere\n}\n"
    assert any("nowhere" in d for d in mir.validate(mir.parse_program(bad)))
    bad = ".entry gone\nfunc m {\ne:\n  ret\n}\n"
    assert any("gone" in d for d in mir.validate(mir.parse_program(bad)))
    bad = ".entry m\nfunc m {\ne:\n  call missing\n}\n"
    assert any("missing" in d for d in mir.validate(mir.parse_program(bad)))


def test_validate_catches_overlapping_stack_slots():
    bad = ".entry m\nfunc m {\ne:\n  store [sp+0], 1\n  store.4 [sp+6], 2\n  ret\n}\n"
    assert any("overlap" in d for d in mir.validate(mir.parse_program(bad)))


def test_stack_slots_and_frame_size():
    f = mir.parse_program(SAMPLE).function("leaf")
    slots = mir.stack_slots(f)
    assert slots == {0: (0, 8)}
    assert mir.frame_size(f) == 8
    f2 = mir.parse_program(SAMPLE).function("main")
    assert 16 in [off for off, _ in mir.stack_slots(f2).values()]
    assert mir.frame_size(f2) == 24


# ---------------------------------------------------------------------------
# Randomized round trip: whatever the printer emits, the parser must
# reconstruct exactly, so passes can rewrite programs through text freely.

_regs = st.integers(0, isa.NUM_REGS - 1).map(mir.Reg)
_imms = st.integers(0, isa.MASK64).map(mir.Imm)
_widths = st.sampled_from([1, 2, 4, 8])


@st.composite
def _instrs(draw):
    choice = draw(st.integers(0, 5))
    site = draw(st.integers(0, 500))
    if choice == 0:
        w = draw(_widths)
        base = draw(st.sampled_from(["sp", "reg", "abs"]))
        off = draw(st.integers(0, 0x1000)) & ~(w - 1)
        if base == "sp":
            m = mir.Mem(None, off, w)
        elif base == "abs":
            m = mir.Mem(isa.ABS, isa.HEAP_BASE + off, w)
        else:
            m = mir.Mem(draw(st.integers(0, 15)), off, w)
        if draw(st.booleans()):
            return mir.Instr("load", (draw(_regs), m), site)
        return mir.Instr("store", (m, draw(st.one_of(_regs, _imms))), site)
    if choice == 1:
        return mir.Instr(draw(st.sampled_from(["mov", "add", "xor", "mul", "shr"])),
                         (draw(_regs), draw(st.one_of(_regs, _imms))), site)
    if choice == 2:
        return mir.Instr("cmp", (draw(_regs), draw(_imms)), site)
    if choice == 3:
        return mir.Instr("select",
                         (draw(_regs), draw(st.one_of(_regs, _imms)),
                          draw(st.sampled_from(isa.CONDS))), site)
    if choice == 4:
        return mir.Instr("saveflags", (), site)
    return mir.Instr("rdrand", (draw(_regs),), site)


@given(st.lists(_instrs(), min_size=1, max_size=12), st.booleans())
@settings(max_examples=150, deadline=None)
def test_round_trip_random_programs(body, second_block):
    blocks = [mir.Block("entry", tuple(body) + (mir.Instr("jmp", ("exit",), 900),))]
    if second_block:
        blocks.append(mir.Block("mid", (mir.Instr("jmp", ("exit",), 901),)))
    blocks.append(mir.Block("exit", (mir.Instr("ret", (), 902),)))
    p = mir.Program((mir.Function("f", tuple(blocks)),), "f")
    text = mir.print_program(p)
    p2 = mir.parse_program(text)
    assert p2 == p
    assert mir.print_program(p2) == text
