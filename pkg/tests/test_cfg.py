"""Control-flow graph utilities: orderings, postdominators, loops, liveness."""

from xexlab import cfg, isa, mir

DIAMOND = """\
.entry f
func f {
entry:
  cmp g1, 0
  br_cond eq, left
  jmp right
left:
  mov g2, 1
  jmp join
right:
  mov g2, 2
  jmp join
join:
  mov g0, g2
  ret
}
"""

LOOP = """\
.entry f
func f {
entry:
  mov g1, 0
  jmp head
head:
  cmp g1, 10
  br_cond uge, exit
  jmp body
body:
  add g1, 1
  jmp head
exit:
  mov g0, g1
  ret
}
"""


def fn(src):
    return mir.parse_program(src).functions[0]


def test_successors_and_predecessors():
    f = fn(DIAMOND)
    succ = cfg.successors(f)
    assert succ["entry"] == ("left", "right")
    assert succ["left"] == ("join",)
    assert succ["join"] == ()
    pred = cfg.predecessors(f)
    assert sorted(pred["join"]) == ["left", "right"]


def test_reverse_postorder_starts_at_entry():
    f = fn(DIAMOND)
    rpo = cfg.reverse_postorder(f)
    assert rpo[0] == "entry"
    assert rpo[-1] == "join" or "join" in rpo[2:]
    assert set(rpo) == {"entry", "left", "right", "join"}


def test_postdominators_diamond():
    f = fn(DIAMOND)
    ipdom = cfg.immediate_postdominators(f)
    # both arms post-dominated by the join block
    assert ipdom["left"] == "join"
    assert ipdom["right"] == "join"
    assert ipdom["entry"] == "join"
    assert ipdom["join"] is None  # exits straight to the virtual sink


def test_postdominators_loop_branch():
    f = fn(LOOP)
    ipdom = cfg.immediate_postdominators(f)
    assert ipdom["head"] == "exit"
    assert ipdom["body"] == "head"


def test_natural_loops():
    f = fn(LOOP)
    loops = cfg.natural_loops(f)
    assert len(loops) == 1
    header, body = loops[0]
    assert header == "head"
    assert body == frozenset({"head", "body"})


def test_live_out_diamond():
    f = fn(DIAMOND)
    live = cfg.live_out(f)
    # g2 written in both arms, read at join
    assert isa.parse_reg("g2") in live["left"]
    assert isa.parse_reg("g2") in live["right"]
    assert isa.parse_reg("g2") not in live["join"]


def test_live_through_loop():
    f = fn(LOOP)
    live = cfg.live_out(f)
    g1 = isa.parse_reg("g1")
    assert g1 in live["entry"]
    assert g1 in live["body"]
    assert g1 in live["head"]  # live into exit


def test_live_at_instruction_granularity():
    f = fn(DIAMOND)
    g1 = isa.parse_reg("g1")
    # g1 dead after the cmp consumes it
    assert g1 in cfg.live_at(f, "entry", 0)
    assert g1 not in cfg.live_at(f, "entry", 1)


def test_call_treats_argument_registers_as_used():
    src = """.entry f
func f {
entry:
  mov g3, 7
  call g_user
  ret
}
func g_user {
entry:
  mov g0, g3
  ret
}
"""
    f = mir.parse_program(src).functions[0]
    live = cfg.live_at(f, "entry", 1)
    assert isa.parse_reg("g3") in live
