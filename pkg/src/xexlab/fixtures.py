"""Victim programs for the laboratory.

Four fixtures, each built to light up a different part of the pipeline:

- ``ladder``: a 512-step conditional-swap exponentiation skeleton.  Every
  round parks the current key bit in two single-byte-valued stack cells,
  which under deterministic encryption is exactly the classic dictionary
  leak.  An untainted loop counter cell next to them gives any attacker a
  reliable iteration clock; the mitigations must close the bit cells while
  leaving that clock alone.
- ``ctswap``: two 64-byte heap bignums swapped in place when the key bit
  is set.  The unprotected version alternates between two ciphertexts per
  block (or stays silent), feeding the collision attacker.
- ``stackhot``: no interesting leak shape, just register pressure.  Two
  sequential waves of hot sensitive slots overflow the spare lane pool so
  promotion has to rank, recycle and give up in the documented order, and
  a helper called mid-wave inherits an empty pool.
- ``micro``: the smallest read-modify-write loop on one heap cell.  Small
  enough to eyeball every rewrite, so most pass-level tests start here.

Each fixture carries its source text, a meta table of the addresses the
attack rigs need, and a seeded input maker whose expected digest comes
from an independent big-integer model of the same computation, not from
the interpreter.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

from . import isa, mir
from .passes.common import static_sp

M64 = (1 << 64) - 1


# =============================================================================
# Fixture container
# =============================================================================


@dataclass(frozen=True)
class Fixture:
    """One victim program plus everything a rig needs to drive it."""

    name: str
    text: str
    meta: dict
    maker: Callable[[int], tuple[dict, dict]] = field(repr=False)

    def program(self) -> mir.Program:
        return _parse(self.text)

    def make_input(self, seed: int) -> tuple[dict, dict]:
        """(engine inputs, expectations) for one seed.

        Inputs carry the key bytes (and operand images) at their home
        addresses; expectations carry the digest from the reference model
        and, where the fixture has a bit-serial secret, the bit stream an
        attacker is scored against.
        """
        return self.maker(seed)


@lru_cache(maxsize=None)
def _parse(text: str) -> mir.Program:
    p = mir.parse_program(text)
    diags = mir.validate(p)
    if diags:
        raise ValueError("fixture does not validate: " + "; ".join(diags))
    return p


def stack_cell_addr(p: mir.Program, off: int, fn: str | None = None) -> int:
    """Absolute address of frame cell `off` in `fn` (default entry).

    Rewrites grow frames, which slides every stack cell down in memory;
    monitored blocks must be computed from the program actually run, not
    from the pristine source.
    """
    fn = fn or p.entry
    frames = {f.name: mir.frame_size(f) for f in p.functions}
    return static_sp(p, frames)[fn] + off


def key_bits(key: bytes, n: int) -> tuple[int, ...]:
    """Bit-serial order used by the loops: per 64-bit word, MSB first."""
    words = [int.from_bytes(key[8 * j:8 * j + 8], "little")
             for j in range(len(key) // 8)]
    return tuple((words[i >> 6] >> (63 - (i & 63))) & 1 for i in range(n))


def _rng(name: str, seed: int) -> random.Random:
    return random.Random(f"{name}:{seed}")


# =============================================================================
# ladder
# =============================================================================

_LADDER_KEY = 0x180000
_LADDER_ACC0 = 0x180100
_LADDER_ACC1 = 0x180110

_LADDER_TEXT = f"""\
.entry main
.secret {_LADDER_KEY:#x}, 64

; Conditional-swap ladder over a 512-bit key.  The accumulators live in
; separate heap blocks; pbit/kbit/counter each sit alone in a stack block.
; The pbit store is wedged between cmp and br_cond on purpose: whatever
; wraps it has to keep the flags alive.

func main {{
entry:
  store [sp+0], 0
  store [sp+16], 0
  store [sp+32], 0
  mov g6, 0
  load g0, [{_LADDER_KEY:#x}]
  store [{_LADDER_ACC0:#x}], g0
  load g1, [{_LADDER_KEY + 8:#x}]
  store [{_LADDER_ACC1:#x}], g1
  jmp loop
loop:
  mov g7, g6
  shr g7, 6
  shl g7, 3
  add g7, {_LADDER_KEY:#x}
  load g8, [g7+0]
  mov g10, g6
  and g10, 63
  mov g9, 63
  sub g9, g10
  shr g8, g9
  and g8, 1
  load g9, [sp+16]
  mov g10, g8
  xor g10, g9
  mov g11, 0
  sub g11, g10
  load g0, [{_LADDER_ACC0:#x}]
  load g1, [{_LADDER_ACC1:#x}]
  mov g2, g0
  xor g2, g1
  and g2, g11
  xor g0, g2
  xor g1, g2
  mov g3, g0
  mul g3, g1
  add g3, 3
  mov g0, g1
  call step
  store [{_LADDER_ACC0:#x}], g3
  store [{_LADDER_ACC1:#x}], g0
  store [sp+32], g8
  add g6, 1
  store [sp+0], g6
  cmp g6, 512
  store [sp+16], g8
  br_cond ult, loop
done:
  load g0, [{_LADDER_ACC0:#x}]
  load g1, [{_LADDER_ACC1:#x}]
  xor g0, g1
  store [{isa.OUT_BASE:#x}], g0
  ret
}}

func step {{
entry:
  mul g0, g0
  add g0, 7
  ret
}}
"""


def _ladder_digest(key: bytes) -> int:
    bits = key_bits(key, 512)
    w = [int.from_bytes(key[8 * j:8 * j + 8], "little") for j in range(8)]
    acc0, acc1 = w[0], w[1]
    pbit = 0
    for kb in bits:
        if kb ^ pbit:
            acc0, acc1 = acc1, acc0
        acc0, acc1 = (acc0 * acc1 + 3) & M64, (acc1 * acc1 + 7) & M64
        pbit = kb
    return acc0 ^ acc1


def _ladder_input(seed: int) -> tuple[dict, dict]:
    rnd = _rng("ladder", seed)
    key = bytearray(rnd.getrandbits(8) for _ in range(64))
    key[7] |= 0x80      # normalize: first processed bit is always 1
    key = bytes(key)
    return (
        {"mem": {_LADDER_KEY: key}},
        {"digest": _ladder_digest(key), "bits": key_bits(key, 512), "key": key},
    )


# =============================================================================
# ctswap
# =============================================================================

_CTSWAP_KEY = 0x190000
_CTSWAP_A = 0x1A0000
_CTSWAP_B = 0x1B0000


def _ctswap_text() -> str:
    L = [
        ".entry main",
        f".secret {_CTSWAP_KEY:#x}, 64",
        "",
        "; Branchless swap of two 8-word heap operands, once per key bit.",
        "; Word pairs are unrolled so every access is a constant address.",
        "",
        "func main {",
        "entry:",
        "  store [sp+0], 0",
        "  mov g6, 0",
        "  jmp loop",
        "loop:",
        "  mov g7, g6",
        "  shr g7, 6",
        "  shl g7, 3",
        f"  add g7, {_CTSWAP_KEY:#x}",
        "  load g8, [g7+0]",
        "  mov g2, g6",
        "  and g2, 63",
        "  mov g3, 63",
        "  sub g3, g2",
        "  shr g8, g3",
        "  and g8, 1",
        "  mov g9, 0",
        "  sub g9, g8",
    ]
    for j in range(8):
        L += [
            f"  load g0, [{_CTSWAP_A + 8 * j:#x}]",
            f"  load g1, [{_CTSWAP_B + 8 * j:#x}]",
            "  mov g2, g0",
            "  xor g2, g1",
            "  and g2, g9",
            "  xor g0, g2",
            f"  store [{_CTSWAP_A + 8 * j:#x}], g0",
            "  xor g1, g2",
            f"  store [{_CTSWAP_B + 8 * j:#x}], g1",
        ]
    L += [
        "  add g6, 1",
        "  store [sp+0], g6",
        "  cmp g6, 512",
        "  br_cond ult, loop",
        "done:",
        "  mov g0, 0",
    ]
    for j in range(8):
        L += [
            f"  load g1, [{_CTSWAP_A + 8 * j:#x}]",
            f"  mul g1, {4 * j + 3}",
            "  add g0, g1",
            f"  load g1, [{_CTSWAP_B + 8 * j:#x}]",
            f"  mul g1, {4 * j + 5}",
            "  add g0, g1",
        ]
    L += [f"  store [{isa.OUT_BASE:#x}], g0", "  ret", "}"]
    return "\n".join(L) + "\n"


def _ctswap_digest(key: bytes, a: list[int], b: list[int]) -> int:
    aw, bw = list(a), list(b)
    for kb in key_bits(key, 512):
        if kb:
            aw, bw = bw, aw
    d = 0
    for j in range(8):
        d = (d + aw[j] * (4 * j + 3)) & M64
        d = (d + bw[j] * (4 * j + 5)) & M64
    return d


def _ctswap_input(seed: int) -> tuple[dict, dict]:
    rnd = _rng("ctswap", seed)
    key = bytes(rnd.getrandbits(8) for _ in range(64))
    aw = [rnd.getrandbits(64) for _ in range(8)]
    bw = [rnd.getrandbits(64) for _ in range(8)]
    for j in range(8):
        if aw[j] == bw[j]:         # a silent swap would hide the whole point
            bw[j] ^= 1
    ab = b"".join(v.to_bytes(8, "little") for v in aw)
    bb = b"".join(v.to_bytes(8, "little") for v in bw)
    return (
        {"mem": {_CTSWAP_KEY: key, _CTSWAP_A: ab, _CTSWAP_B: bb}},
        {"digest": _ctswap_digest(key, aw, bw),
         "bits": key_bits(key, 512), "key": key},
    )


# =============================================================================
# stackhot
# =============================================================================

_STACKHOT_KEY = 0x1C0000


def _stackhot_text() -> str:
    a_off = [8 * j for j in range(8)]
    b_off = [64 + 8 * j for j in range(16)]
    nar = 192
    L = [
        ".entry main",
        f".secret {_STACKHOT_KEY:#x}, 32",
        "",
        "; Two waves of sensitive stack slots.  Wave A (8 slots) dies before",
        "; wave B (16 slots) starts, so lanes must be handed back and rebound;",
        "; the pool is smaller than the demand either way.  mixer runs between",
        "; the waves and gets whatever lanes are left, which is none.",
        "",
        "func main {",
        "entry:",
        f"  load g1, [{_STACKHOT_KEY:#x}]",
        "  store [sp+0], g1",
    ]
    for j in range(1, 8):
        L += ["  mov g2, g1", f"  add g2, {17 * j}", f"  store [sp+{a_off[j]}], g2"]
    L += ["  mov g6, 0", "  jmp loop_a", "loop_a:"]
    for j in range(8):
        L += [f"  load g2, [sp+{a_off[j]}]", "  add g2, g1",
              f"  store [sp+{a_off[j]}], g2"]
    L += ["  add g6, 1", "  cmp g6, 32", "  br_cond ult, loop_a",
          "mid:",
          "  load g0, [sp+0]"]
    for j in range(1, 8):
        L += ["  mul g0, 3", f"  load g2, [sp+{a_off[j]}]", "  add g0, g2"]
    L += ["  call mixer", "  mov g3, g0", "  jmp wave_b",
          "wave_b:",
          "  store [sp+64], g3"]
    for j in range(1, 16):
        L += ["  mov g2, g3", f"  add g2, {7 * j}", f"  store [sp+{b_off[j]}], g2"]
    L += ["  mov g6, 0", "  jmp loop_b", "loop_b:"]
    for j in range(16):
        L += [f"  load g2, [sp+{b_off[j]}]", "  add g2, g3",
              f"  store [sp+{b_off[j]}], g2"]
    L += ["  add g6, 1", "  cmp g6, 32", "  br_cond ult, loop_b",
          "fold:",
          "  load g0, [sp+64]"]
    for j in range(1, 16):
        L += ["  mul g0, 3", f"  load g2, [sp+{b_off[j]}]", "  add g0, g2"]
    L += [
        # split halves through one narrow cell: ineligible for promotion,
        # so the masking residue is never empty on this fixture
        f"  store.4 [sp+{nar}], g0",
        "  mov g2, g0",
        "  shr g2, 32",
        f"  store.4 [sp+{nar + 4}], g2",
        f"  load g2, [sp+{nar}]",
        "  add g0, g2",
        f"  store [{isa.OUT_BASE:#x}], g0",
        "  ret",
        "}",
        "",
        "func mixer {",
        "entry:",
        "  store [sp+0], g0",
    ]
    for j in range(1, 8):
        L += ["  mov g1, g0", f"  add g1, {5 * j}", f"  store [sp+{8 * j}], g1"]
    for j in range(8):
        L += [f"  load g1, [sp+{8 * j}]", "  add g1, g0",
              f"  store [sp+{8 * j}], g1"]
    L += ["  mov g0, 0"]
    for j in range(8):
        L += [f"  load g1, [sp+{8 * j}]", "  xor g0, g1"]
    L += ["  ret", "}"]
    return "\n".join(L) + "\n"


def _stackhot_mixer(x: int) -> int:
    m = [(x + 5 * j) & M64 for j in range(8)]
    m = [(v + x) & M64 for v in m]
    r = 0
    for v in m:
        r ^= v
    return r


def _stackhot_digest(key: bytes) -> int:
    k = int.from_bytes(key[:8], "little")
    a = [(k + 17 * j) & M64 for j in range(8)]
    for _ in range(32):
        a = [(v + k) & M64 for v in a]
    g0 = a[0]
    for j in range(1, 8):
        g0 = (g0 * 3 + a[j]) & M64
    g3 = _stackhot_mixer(g0)
    b = [(g3 + 7 * j) & M64 for j in range(16)]
    for _ in range(32):
        b = [(v + g3) & M64 for v in b]
    g0 = b[0]
    for j in range(1, 16):
        g0 = (g0 * 3 + b[j]) & M64
    return (g0 + g0) & M64


def _stackhot_input(seed: int) -> tuple[dict, dict]:
    rnd = _rng("stackhot", seed)
    key = bytes(rnd.getrandbits(8) for _ in range(32))
    return ({"mem": {_STACKHOT_KEY: key}},
            {"digest": _stackhot_digest(key), "key": key})


# =============================================================================
# micro
# =============================================================================

_MICRO_KEY = 0x1D0000
_MICRO_CELL = 0x1D0100

_MICRO_TEXT = f"""\
.entry main
.secret {_MICRO_KEY:#x}, 8

func main {{
entry:
  load g1, [{_MICRO_KEY:#x}]
  mov g6, 0
  jmp loop
loop:
  load g2, [{_MICRO_CELL:#x}]
  add g2, g1
  store [{_MICRO_CELL:#x}], g2
  add g6, 1
  cmp g6, 16
  br_cond ult, loop
done:
  load g2, [{_MICRO_CELL:#x}]
  store [{isa.OUT_BASE:#x}], g2
  ret
}}
"""


def _micro_input(seed: int) -> tuple[dict, dict]:
    rnd = _rng("micro", seed)
    key = bytes(rnd.getrandbits(8) for _ in range(8))
    k = int.from_bytes(key, "little")
    return ({"mem": {_MICRO_KEY: key}},
            {"digest": (16 * k) & M64, "key": key})


# =============================================================================
# Registry
# =============================================================================

FIXTURE_NAMES = ("ladder", "ctswap", "stackhot", "micro")


@lru_cache(maxsize=None)
def get(name: str) -> Fixture:
    if name == "ladder":
        return Fixture("ladder", _LADDER_TEXT, {
            "key": _LADDER_KEY, "key_len": 64, "bits": 512,
            "acc": (_LADDER_ACC0, _LADDER_ACC1),
            "counter_off": 0, "pbit_off": 16, "kbit_off": 32,
            "iters": 512, "out": isa.OUT_BASE,
        }, _ladder_input)
    if name == "ctswap":
        return Fixture("ctswap", _ctswap_text(), {
            "key": _CTSWAP_KEY, "key_len": 64, "bits": 512,
            "a_base": _CTSWAP_A, "b_base": _CTSWAP_B, "words": 8,
            "counter_off": 0, "iters": 512, "out": isa.OUT_BASE,
        }, _ctswap_input)
    if name == "stackhot":
        return Fixture("stackhot", _stackhot_text(), {
            "key": _STACKHOT_KEY, "key_len": 32, "out": isa.OUT_BASE,
        }, _stackhot_input)
    if name == "micro":
        return Fixture("micro", _MICRO_TEXT, {
            "key": _MICRO_KEY, "key_len": 8, "cell": _MICRO_CELL,
            "iters": 16, "out": isa.OUT_BASE,
        }, _micro_input)
    raise KeyError(f"unknown fixture {name!r}")


def all_fixtures() -> tuple[Fixture, ...]:
    return tuple(get(n) for n in FIXTURE_NAMES)
