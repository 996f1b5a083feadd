"""Machine model constants: registers, opcodes, conditions, memory layout.

Everything downstream (parser, interpreters, passes, attackers) agrees on the
numbers defined here.  Registers are uniform 64-bit cells; the distinction
between general registers and vector lanes is purely a naming and reservation
convention.  The flags word is its own architectural cell, moved to and from
the designated general register g15 by saveflags/restoreflags.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1

# =============================================================================
# Registers
# =============================================================================

NUM_GENERAL = 16
NUM_VECTOR = 16  # v0..v15, two 64-bit lanes each

# Register ids: g0..g15 -> 0..15, then v0L,v0H,v1L,...,v15H -> 16..47.
REG_G0 = 0
REG_G15 = 15
REG_V_BASE = 16
NUM_REGS = REG_V_BASE + 2 * NUM_VECTOR  # 48

# saveflags/restoreflags transfer the flags word through this register,
# the way lahf/sahf go through AH.
FLAGS_HOME = REG_G15

# Memory operand base sentinel for absolute addressing ([0x2480000]).
# Encoders keep it distinct from -1, which marks sp-relative operands.
ABS = -2


def general(n: int) -> int:
    if not 0 <= n < NUM_GENERAL:
        raise ValueError(f"no general register g{n}")
    return n


def lane(vreg: int, high: bool) -> int:
    if not 0 <= vreg < NUM_VECTOR:
        raise ValueError(f"no vector register v{vreg}")
    return REG_V_BASE + 2 * vreg + (1 if high else 0)


def reg_name(rid: int) -> str:
    if 0 <= rid < NUM_GENERAL:
        return f"g{rid}"
    if REG_V_BASE <= rid < NUM_REGS:
        k = rid - REG_V_BASE
        return f"v{k // 2}{'H' if k % 2 else 'L'}"
    raise ValueError(f"bad register id {rid}")


def parse_reg(name: str) -> int:
    """Register name -> id.  Raises ValueError on anything unknown.

    >>> parse_reg("g3")
    3
    >>> reg_name(parse_reg("v8L"))
    'v8L'
    """
    if len(name) >= 2 and name[0] == "g" and name[1:].isdigit():
        return general(int(name[1:]))
    if len(name) >= 3 and name[0] == "v" and name[-1] in "LH" and name[1:-1].isdigit():
        return lane(int(name[1:-1]), name[-1] == "H")
    raise ValueError(f"unknown register {name!r}")


ALL_REG_NAMES = tuple(reg_name(i) for i in range(NUM_REGS))

# Lanes reserved by the mitigation passes.  Strategy 2 allocates secret stack
# slots into v8..v15 lanes; the PRF masking variant parks its state in
# v14/v15, the xorshift variant in v13..v15, and the obfuscation pass keeps
# its rolling decoy in v12L.
S2_LANE_POOL = tuple(lane(v, h) for v in range(8, 16) for h in (False, True))
AES_STATE_LANES = (lane(14, False), lane(14, True), lane(15, False), lane(15, True))
XS_STATE_LANES = tuple(lane(v, h) for v in (13, 14, 15) for h in (False, True))
DECOY_LANE = lane(12, False)

# =============================================================================
# Opcodes
# =============================================================================

OPCODES = (
    "load", "store", "mov",
    "xor", "and", "or", "add", "sub", "shl", "shr", "mul",
    "cmp", "test", "select",
    "jmp", "br_cond", "call", "ret",
    "saveflags", "restoreflags",
    "rdrand", "prf_enc", "heap_alloc", "taint_label", "halt",
)

# ALU ops that write a destination register and set flags.
ALU_OPS = ("xor", "and", "or", "add", "sub", "shl", "shr", "mul")
# Flag-setting comparison ops with no register result.
CMP_OPS = ("cmp", "test")

# Condition codes, x86-flavoured over (zf, sf, cf, of).
CONDS = ("eq", "ne", "ult", "ule", "ugt", "uge", "slt", "sle", "sgt", "sge")

FLAG_ZF = 1
FLAG_SF = 2
FLAG_CF = 4
FLAG_OF = 8


def cond_holds(cond: str, flags: int) -> bool:
    zf = bool(flags & FLAG_ZF)
    sf = bool(flags & FLAG_SF)
    cf = bool(flags & FLAG_CF)
    of = bool(flags & FLAG_OF)
    if cond == "eq":
        return zf
    if cond == "ne":
        return not zf
    if cond == "ult":
        return cf
    if cond == "ule":
        return cf or zf
    if cond == "ugt":
        return not cf and not zf
    if cond == "uge":
        return not cf
    if cond == "slt":
        return sf != of
    if cond == "sle":
        return zf or (sf != of)
    if cond == "sgt":
        return not zf and (sf == of)
    if cond == "sge":
        return sf == of
    raise ValueError(f"unknown condition {cond!r}")


STORE_WIDTHS = (1, 2, 4, 8)

# =============================================================================
# Memory layout
# =============================================================================
#
# Three disjoint regions.  The heap sits on a 1 MiB boundary so that all heap
# addresses have distinct low 20 bits, which is what the heap nonce index hash
# needs for injectivity.  The ciphertext granule is a 16-byte block; all bases
# are block-aligned.

BLOCK = 16

STACK_LIMIT = 0x0008_0000   # lowest legal stack address
STACK_BASE = 0x0010_0000    # stack grows down from here (exclusive top)
HEAP_BASE = 0x0010_0000
HEAP_SIZE = 0x0010_0000     # 1 MiB
DATA_BASE = 0x0200_0000

# Data-segment internal map (offsets from DATA_BASE).
RAND_BUF_ENTRIES = 1024
RAND_BUF_OFF = 0x0000                       # 1024 x 8 B = 8 KiB
NONCE_STORE_OFF = 0x1_0000                  # heap nonce store
NONCE_STORE_ENTRIES = 256 * 1024            # normal mode: 256Ki x 8 B = 2 MiB
HASH_MAX_INDEX = 162_012                    # max value of heap_nonce_index
EXPANDED_GROUPS = 10                        # expanded mode: 10 x 16 B per index
NONCE_STORE_SIZE_NORMAL = NONCE_STORE_ENTRIES * 8
NONCE_STORE_SIZE_EXPANDED = (HASH_MAX_INDEX + 1) * EXPANDED_GROUPS * 16

SECURE_BUF_OFF = 0x0200_0000                # past the largest nonce store
SECURE_BUF_SIZE = 0x0040_0000               # 16 B per index, 4 MiB reserved

OUT_OFF = 0x0248_0000
OUT_SIZE = 0x1_0000

DATA_SIZE = OUT_OFF + OUT_SIZE

RAND_BUF_BASE = DATA_BASE + RAND_BUF_OFF
NONCE_STORE_BASE = DATA_BASE + NONCE_STORE_OFF
SECURE_BUF_BASE = DATA_BASE + SECURE_BUF_OFF
OUT_BASE = DATA_BASE + OUT_OFF


def region_of(addr: int) -> str | None:
    """'stack' | 'heap' | 'data' | None for an address."""
    if STACK_LIMIT <= addr < STACK_BASE:
        return "stack"
    if HEAP_BASE <= addr < HEAP_BASE + HEAP_SIZE:
        return "heap"
    if DATA_BASE <= addr < DATA_BASE + DATA_SIZE:
        return "data"
    return None


# =============================================================================
# Mixing primitives
# =============================================================================
#
# One splitmix64-style diffusion step is the workhorse for the deterministic
# rdrand stream, the tweak derivation, and the Feistel rounds of the block
# permutation.  Not cryptography; just a well-mixed, collision-free-by-
# construction permutation machinery that both engines reproduce bit for bit.

GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer.  Bijective on u64; zero is its fixed point,
    which the stream below never feeds it.

    >>> hex(mix64(0x9E3779B97F4A7C15))
    '0xe220a8397b1dcdaf'
    >>> mix64(12345) == mix64(12345)
    True
    """
    x &= MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & MASK64
    return x ^ (x >> 31)


def splitmix_stream(seed: int):
    """Infinite deterministic 64-bit stream; the rdrand model."""
    s = seed & MASK64
    while True:
        s = (s + GOLDEN) & MASK64
        yield mix64(s)
