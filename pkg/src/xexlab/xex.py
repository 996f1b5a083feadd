"""Deterministic memory-encryption model and the attacker's observation trace.

Memory is encrypted per 16-byte block in XEX form:

    ct = P(pt ^ T(addr)) ^ T(addr)

where P is a fixed keyed permutation (a 4-round Feistel network over the two
64-bit block halves) and T derives a 128-bit tweak from the physical block
address.  There is no nonce and no freshness in the model itself: the same
plaintext at the same address always produces the same ciphertext, which is
the entire side channel.  The permutation is seeded and reproducible, not
cryptographically strong; what matters is that it is a bijection per address,
so plaintext changes and ciphertext changes coincide exactly.

The observer emits one record per block whose plaintext changed in a step.
A store that rewrites identical bytes produces no record; that silence is the
signal the collision attacker reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import isa

FEISTEL_ROUNDS = 4


@dataclass(frozen=True)
class EncryptionModel:
    """Key schedule derived from a 64-bit seed."""

    seed: int
    round_keys: tuple[int, ...]
    tweak_key_lo: int
    tweak_key_hi: int

    @classmethod
    def from_seed(cls, seed: int) -> "EncryptionModel":
        stream = isa.splitmix_stream(seed ^ 0xC0DE_D00D_FEED_FACE)
        rks = tuple(next(stream) for _ in range(FEISTEL_ROUNDS))
        return cls(seed, rks, next(stream), next(stream))

    def key_material(self) -> tuple[int, ...]:
        """Flat uint64 vector for the compiled engine."""
        return (*self.round_keys, self.tweak_key_lo, self.tweak_key_hi)


def tweak(model: EncryptionModel, block_addr: int) -> tuple[int, int]:
    t_lo = isa.mix64(model.tweak_key_lo ^ block_addr)
    t_hi = isa.mix64(model.tweak_key_hi ^ (block_addr * isa.GOLDEN & isa.MASK64))
    return t_lo, t_hi


def _permute(model: EncryptionModel, lo: int, hi: int) -> tuple[int, int]:
    for rk in model.round_keys:
        lo, hi = hi, lo ^ isa.mix64((hi + rk) & isa.MASK64)
    return lo, hi


def encrypt_halves(model: EncryptionModel, block_addr: int, lo: int, hi: int) -> tuple[int, int]:
    t_lo, t_hi = tweak(model, block_addr)
    lo, hi = _permute(model, lo ^ t_lo, hi ^ t_hi)
    return lo ^ t_lo, hi ^ t_hi


def encrypt_block(model: EncryptionModel, block_addr: int, plaintext: bytes) -> bytes:
    """Ciphertext of one 16-byte block.

    >>> m = EncryptionModel.from_seed(7)
    >>> a = encrypt_block(m, 0x100000, bytes(16))
    >>> b = encrypt_block(m, 0x100010, bytes(16))
    >>> len(a), a == b
    (16, False)
    """
    if block_addr & (isa.BLOCK - 1):
        raise ValueError(f"block address 0x{block_addr:x} not 16-aligned")
    if len(plaintext) != isa.BLOCK:
        raise ValueError("plaintext must be 16 bytes")
    lo = int.from_bytes(plaintext[:8], "little")
    hi = int.from_bytes(plaintext[8:], "little")
    clo, chi = encrypt_halves(model, block_addr, lo, hi)
    return clo.to_bytes(8, "little") + chi.to_bytes(8, "little")


# =============================================================================
# Observation trace
# =============================================================================


@dataclass
class ObservationTrace:
    """Ordered change records (step, block_address, ciphertext).

    Ciphertexts are carried as two 64-bit halves.  Step 0 holds the initial
    snapshot: one record per block that contains any nonzero byte before the
    first instruction executes.
    """

    steps: list[int] = field(default_factory=list)
    addrs: list[int] = field(default_factory=list)
    ct_lo: list[int] = field(default_factory=list)
    ct_hi: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, step: int, addr: int, lo: int, hi: int) -> None:
        self.steps.append(step)
        self.addrs.append(addr)
        self.ct_lo.append(lo)
        self.ct_hi.append(hi)

    def ct_hex(self, i: int) -> str:
        raw = self.ct_lo[i].to_bytes(8, "little") + self.ct_hi[i].to_bytes(8, "little")
        return raw.hex()

    def records(self):
        for i in range(len(self.steps)):
            yield self.steps[i], self.addrs[i], self.ct_lo[i], self.ct_hi[i]

    def for_addr(self, block_addr: int) -> "ObservationTrace":
        sub = ObservationTrace()
        for i, a in enumerate(self.addrs):
            if a == block_addr:
                sub.append(self.steps[i], a, self.ct_lo[i], self.ct_hi[i])
        return sub

    def blocks_changed_between(self, step_lo: int, step_hi: int) -> set[int]:
        """Block addresses with a change record in [step_lo, step_hi)."""
        return {
            self.addrs[i]
            for i in range(len(self.steps))
            if step_lo <= self.steps[i] < step_hi and self.steps[i] > 0
        }

    # ---- serialization ----

    def to_jsonl(self) -> str:
        lines = []
        for i in range(len(self.steps)):
            lines.append(json.dumps(
                {"step": self.steps[i], "addr": self.addrs[i], "ct": self.ct_hex(i)},
                separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "ObservationTrace":
        t = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            raw = bytes.fromhex(rec["ct"])
            t.append(rec["step"], rec["addr"],
                     int.from_bytes(raw[:8], "little"),
                     int.from_bytes(raw[8:], "little"))
        return t


def verify_trace_consistency(trace: ObservationTrace) -> list[str]:
    """Model-level sanity: consecutive records at one address never repeat a
    ciphertext (a change record must be a change)."""
    problems: list[str] = []
    last: dict[int, tuple[int, int]] = {}
    for step, addr, lo, hi in trace.records():
        if addr in last and last[addr] == (lo, hi):
            problems.append(f"step {step}: block 0x{addr:x} recorded unchanged ciphertext")
        last[addr] = (lo, hi)
    return problems
