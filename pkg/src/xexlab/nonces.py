"""Nonce machinery: index hashes, the increment rule, and the buffer models.

Three data-segment structures back the mitigations:

* RandomNonceBuffer -- 1024 entries x 8 bytes of deterministic randomness,
  filled once at program initialization; initial nonces are picked from it by
  the low address bits.
* HeapNonceStore -- per-heap-cell active nonces.  Normal mode maps the hashed
  cell index straight to one 8-byte entry (collisions silently share).
  Expanded mode gives each index 10 tagged 16-byte entries (8-byte address
  tag + 8-byte nonce) and fails loudly when an 11th address lands on one
  index.
* SecureBuffer -- diversion target for obfuscated heap cells; one 16-byte
  entry per ciphertext block, indexed by the same hash.

The hash spreads a 1 MiB heap over the store with a multiplicative constant
close to the golden ratio of 2^20: distinct 8-aligned addresses below 2^20
never collide, and the largest index an 8-aligned address can reach is
HASH_MAX_INDEX.
"""

from __future__ import annotations

import struct

from . import isa

HASH_MULT = 648056
HASH_SHIFT = 22
ADDR_MASK = 0xFFFFF          # low 20 bits: position inside a 1 MiB heap
INITIAL_INDEX_MASK = 0x3FF

NONCE_INCREMENT = 3


def initial_nonce_index(addr: int) -> int:
    """Entry index into the RandomNonceBuffer for a cell's first nonce.

    >>> initial_nonce_index(0x100008)
    8
    """
    return addr & INITIAL_INDEX_MASK


def heap_nonce_index(addr: int) -> int:
    """Hashed index of a heap cell into the nonce store.

    >>> heap_nonce_index(0x100000)
    0
    >>> heap_nonce_index(0x100008) in range(163_000)
    True
    """
    return ((addr & ADDR_MASK) * HASH_MULT) >> HASH_SHIFT


def next_nonce(n: int) -> int:
    """Successor nonce.  The increment is 3, never 1: two consecutive nonces
    always differ in at least two bits, so a one-bit change of the plaintext
    can never cancel the mask change.

    >>> next_nonce(0)
    3
    >>> next_nonce(2**64 - 2)
    1
    """
    return (n + NONCE_INCREMENT) & isa.MASK64


def random_buffer_bytes(seed: int) -> bytes:
    """The RandomNonceBuffer image for a given seed (1024 x 8 bytes)."""
    stream = isa.splitmix_stream(seed)
    return b"".join(struct.pack("<Q", next(stream)) for _ in range(isa.RAND_BUF_ENTRIES))


def random_buffer_entry(seed: int, index: int) -> int:
    if not 0 <= index < isa.RAND_BUF_ENTRIES:
        raise IndexError(index)
    img = random_buffer_bytes(seed)
    return struct.unpack_from("<Q", img, index * 8)[0]


class CollisionOverflow(RuntimeError):
    """Expanded mode ran out of group entries for one hashed index."""


class HeapNonceStore:
    """Library-level model of the heap nonce store.

    Operates over its own bytearray by default, or over an externally supplied
    one (the machine's data segment) so tests can inspect what emitted IR did.
    """

    def __init__(self, expanded: bool = False, backing: bytearray | None = None,
                 base: int = 0):
        self.expanded = expanded
        size = isa.NONCE_STORE_SIZE_EXPANDED if expanded else isa.NONCE_STORE_SIZE_NORMAL
        self.mem = backing if backing is not None else bytearray(size)
        self.base = base

    # ---- address resolution ----

    @staticmethod
    def group_offset(idx: int, g: int) -> int:
        """Offset of group entry g for a hashed index, expanded layout."""
        return (idx * isa.EXPANDED_GROUPS + g) * 16

    def resolve(self, addr: int) -> int:
        """Nonce cell offset (within the store) holding addr's active nonce.

        Normal mode: the hashed index picks the cell directly; distinct
        addresses mapping to one index share it, which is the documented
        ~50% utilization trade-off.  Expanded mode: scan the 10 tagged group
        entries at the index; return the entry tagged with addr, claiming the
        first empty entry (writing the tag) when absent.
        """
        idx = heap_nonce_index(addr)
        if not self.expanded:
            return idx * 8
        group_base = idx * isa.EXPANDED_GROUPS * 16
        empty_at = None
        for g in range(isa.EXPANDED_GROUPS):
            off = group_base + g * 16
            tag = struct.unpack_from("<Q", self.mem, self.base + off)[0]
            if tag == addr:
                return off + 8
            if tag == 0 and empty_at is None:
                empty_at = off
        if empty_at is None:
            raise CollisionOverflow(
                f"index {idx}: all {isa.EXPANDED_GROUPS} group entries occupied")
        struct.pack_into("<Q", self.mem, self.base + empty_at, addr)
        return empty_at + 8

    # ---- nonce access ----

    def get(self, addr: int) -> int:
        off = self.resolve(addr)
        return struct.unpack_from("<Q", self.mem, self.base + off)[0]

    def put(self, addr: int, nonce: int) -> None:
        off = self.resolve(addr)
        struct.pack_into("<Q", self.mem, self.base + off, nonce & isa.MASK64)


def secure_entry_offset(addr: int) -> int:
    """Offset of a heap cell's SecureBuffer entry half, within the buffer.

    Entries are 16 bytes per ciphertext block, indexed by the hash of the
    block base.  The low cell of a block owns the first half (its diverted
    truth); the second half is the block's decoy cell.
    """
    block = addr & ~0xF
    idx = heap_nonce_index(block)
    half = 8 if addr & 0x8 else 0
    return idx * 16 + half


def secure_truth_addr(addr: int) -> int:
    """Absolute address where an obfuscated heap cell's truth lives.

    Even slot (addr bit 3 clear): diverted into the SecureBuffer entry.
    Odd slot: stays at the original address.
    """
    if addr & 0x8:
        return addr
    return isa.SECURE_BUF_BASE + secure_entry_offset(addr)


def secure_decoy_addr(addr: int) -> int:
    """Absolute address where the decoy write for this cell's store goes:
    the original cell for even slots, the entry's decoy half for odd slots."""
    if addr & 0x8:
        return isa.SECURE_BUF_BASE + secure_entry_offset(addr)
    return addr
