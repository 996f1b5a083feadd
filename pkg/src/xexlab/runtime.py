"""Run-facing types shared by both engines and the public API."""

from __future__ import annotations

from dataclasses import dataclass, field

from .xex import EncryptionModel, ObservationTrace


@dataclass(frozen=True)
class CostModel:
    """Per-opcode-class weights.  Absolute numbers are a proxy; only the
    relative ordering of mitigated totals is ever asserted."""

    mem: int = 3
    rdrand: int = 150
    prf: int = 4
    other: int = 1


@dataclass(frozen=True)
class Seeds:
    rdrand: int = 1
    enc_key: int = 2

    def model(self) -> EncryptionModel:
        return EncryptionModel.from_seed(self.enc_key)


@dataclass(frozen=True)
class RunConfig:
    cost: CostModel = CostModel()
    seeds: Seeds = Seeds()
    step_limit: int = 50_000_000
    expanded_nonce_store: bool = False
    observe: bool = True          # collect the ciphertext observation trace


@dataclass(frozen=True)
class FunctionalTrace:
    """What the program observably did: ordered output-region writes and the
    entry function's return value.  Steps are deliberately absent so that
    mitigated runs compare equal to their originals."""

    events: tuple[tuple[int, int, int], ...]   # (addr, value, width)
    ret: int


@dataclass
class RunResult:
    functional: FunctionalTrace
    obs: ObservationTrace
    cost: int
    steps: int
    regs: tuple[int, ...]
    flags: int
    halt_code: int
    engine: str
    memory: dict[str, bytearray] = field(default_factory=dict)  # live views

    def read_mem(self, addr: int, width: int = 8) -> int:
        from . import isa

        region = isa.region_of(addr)
        if region is None:
            raise ValueError(f"address 0x{addr:x} outside memory")
        base = {"stack": isa.STACK_LIMIT, "heap": isa.HEAP_BASE, "data": isa.DATA_BASE}[region]
        raw = self.memory[region][addr - base: addr - base + width]
        return int.from_bytes(raw, "little")


class MachineError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
