"""Mitigation passes and the strategy pipeline that composes them.

Four named strategies cover the lab bench:

  mask       every sensitive access through a masking macro
  regalloc   promote hot sensitive stack slots to vector lanes, mask the rest
  obfuscate  divert sensitive heap traffic through paired decoy cells
  full       promotion first, masking for the stack residue, diversion for heap

Each returns the rewritten program plus a PlanBundle holding the per-pass
plans, which is what audits, verification, and the attack rigs consume.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..mir import Program
from ..taint import SensitiveSites
from .common import MaskError, Rewriter
from .mask import VARIANTS, MaskPlan, mask_rewrite, RESERVED_LANES
from .obfuscate import ObfError, ObfPlan, ROLLER, obfuscate_rewrite
from .regalloc import (RegallocPlan, allocate_rewrite, audit_no_secret_stores,
                       build_stack_usage, select_stack_opt)

STRATEGIES = ("mask", "regalloc", "obfuscate", "full")

__all__ = [
    "STRATEGIES", "VARIANTS", "PlanBundle", "apply_strategy",
    "MaskError", "ObfError", "MaskPlan", "ObfPlan", "RegallocPlan",
    "Rewriter", "mask_rewrite", "obfuscate_rewrite", "allocate_rewrite",
    "audit_no_secret_stores", "build_stack_usage", "select_stack_opt",
]


@dataclass
class PlanBundle:
    """Everything the downstream consumers need to reason about one rewrite."""

    strategy: str
    variant: str | None = None
    expanded: bool = False
    mask: MaskPlan | None = None
    alloc: RegallocPlan | None = None
    obf: ObfPlan | None = None

    @property
    def sanctioned_sites(self) -> frozenset[int]:
        ids: set[int] = set()
        if self.mask is not None:
            ids |= self.mask.sanctioned_sites
        if self.obf is not None:
            ids |= self.obf.sanctioned_sites
        return frozenset(ids)

    def to_dict(self) -> dict:
        return {
            "schema": "xexlab-plan/1",
            "strategy": self.strategy,
            "variant": self.variant,
            "expanded": self.expanded,
            "mask": self.mask.to_dict() if self.mask else None,
            "alloc": self.alloc.to_dict() if self.alloc else None,
            "obf": self.obf.to_dict() if self.obf else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanBundle":
        if d.get("schema") != "xexlab-plan/1":
            raise ValueError(f"unknown plan schema {d.get('schema')!r}")
        return cls(
            strategy=d["strategy"],
            variant=d.get("variant"),
            expanded=d.get("expanded", False),
            mask=MaskPlan.from_dict(d["mask"]) if d.get("mask") else None,
            alloc=RegallocPlan.from_dict(d["alloc"]) if d.get("alloc") else None,
            obf=ObfPlan.from_dict(d["obf"]) if d.get("obf") else None,
        )


def split_sites(p: Program, ids) -> tuple[set[int], set[int]]:
    """Partition site ids by the operand form they sit on: sp-relative
    cells versus everything addressed through the flat memory map."""
    want = set(ids)
    stack: set[int] = set()
    heap: set[int] = set()
    for f in p.functions:
        for b in f.blocks:
            for ins in b.instrs:
                if ins.site not in want or ins.op not in ("load", "store"):
                    continue
                if ins.mem().base is None:
                    stack.add(ins.site)
                else:
                    heap.add(ins.site)
    return stack, heap


def apply_strategy(p: Program, sites: SensitiveSites, strategy: str, *,
                   variant: str = "rdrand",
                   expanded: bool = False) -> tuple[Program, PlanBundle]:
    """Run one named mitigation strategy end to end."""
    if strategy not in STRATEGIES:
        raise MaskError(f"unknown strategy {strategy!r}")
    if variant not in VARIANTS:
        raise MaskError(f"unknown masking variant {variant!r}")
    rw = Rewriter(p)
    bundle = PlanBundle(strategy=strategy, variant=variant, expanded=expanded)

    if strategy == "mask":
        p, bundle.mask = mask_rewrite(p, sites, variant, expanded=expanded, rw=rw)
        return p, bundle

    if strategy == "regalloc":
        p, bundle.alloc = allocate_rewrite(
            p, sites, reserved=RESERVED_LANES[variant], rw=rw)
        p, bundle.mask = mask_rewrite(
            p, sites, variant, expanded=expanded,
            only=bundle.alloc.residual_sites, rw=rw)
        return p, bundle

    if strategy == "obfuscate":
        bundle.variant = None
        p, bundle.obf = obfuscate_rewrite(p, sites, rw=rw)
        return p, bundle

    # full: promote, mask what stayed on the stack, divert the heap
    reserved = tuple(RESERVED_LANES[variant]) + (ROLLER,)
    p, bundle.alloc = allocate_rewrite(p, sites, reserved=reserved, rw=rw)
    stack_ids, heap_ids = split_sites(p, bundle.alloc.residual_sites)
    p, bundle.mask = mask_rewrite(
        p, sites, variant, expanded=expanded, only=stack_ids, rw=rw)
    p, bundle.obf = obfuscate_rewrite(p, sites, only=heap_ids, rw=rw)
    return p, bundle
