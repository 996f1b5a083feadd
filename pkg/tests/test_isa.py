import doctest

import pytest

from xexlab import isa


def test_doctests():
    failures, _ = doctest.testmod(isa)
    assert failures == 0


def test_register_naming_round_trip():
    for rid in range(isa.NUM_REGS):
        assert isa.parse_reg(isa.reg_name(rid)) == rid


def test_register_id_layout():
    assert isa.general(0) == 0
    assert isa.general(15) == isa.FLAGS_HOME == 15
    assert isa.lane(0, 0) == 16
    assert isa.lane(0, 1) == 17
    assert isa.lane(15, 1) == 47
    with pytest.raises(ValueError):
        isa.general(16)
    with pytest.raises(ValueError):
        isa.lane(16, 0)


def test_reserved_lane_pool_is_v8_through_v15():
    assert len(isa.S2_LANE_POOL) == 16
    assert isa.S2_LANE_POOL[0] == isa.lane(8, 0)
    assert isa.S2_LANE_POOL[-1] == isa.lane(15, 1)
    # the pool never touches v0..v7
    assert min(isa.S2_LANE_POOL) == isa.lane(8, 0)


def test_cond_holds_unsigned_family():
    # flags word after cmp 5, 7: borrow set, sign set (5-7 wraps negative)
    f = isa.FLAG_CF | isa.FLAG_SF
    assert isa.cond_holds("ult", f)
    assert isa.cond_holds("ule", f)
    assert not isa.cond_holds("ugt", f)
    assert not isa.cond_holds("uge", f)
    assert isa.cond_holds("ne", f)


def test_cond_holds_signed_family():
    # cmp 0x8000000000000000, 1: SF=0 OF=1 -> slt
    f = isa.FLAG_OF
    assert isa.cond_holds("slt", f)
    assert not isa.cond_holds("sge", f)
    # equal operands: ZF only
    f = isa.FLAG_ZF
    assert isa.cond_holds("eq", f)
    assert isa.cond_holds("sle", f)
    assert isa.cond_holds("uge", f)
    assert not isa.cond_holds("sgt", f)


def test_memory_map_is_disjoint():
    regions = [
        (isa.STACK_LIMIT, isa.STACK_BASE),
        (isa.HEAP_BASE, isa.HEAP_BASE + isa.HEAP_SIZE),
        (isa.DATA_BASE, isa.DATA_BASE + isa.DATA_SIZE),
    ]
    regions.sort()
    for (_, end), (start, _) in zip(regions, regions[1:]):
        assert end <= start


def test_data_region_internal_layout():
    assert isa.RAND_BUF_BASE == isa.DATA_BASE
    assert isa.RAND_BUF_ENTRIES == 1024
    assert isa.NONCE_STORE_BASE >= isa.RAND_BUF_BASE + 8 * isa.RAND_BUF_ENTRIES
    # expanded store is larger than normal, still below the secure buffer
    assert isa.NONCE_STORE_SIZE_NORMAL < isa.NONCE_STORE_SIZE_EXPANDED
    assert isa.NONCE_STORE_BASE + isa.NONCE_STORE_SIZE_EXPANDED <= isa.SECURE_BUF_BASE
    assert isa.SECURE_BUF_BASE + isa.SECURE_BUF_SIZE <= isa.OUT_BASE
    assert isa.OUT_BASE + isa.OUT_SIZE <= isa.DATA_BASE + isa.DATA_SIZE


def test_region_of():
    assert isa.region_of(isa.STACK_BASE - 8) == "stack"
    assert isa.region_of(isa.HEAP_BASE) == "heap"
    assert isa.region_of(isa.OUT_BASE) == "data"
    assert isa.region_of(0x10) is None
    assert isa.region_of(isa.STACK_BASE) == "heap"  # boundary belongs to heap


def test_splitmix_reference_vectors():
    # first outputs for seed 0 from the reference implementation
    g = isa.splitmix_stream(0)
    assert next(g) == 0xE220A8397B1DCDAF
    assert next(g) == 0x6E789E6AA1B965F4
    assert next(g) == 0x06C45D188009454F


def test_mix64_avalanche_is_nontrivial():
    a = isa.mix64(1)
    b = isa.mix64(2)
    assert a != b
    assert bin(a ^ b).count("1") > 16
