"""Throughput comparison of the two execution engines.

Runs a store-heavy loop (the shape mitigation passes produce) on the pure
Python interpreter and on the compiled stepper, printing steps/second.

    python benchmarks/bench_engines.py [iterations]
"""

import sys
import time

from xexlab import encode, mir
from xexlab.core import engine_py
from xexlab.runtime import RunConfig

try:
    from xexlab.core import _stepper
except ImportError:
    _stepper = None


def workload(iterations: int) -> str:
    return f""".entry bench
func bench {{
entry:
  mov g1, 0x100000
  mov g2, 0
head:
  mov g3, g2
  mul g3, 0x9E3779B97F4A7C15
  store [g1+0], g3
  xor g3, g2
  store [g1+16], g3
  add g2, 1
  cmp g2, {iterations}
  br_cond ult, head
  mov g0, g2
  ret
}}
"""


def main() -> None:
    iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    enc = encode.encode_program(mir.parse_program(workload(iterations)))
    cfg = RunConfig(step_limit=10 ** 9)

    t0 = time.perf_counter()
    rp = engine_py.run_encoded(enc, cfg)
    t_py = time.perf_counter() - t0
    print(f"python   : {rp.steps:>10} steps in {t_py:7.3f}s "
          f"({rp.steps / t_py / 1e6:6.2f} Msteps/s)")

    if _stepper is None:
        print("compiled : not built")
        return
    t0 = time.perf_counter()
    rc = _stepper.run_encoded(enc, cfg)
    t_c = time.perf_counter() - t0
    print(f"compiled : {rc.steps:>10} steps in {t_c:7.3f}s "
          f"({rc.steps / t_c / 1e6:6.2f} Msteps/s)")
    assert list(rp.obs.records()) == list(rc.obs.records()), "engines disagree"
    print(f"speedup  : {t_py / t_c:.1f}x, traces identical "
          f"({len(list(rp.obs.records()))} records)")


if __name__ == "__main__":
    main()
