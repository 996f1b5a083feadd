"""Top-level entry point for executing a program.

Glues the parser-level `Program` to the execution engines: encode once,
pick an engine, run.  Everything below this point deals in flat arrays.
"""

from __future__ import annotations

from . import core
from .encode import EncodedProgram, encode_program
from .mir import Program
from .runtime import RunConfig, RunResult


def run(program: Program | EncodedProgram, inputs: dict | None = None,
        config: RunConfig | None = None, step_cb=None, store_cb=None) -> RunResult:
    """Execute `program` from its entry function until ret or halt.

    `inputs` may carry initial register values ({"regs": {name_or_id: u64}})
    and memory images ({"mem": {addr: bytes}}).  Callbacks force the Python
    engine; plain runs use the compiled stepper when it is built.
    """
    if config is None:
        config = RunConfig()
    enc = program if isinstance(program, EncodedProgram) else encode_program(program)
    return core.run_encoded(enc, config, inputs, step_cb=step_cb, store_cb=store_cb)
