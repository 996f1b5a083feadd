"""Engine selection: compiled stepper when available, pure Python otherwise.

The compiled extension is optional.  `XEXLAB_ENGINE=py` forces the fallback;
`XEXLAB_ENGINE=c` demands the extension and fails loudly if it is missing.
Runs that need Python callbacks (taint, probes) always take the Python
engine regardless of selection, since the compiled loop cannot call back.
"""

from __future__ import annotations

import os

from ..encode import EncodedProgram
from ..runtime import RunConfig, RunResult
from . import engine_py

_FORCED = os.environ.get("XEXLAB_ENGINE", "").strip().lower()

try:
    from . import _stepper as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None

if _FORCED == "py":
    _compiled = None
elif _FORCED == "c" and _compiled is None:
    raise ImportError("XEXLAB_ENGINE=c but the compiled stepper is not built")


def active_engine() -> str:
    return "compiled" if _compiled is not None else "python"


def run_encoded(enc: EncodedProgram, config: RunConfig, inputs: dict | None = None,
                step_cb=None, store_cb=None) -> RunResult:
    if _compiled is not None and step_cb is None and store_cb is None:
        return _compiled.run_encoded(enc, config, inputs)
    return engine_py.run_encoded(enc, config, inputs, step_cb=step_cb, store_cb=store_cb)
