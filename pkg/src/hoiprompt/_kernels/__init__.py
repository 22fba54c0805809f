"""Hot loops for assignment and evaluation matching.

The compiled extension is preferred; the pure-Python module is the fallback
and the reference.  Set ``HOIPROMPT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

MODE_DEFAULT = _pykernels.MODE_DEFAULT
MODE_SCENARIO_1 = _pykernels.MODE_SCENARIO_1
MODE_SCENARIO_2 = _pykernels.MODE_SCENARIO_2

_compiled = None
if os.environ.get("HOIPROMPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _pykernels
BACKEND = "compiled" if _compiled is not None else "python"

solve_assignment = _active.solve_assignment
greedy_match = _active.greedy_match

__all__ = [
    "BACKEND",
    "BACKENDS",
    "MODE_DEFAULT",
    "MODE_SCENARIO_1",
    "MODE_SCENARIO_2",
    "greedy_match",
    "solve_assignment",
]
