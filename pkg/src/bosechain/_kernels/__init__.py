"""Kernel backend selection.

The compiled extension is preferred when it imports; the pure-NumPy module
is the fallback.  BOSECHAIN_BACKEND=python|compiled forces the choice
(requesting the compiled backend when it is not built is an error, never a
silent downgrade).  Both backends step trajectories with identical
floating-point operation order, so results are bit-compatible.

mcwf_csr (sparse-operator quantum jumps for single-mode models) only exists
in the pure backend; it is re-exported here unconditionally.
"""

from __future__ import annotations

import os

from . import pure as _pure
from .pure import mcwf_csr

try:
    from . import _core as _compiled
except ImportError:
    _compiled = None

HAVE_COMPILED = _compiled is not None

_requested = os.environ.get("BOSECHAIN_BACKEND", "").strip().lower()
if _requested == "python":
    _active = _pure
elif _requested == "compiled":
    if _compiled is None:
        raise ImportError(
            "BOSECHAIN_BACKEND=compiled but the extension module is not "
            "built; install with the C toolchain available or unset the "
            "variable")
    _active = _compiled
elif _requested == "":
    _active = _compiled if _compiled is not None else _pure
else:
    raise ImportError(
        f"BOSECHAIN_BACKEND={_requested!r} not recognized "
        "(use 'python' or 'compiled')")

BACKEND = _active.BACKEND
heun_steps = _active.heun_steps
mcwf_chain = _active.mcwf_chain

__all__ = ["BACKEND", "HAVE_COMPILED", "heun_steps", "mcwf_chain", "mcwf_csr"]
