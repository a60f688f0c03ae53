"""Kernel backend selection.

Two interchangeable backends implement the hot forward/backward kernels:

* ``_core`` -- Cython-compiled scalar loops (fast);
* ``pure``  -- numpy with pinned reduction orders (always available).

Both follow the same arithmetic contract (see ``pure``'s docstring) and
produce bit-identical results, so which one is active never changes any
number, only the wall time.  Selection happens at import: the compiled
core is used when built, unless ``CROSSAD_KERNELS=pure`` forces the
fallback (``CROSSAD_KERNELS=compiled`` errors if the extension is
missing).
"""

from __future__ import annotations

import os

from . import pure

try:
    from . import _core
except ImportError:
    _core = None

_FORCED = os.environ.get("CROSSAD_KERNELS", "").strip().lower()
if _FORCED in ("pure", "py", "python"):
    _active = pure
elif _FORCED in ("compiled", "c", "core"):
    if _core is None:
        raise ImportError(
            "CROSSAD_KERNELS requested the compiled backend but "
            "crossad.kernels._core is not built; run "
            "'python setup.py build_ext --inplace'")
    _active = _core
else:
    _active = _core if _core is not None else pure


def active():
    """The module implementing the kernel contract for this process."""
    return _active


def backend_name() -> str:
    return _active.name


def has_compiled() -> bool:
    return _core is not None


def get(name: str):
    """Fetch a backend by name ('pure' or 'compiled'), for tests/benchmarks."""
    if name == "pure":
        return pure
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled backend not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def set_active(name: str) -> None:
    """Switch the process-wide backend (used by tests and the benchmark)."""
    global _active
    _active = get(name)
