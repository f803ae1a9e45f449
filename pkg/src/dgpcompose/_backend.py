"""Selects the compiled evaluation core, falling back to NumPy.

DGP_COMPOSE_BACKEND=auto|cython|python controls selection; "auto" (the
default) prefers the compiled module when it imports cleanly. Only the four
ELBO evaluators are backend-swappable; sampling paths always run the NumPy
implementations.
"""

import os

from . import _core_py

_cy = None
try:
    from . import _core_cy as _cy  # noqa: F401
except ImportError:
    _cy = None

_ELBO_FNS = ("mf_elbo", "jg_elbo_analytic", "jg_elbo_sampled", "chained_elbo")


class _Backend:
    def __init__(self, name, module):
        self.name = name
        for fn in _ELBO_FNS:
            setattr(self, fn, getattr(module, fn))


_active = None


def get_backend():
    global _active
    if _active is not None:
        return _active
    choice = os.environ.get("DGP_COMPOSE_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "cython", "python"):
        raise ValueError(
            f"DGP_COMPOSE_BACKEND must be auto, cython or python, got {choice!r}"
        )
    if choice == "cython" and _cy is None:
        raise ImportError(
            "DGP_COMPOSE_BACKEND=cython but the compiled module is unavailable"
        )
    if choice in ("auto", "cython") and _cy is not None:
        _active = _Backend("cython", _cy)
    else:
        _active = _Backend("python", _core_py)
    return _active


def backend_name():
    return get_backend().name


def available_backends():
    names = ["python"]
    if _cy is not None:
        names.insert(0, "cython")
    return names
