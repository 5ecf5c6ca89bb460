"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; the numpy
fallback is always available.  The choice can be forced through the
``RNNPACK_BACKEND`` environment variable (``compiled`` / ``python``) or at
runtime with :func:`set_backend`, which tests use to exercise both paths.
"""

import os
from contextlib import contextmanager

from . import _pykernels
from .errors import ParameterError

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"python": _pykernels}
if _core is not None:
    _BACKENDS["compiled"] = _core


def _initial():
    forced = os.environ.get("RNNPACK_BACKEND", "auto")
    if forced == "auto":
        return "compiled" if _core is not None else "python"
    if forced not in _BACKENDS:
        raise ParameterError(
            f"RNNPACK_BACKEND={forced!r} not available; "
            f"choices: {sorted(_BACKENDS)} or 'auto'"
        )
    return forced


_active = _initial()


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active


def kernels():
    """The active kernel module (see _pykernels for the contract)."""
    return _BACKENDS[_active]


def set_backend(name):
    global _active
    if name == "auto":
        name = "compiled" if _core is not None else "python"
    if name not in _BACKENDS:
        raise ParameterError(
            f"backend {name!r} not available; choices: {sorted(_BACKENDS)}"
        )
    _active = name
    return _active


@contextmanager
def use_backend(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
