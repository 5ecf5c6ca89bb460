"""Instrumented multiply-accumulate counting.

Call sites that perform matrix products register the exact MAC cost of the
operation they just executed (derived from the operand shapes at the call
site, not from any closed-form model formula).  The closed-form per-step
counts elsewhere in the package are verified against these counters.
Counting is off unless a :func:`count_macs` block is active, so the hot
path pays one attribute lookup.
"""

import threading
from contextlib import contextmanager

_state = threading.local()


def add_macs(n):
    if getattr(_state, "active", False):
        _state.total += int(n)


def macs_enabled():
    return getattr(_state, "active", False)


@contextmanager
def count_macs():
    """Collect MACs executed inside the block; yields a one-slot box."""
    box = {"macs": 0}
    previous = (getattr(_state, "active", False), getattr(_state, "total", 0))
    _state.active = True
    _state.total = 0
    try:
        yield box
    finally:
        box["macs"] = _state.total
        _state.active, _state.total = previous
