"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the pure-numpy
fallback is used otherwise. Both expose the same functions with bit-identical
outputs. Set VOXDET_BACKEND=python to force the fallback, or
VOXDET_BACKEND=compiled to fail loudly if the extension is missing.
"""

from __future__ import annotations

import contextlib
import os

from voxdet.backends import pykernels


def _load_compiled():
    from voxdet.backends import _kernels

    return _kernels


def _probe() -> bool:
    try:
        _load_compiled()
        return True
    except ImportError:
        return False


HAVE_COMPILED = _probe()

_forced = os.environ.get("VOXDET_BACKEND", "").strip().lower()
if _forced == "python":
    active = pykernels
elif _forced == "compiled":
    active = _load_compiled()
else:
    active = _load_compiled() if HAVE_COMPILED else pykernels


def active_backend_name() -> str:
    return active.NAME


def get_backend(name: str):
    """Fetch a backend module by name ("python", "compiled", or "active")."""
    if name == "python":
        return pykernels
    if name == "compiled":
        return _load_compiled()
    if name == "active":
        return active
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["python", "compiled"] if HAVE_COMPILED else ["python"]


@contextlib.contextmanager
def override(name: str):
    """Temporarily swap the active backend (benchmarking/testing hook)."""
    global active
    prev = active
    active = get_backend(name)
    try:
        yield active
    finally:
        active = prev
