"""Selects between the numba-accelerated kernels and the pure-numpy fallbacks.

The active backend is resolved per call so tests and benchmarks can switch
at runtime. Resolution order: explicit `set_backend()` override, then the
FEATFLOW_BACKEND environment variable ("numba" or "numpy"), then numba if
it imports.
"""

from __future__ import annotations

import os

ENV_VAR = "FEATFLOW_BACKEND"

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

_override: str | None = None


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def set_backend(name: str | None) -> None:
    """Force a backend ("numba" or "numpy"); None restores env/default resolution."""
    global _override
    if name is not None:
        _check_name(name)
    _override = name


def active_backend() -> str:
    if _override is not None:
        return _override
    env = os.environ.get(ENV_VAR)
    if env:
        _check_name(env)
        return env
    return "numba" if _HAVE_NUMBA else "numpy"


def use_numba() -> bool:
    return active_backend() == "numba"


def _check_name(name: str) -> None:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
