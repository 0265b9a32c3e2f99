"""Kernel backend selection.

The compiled extension is used when it imports; ``SDEERR_BACKEND=python``
forces the numpy fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from types import ModuleType

from . import _pykernels


@dataclass(frozen=True)
class Backend:
    name: str
    module: ModuleType

    @property
    def compiled(self) -> bool:
        return self.name == "compiled"

    def normals_block(self, stream_key, path_start, step_start, out):
        self.module.normals_block(stream_key, path_start, step_start, out)

    def terminal_values(self, *args, **kwargs):
        self.module.terminal_values(*args, **kwargs)


def _load_compiled() -> Backend | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return Backend("compiled", _ckernels)


PYTHON = Backend("python", _pykernels)
COMPILED = _load_compiled()


def get_backend(name: str | None = None) -> Backend:
    """Return the named backend, or the default one when ``name`` is None."""
    if name is None:
        name = os.environ.get("SDEERR_BACKEND", "auto")
    if name == "python":
        return PYTHON
    if name == "compiled":
        if COMPILED is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return COMPILED
    if name == "auto":
        return COMPILED if COMPILED is not None else PYTHON
    raise ValueError(f"unknown backend {name!r}")
