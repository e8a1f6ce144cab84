"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
``REPSPARK_BACKEND=python`` forces the fallback.
"""

import os

from . import _pykernels

python_kernels = _pykernels

try:
    from . import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("REPSPARK_BACKEND", "").lower() != "python":
    kernels = compiled_kernels
    BACKEND = "cython"
else:
    kernels = _pykernels
    BACKEND = "python"


def get_kernels(name=None):
    """Return the kernel module for ``name`` ("cython" / "python"), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled_kernels is None:
            raise RuntimeError("compiled kernels are not built; run `python setup.py build_ext --inplace`")
        return compiled_kernels
    raise ValueError(f"unknown backend {name!r}; expected 'cython' or 'python'")
