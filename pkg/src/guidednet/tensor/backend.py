"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded.  Set ``GUIDEDNET_BACKEND=python`` to force the fallback.
"""
import importlib
import os

from . import _pykernels

python_kernels = _pykernels


def _load():
    if os.environ.get("GUIDEDNET_BACKEND", "").lower() == "python":
        return _pykernels
    try:
        return importlib.import_module("guidednet.tensor._ckernels")
    except ImportError:
        return _pykernels


kernels = _load()


def compiled_kernels():
    """Return the compiled module, or ``None`` if it is not built."""
    try:
        return importlib.import_module("guidednet.tensor._ckernels")
    except ImportError:
        return None


def use(name):
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global kernels
    if name == "python":
        kernels = _pykernels
    elif name == "cython":
        mod = compiled_kernels()
        if mod is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        kernels = mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return kernels


def name():
    return kernels.NAME
