"""Hot-loop kernels. The compiled extension is used when it imports;
otherwise the numpy fallback is selected. Set ``MMVSDE_BACKEND=python`` to
force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("MMVSDE_BACKEND", "").lower() != "python":
    try:
        from . import _core as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None for default)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        from . import _core  # noqa: F401
        out.insert(0, "cython")
    except ImportError:
        pass
    return out


philox_raw = _impl.philox_raw
philox_uniforms = _impl.philox_uniforms
dykstra_project = _impl.dykstra_project
