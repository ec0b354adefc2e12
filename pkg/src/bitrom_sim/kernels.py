"""Hot-kernel backend, chosen once at import.

The compiled extension is preferred. Set ``BITROM_SIM_PURE=1`` to force the
numpy fallback (the benchmark and the backend-equivalence tests load both
explicitly through :func:`load_backend`).
"""
import importlib
import os

_MODULES = {"cython": "bitrom_sim._ckernels", "python": "bitrom_sim._pykernels"}


def load_backend(name):
    return importlib.import_module(_MODULES[name])


def available_backends():
    found = []
    for name in _MODULES:
        try:
            load_backend(name)
        except ImportError:
            continue
        found.append(name)
    return found


if os.environ.get("BITROM_SIM_PURE", "") not in ("", "0"):
    _impl = load_backend("python")
else:
    try:
        _impl = load_backend("cython")
    except ImportError:
        _impl = load_backend("python")

BACKEND = _impl.BACKEND
pack_two_bit = _impl.pack_two_bit
unpack_two_bit = _impl.unpack_two_bit
pack_base243 = _impl.pack_base243
unpack_base243 = _impl.unpack_base243
trimla_matvec = _impl.trimla_matvec
prefix_overflow = _impl.prefix_overflow
