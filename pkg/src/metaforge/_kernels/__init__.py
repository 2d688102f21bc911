"""Backend selection for the hot elementwise kernels.

The compiled Cython extension is preferred when present; otherwise (or when
``METAFORGE_PURE_PYTHON=1`` is set) the numpy fallback is used. Both expose
identical signatures and agree numerically to a few ulp, so everything above
this layer is backend-agnostic.
"""

import os

import numpy as np

from . import _fallback

_COMPILED = None
if os.environ.get("METAFORGE_PURE_PYTHON", "") != "1":
    try:
        from . import _core as _COMPILED
    except ImportError:
        _COMPILED = None

_impl = _COMPILED if _COMPILED is not None else _fallback

BACKEND = "compiled" if _impl is _COMPILED and _COMPILED is not None else "python"


def available_backends() -> tuple[str, ...]:
    return ("compiled", "python") if _COMPILED is not None else ("python",)


def use_backend(name: str) -> None:
    """Switch backends at runtime (used by the backend benchmark and tests)."""
    global _impl, BACKEND
    if name == "compiled":
        if _COMPILED is None:
            raise RuntimeError("compiled kernel extension is not available")
        _impl = _COMPILED
    elif name == "python":
        _impl = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def modulated_field(phase: np.ndarray, transmittance: np.ndarray,
                    chirp: np.ndarray) -> np.ndarray:
    """T * exp(j*(phase + chirp)) as a fresh complex128 array."""
    out = np.empty(phase.shape, dtype=np.complex128)
    _impl.modulate(
        np.ascontiguousarray(phase, dtype=np.float64),
        np.ascontiguousarray(transmittance, dtype=np.float64),
        np.ascontiguousarray(chirp, dtype=np.float64),
        out,
    )
    return out


def field_intensity(field: np.ndarray) -> np.ndarray:
    """|field|^2 as a fresh float64 array."""
    out = np.empty(field.shape, dtype=np.float64)
    _impl.intensity(np.ascontiguousarray(field, dtype=np.complex128), out)
    return out


def phase_grad(field: np.ndarray, backprop: np.ndarray, scale: float) -> np.ndarray:
    """scale * Im(conj(field) * backprop) as a fresh float64 array."""
    out = np.empty(field.shape, dtype=np.float64)
    _impl.phase_gradient(
        np.ascontiguousarray(field, dtype=np.complex128),
        np.ascontiguousarray(backprop, dtype=np.complex128),
        float(scale),
        out,
    )
    return out
