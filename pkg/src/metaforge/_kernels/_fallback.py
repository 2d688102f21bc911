"""Pure-numpy implementations of the hot elementwise kernels.

Mirrors the signatures of the compiled extension so the two are
interchangeable. Each function writes into a preallocated ``out`` array.
"""

import numpy as np


def modulate(phase, transmittance, chirp, out):
    """out = T * exp(j*(phase + chirp)), elementwise."""
    np.exp(1j * (phase + chirp), out=out)
    out *= transmittance
    return out


def intensity(field, out):
    """out = |field|^2, elementwise."""
    np.multiply(field.real, field.real, out=out)
    out += field.imag * field.imag
    return out


def phase_gradient(field, backprop, scale, out):
    """out = scale * Im(conj(field) * backprop), elementwise."""
    # Im(conj(a)*b) = a.re*b.im - a.im*b.re
    np.multiply(field.real, backprop.imag, out=out)
    out -= field.imag * backprop.real
    out *= scale
    return out
