"""Iterative radix-2 FFT over the last axis."""
from __future__ import annotations

import numpy as np

_BITREV: dict[int, np.ndarray] = {}


def _bit_reverse(n: int) -> np.ndarray:
    perm = _BITREV.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _BITREV[n] = perm
    return perm


def fft(x, inverse: bool = False) -> np.ndarray:
    """Unscaled forward DFT, or inverse DFT scaled by 1/n.

    Leading axes are treated as a batch. Only power-of-two lengths are
    supported.
    """
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1] if a.ndim else 0
    if n < 1 or n & (n - 1):
        raise ValueError(f"fft: length must be a power of two, got {n}")
    lead = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate((even + odd, even - odd), axis=-1).reshape(*lead, n)
        size *= 2
    if inverse:
        a = a / n
    return a


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def dft_naive(x, inverse: bool = False) -> np.ndarray:
    """O(n²) direct DFT, any length. Reference for tests."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    sign = 1.0 if inverse else -1.0
    k = np.arange(n)
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    out = a @ mat.T
    return out / n if inverse else out
