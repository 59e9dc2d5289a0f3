"""Centred 2D FFT helpers with an instrumented per-channel counter.

Arrays are centred: index G//2 along each axis holds the DC / zero offset.
Every call counts one 2D transform per channel (leading axes are channels)
under a tag, so the operator structure of the solver can be audited.
"""

import threading
from collections import Counter
from typing import Dict

import numpy as np
import scipy.fft


class FftCounter:
    """Thread-safe tally of 2D FFT applications by tag."""

    def __init__(self) -> None:
        self._counts: Counter = Counter()
        self._lock = threading.Lock()

    def add(self, tag: str, count: int = 1) -> None:
        with self._lock:
            self._counts[tag] += count

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def __getitem__(self, tag: str) -> int:
        with self._lock:
            return self._counts[tag]

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())


FFT_COUNTER = FftCounter()


def _channels(x: np.ndarray) -> int:
    return int(np.prod(x.shape[:-2], dtype=np.int64)) if x.ndim > 2 else 1


def cfft2(x: np.ndarray, tag: str = "misc", norm: str = "backward") -> np.ndarray:
    """Centred forward 2D FFT over the last two axes."""
    FFT_COUNTER.add(tag, _channels(x))
    axes = (-2, -1)
    return scipy.fft.fftshift(
        scipy.fft.fft2(scipy.fft.ifftshift(x, axes=axes), axes=axes, norm=norm), axes=axes
    )


def cifft2(x: np.ndarray, tag: str = "misc", norm: str = "backward") -> np.ndarray:
    """Centred inverse 2D FFT over the last two axes."""
    FFT_COUNTER.add(tag, _channels(x))
    axes = (-2, -1)
    return scipy.fft.fftshift(
        scipy.fft.ifft2(scipy.fft.ifftshift(x, axes=axes), axes=axes, norm=norm), axes=axes
    )


def center_slice(size: int, block: int) -> slice:
    """Slice selecting a ``block``-wide window that keeps index size//2 at block//2."""
    start = size // 2 - block // 2
    return slice(start, start + block)


def crop_center(x: np.ndarray, block: int) -> np.ndarray:
    """Crop the last two axes to a centred ``block`` x ``block`` window."""
    sl = center_slice(x.shape[-1], block)
    return x[..., sl, sl]
