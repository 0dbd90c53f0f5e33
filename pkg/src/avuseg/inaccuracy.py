"""Split the raw inaccuracy map into small "errors" and large "failures"."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volumes import LabelVolume

DEFAULT_KERNEL = (3, 3, 1)


def _check_kernel(kernel) -> tuple[int, int, int]:
    kernel = tuple(int(k) for k in kernel)
    if len(kernel) != 3 or any(k < 1 for k in kernel):
        raise ValueError(f"kernel must be three positive sizes, got {kernel}")
    if any(k % 2 == 0 for k in kernel):
        raise ValueError(f"kernel sizes must be odd, got {kernel}")
    return kernel


def _filter_axis(mask: np.ndarray, size: int, axis: int, reducer) -> np.ndarray:
    if size == 1:
        return mask
    r = size // 2
    pad = [(0, 0)] * mask.ndim
    pad[axis] = (r, r)
    padded = np.pad(mask, pad, constant_values=False)
    return reducer(sliding_window_view(padded, size, axis=axis), axis=-1)


def binary_erosion(mask: np.ndarray, kernel=DEFAULT_KERNEL) -> np.ndarray:
    """Erode a (Z, Y, X) mask by a full box; outside the volume counts as background."""
    kx, ky, kz = _check_kernel(kernel)
    out = np.asarray(mask, dtype=bool)
    for size, axis in ((kz, 0), (ky, 1), (kx, 2)):
        out = _filter_axis(out, size, axis, np.all)
    return out


def binary_dilation(mask: np.ndarray, kernel=DEFAULT_KERNEL) -> np.ndarray:
    kx, ky, kz = _check_kernel(kernel)
    out = np.asarray(mask, dtype=bool)
    for size, axis in ((kz, 0), (ky, 1), (kx, 2)):
        out = _filter_axis(out, size, axis, np.any)
    return out


def binary_opening(mask: np.ndarray, kernel=DEFAULT_KERNEL) -> np.ndarray:
    """Erosion followed by dilation with the same (kx, ky, kz) box.

    ``mask`` is indexed (Z, Y, X); ``kernel`` is given in (x, y, z) order.
    """
    kx, ky, kz = _check_kernel(kernel)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D (Z, Y, X), got shape {mask.shape}")
    if mask.shape[0] < kz or mask.shape[1] < ky or mask.shape[2] < kx:
        raise ValueError(f"mask dims {mask.shape[::-1]} smaller than kernel {(kx, ky, kz)}")
    return binary_dilation(binary_erosion(mask, kernel), kernel)


@dataclass(frozen=True, eq=False)
class InaccuracyDecomposition:
    raw: np.ndarray
    failures: np.ndarray
    errors: np.ndarray
    kernel: tuple[int, int, int]

    @property
    def accurate(self) -> np.ndarray:
        """Voxels counted as accurate during evaluation (everything but failures)."""
        return ~self.failures


def decompose(pred: LabelVolume, gt: LabelVolume, kernel=DEFAULT_KERNEL) -> InaccuracyDecomposition:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs gt {gt.dims}")
    raw = pred.data != gt.data
    failures = binary_opening(raw, kernel)
    errors = raw & ~failures
    for arr in (raw, failures, errors):
        arr.setflags(write=False)
    return InaccuracyDecomposition(raw, failures, errors, _check_kernel(kernel))
