"""Centered, orthonormal 2D Fourier transforms and k-space utilities.

Conventions used throughout the package:

* DC sits at index ``n // 2`` along each axis.
* Transforms are unitary (``norm="ortho"``), so Parseval holds with no
  extra constants.
* Phase-encode lines are rows; masks select rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "SamplingMask",
    "apply_mask",
    "crop_center",
    "default_acs_lines",
    "dft2",
    "idft2",
    "make_striped_mask",
    "rss",
    "zero_pad_center",
]


def _check_grid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise InvalidInputError(f"expected a 2D grid, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInputError(f"grid dimensions must be >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("grid contains non-finite values")
    return x


def dft2(img: np.ndarray) -> np.ndarray:
    """Image -> centered k-space."""
    img = _check_grid(img)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))


def idft2(k: np.ndarray) -> np.ndarray:
    """Centered k-space -> image. Exact inverse of :func:`dft2`."""
    k = _check_grid(k)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k), norm="ortho"))


def _offsets(src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, int]:
    # aligns source DC (n // 2) with target DC
    return dst[0] // 2 - src[0] // 2, dst[1] // 2 - src[1] // 2


def zero_pad_center(k: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Embed ``k`` in a ``target_h x target_w`` grid of zeros.

    The source block starts at ``target // 2 - source // 2`` on each axis, so
    the DC sample stays at ``n // 2`` for every parity combination.
    """
    k = _check_grid(k)
    h, w = k.shape
    if target_h < h or target_w < w:
        raise InvalidInputError(
            f"cannot pad {h}x{w} grid to smaller target {target_h}x{target_w}"
        )
    out = np.zeros((target_h, target_w), dtype=k.dtype)
    r0, c0 = _offsets((h, w), (target_h, target_w))
    out[r0 : r0 + h, c0 : c0 + w] = k
    return out


def crop_center(k: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`zero_pad_center`."""
    k = _check_grid(k)
    H, W = k.shape
    if h > H or w > W or h < 1 or w < 1:
        raise InvalidInputError(f"cannot crop {H}x{W} grid to {h}x{w}")
    r0, c0 = _offsets((h, w), (H, W))
    return k[r0 : r0 + h, c0 : c0 + w].copy()


@dataclass(frozen=True)
class SamplingMask:
    height: int
    kept_rows: frozenset[int]

    def __post_init__(self):
        if not self.kept_rows:
            raise InvalidInputError("mask must keep at least one row")
        if min(self.kept_rows) < 0 or max(self.kept_rows) >= self.height:
            raise InvalidInputError("mask row index out of range")

    @property
    def row_fraction(self) -> float:
        return len(self.kept_rows) / self.height

    def as_array(self) -> np.ndarray:
        """Boolean row selector of length ``height``."""
        sel = np.zeros(self.height, dtype=bool)
        sel[sorted(self.kept_rows)] = True
        return sel


def default_acs_lines(height: int) -> int:
    """24 lines at height 512, scaled proportionally elsewhere."""
    return int(round(height * 24 / 512))


def make_striped_mask(height: int, accel: int, acs_lines: int | None = None) -> SamplingMask:
    """Equispaced rows plus a centered autocalibration band.

    The stripe lattice runs through the DC row ``height // 2`` (so row 0 is
    kept whenever ``height // 2`` is a multiple of ``accel``). The band holds
    ``acs_lines`` consecutive rows starting at ``height // 2 - acs_lines // 2``.
    """
    if acs_lines is None:
        acs_lines = default_acs_lines(height)
    if height < 1:
        raise InvalidInputError(f"height must be >= 1, got {height}")
    if accel < 1 or accel > height:
        raise InvalidInputError(f"accel must be in [1, {height}], got {accel}")
    if acs_lines < 0 or acs_lines > height:
        raise InvalidInputError(f"acs_lines must be in [0, {height}], got {acs_lines}")
    center = height // 2
    rows = set(range(center % accel, height, accel))
    start = center - acs_lines // 2
    rows.update(range(start, start + acs_lines))
    return SamplingMask(height, frozenset(rows))


def apply_mask(k: np.ndarray, mask: SamplingMask) -> np.ndarray:
    k = _check_grid(k)
    if mask.height != k.shape[0]:
        raise InvalidInputError(
            f"mask height {mask.height} does not match grid height {k.shape[0]}"
        )
    out = np.zeros_like(k)
    sel = mask.as_array()
    out[sel] = k[sel]
    return out


def rss(coils) -> np.ndarray:
    """Root-sum-of-squares over a stack of coil images.

    ``coils`` is a sequence (or array with leading coil axis) of same-shape
    complex images.
    """
    if len(coils) == 0:
        raise InvalidInputError("coil stack is empty")
    stack = np.stack([_check_grid(c) for c in coils])
    return np.sqrt(np.sum(np.abs(stack) ** 2, axis=0))
