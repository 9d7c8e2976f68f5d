"""Synthetic phantoms and (under-sampled, fully-sampled) slice-pair datasets."""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kspace
from .errors import DataError, InvalidInputError
from .formats import DatasetManifest, ManifestEntry, pair_files, write_slice


@dataclass(frozen=True)
class PhantomParams:
    n_ellipses: int = 6
    intensity_range: tuple[float, float] = (0.1, 1.0)
    # semi-axis lengths as fractions of the grid extent
    size_range: tuple[float, float] = (0.08, 0.35)
    edge_width: float = 1.0  # pixels
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.intensity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidInputError(f"bad intensity range {self.intensity_range}")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi:
            raise InvalidInputError(f"bad size range {self.size_range}")
        if self.n_ellipses < 0:
            raise InvalidInputError("n_ellipses must be >= 0")


@dataclass(frozen=True)
class CoilMode:
    """``single`` or ``multi<N>`` (e.g. ``multi8``)."""

    n_coils: int = 1
    multi: bool = False

    @classmethod
    def parse(cls, text: str) -> "CoilMode":
        if isinstance(text, CoilMode):
            return text
        text = str(text).strip()
        if text == "single":
            return cls()
        if text.startswith("multi"):
            try:
                n = int(text[5:])
            except ValueError:
                raise InvalidInputError(f"bad coil mode {text!r}") from None
            if n < 1:
                raise InvalidInputError(f"bad coil mode {text!r}")
            return cls(n, True)
        raise InvalidInputError(f"bad coil mode {text!r}")

    def __str__(self):
        return f"multi{self.n_coils}" if self.multi else "single"


@dataclass
class SlicePair:
    under: np.ndarray
    full: np.ndarray
    accel: int
    coil_mode: CoilMode
    seed: int


def generate_phantom(params: PhantomParams, h: int, w: int) -> np.ndarray:
    """Sum of random filled ellipses with a linear anti-aliased rim, clipped to [0, 1]."""
    if h < 8 or w < 8:
        raise InvalidInputError(f"phantom must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng(params.seed)
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    img = np.zeros((h, w), dtype=np.float64)
    extent = min(h, w)
    for _ in range(params.n_ellipses):
        intensity = rng.uniform(*params.intensity_range)
        a, b = rng.uniform(*params.size_range, size=2) * extent
        cy = rng.uniform(0.3, 0.7) * h
        cx = rng.uniform(0.3, 0.7) * w
        theta = rng.uniform(0.0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        # signed distance to the boundary, approximately in pixels
        dist = (1.0 - r) * min(a, b)
        img += intensity * np.clip(0.5 + dist / params.edge_width, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def smooth_phase(h: int, w: int, seed: int, max_rad: float = math.pi / 2) -> np.ndarray:
    """Low-order polynomial phase map in radians."""
    rng = np.random.default_rng([seed, 0x9A5E])
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    coef = rng.uniform(-1, 1, size=5)
    phase = coef[0] * xx + coef[1] * yy + coef[2] * xx * yy + coef[3] * xx**2 + coef[4] * yy**2
    return max_rad * phase / max(np.abs(phase).max(), 1e-12)


def coil_sensitivities(h: int, w: int, n_coils: int, seed: int) -> np.ndarray:
    """Gaussian profiles centred on the image border at angles ``2*pi*c/n``.

    A seed-dependent rotation is applied to the whole coil array. Width is half
    the image extent.
    """
    if n_coils < 1:
        raise InvalidInputError(f"n_coils must be >= 1, got {n_coils}")
    rng = np.random.default_rng([seed, 0xC011])
    offset = rng.uniform(0.0, 2 * math.pi)
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    sigma = max(h, w) / 2
    sens = np.empty((n_coils, h, w))
    for c in range(n_coils):
        ang = offset + 2 * math.pi * c / n_coils
        py, px = (h / 2) * math.sin(ang), (w / 2) * math.cos(ang)
        sens[c] = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * sigma**2))
    return sens


def simulate_coils(img: np.ndarray, n_coils: int, seed: int, sensitivities=None) -> np.ndarray:
    """Return an (n_coils, h, w) stack of coil images ``img * s_c``."""
    img = np.asarray(img)
    if n_coils < 1:
        raise InvalidInputError(f"n_coils must be >= 1, got {n_coils}")
    if sensitivities is None:
        sensitivities = coil_sensitivities(*img.shape, n_coils, seed)
    sensitivities = np.broadcast_to(sensitivities, (n_coils, *img.shape))
    return img[None] * sensitivities


def degrade(full: np.ndarray, mask: kspace.SamplingMask, coil_mode="single", seed: int = 0) -> np.ndarray:
    """Zero-filled reconstruction of ``full`` after masking its k-space.

    Single-coil: ``|idft2(mask * dft2(full))|``. Multi-coil: the same per coil
    on simulated coil images, combined with RSS. No intensity normalisation is
    applied here; see :func:`make_pair`.
    """
    mode = CoilMode.parse(coil_mode)
    full = np.asarray(full)
    if mask.height != full.shape[0]:
        raise InvalidInputError(
            f"mask height {mask.height} does not match image height {full.shape[0]}"
        )
    if not mode.multi:
        return np.abs(kspace.idft2(kspace.apply_mask(kspace.dft2(full), mask)))
    coils = simulate_coils(full, mode.n_coils, seed)
    under = [kspace.idft2(kspace.apply_mask(kspace.dft2(c), mask)) for c in coils]
    return kspace.rss(under)


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling (first/last pixels map exactly)."""
    if h < 1 or w < 1:
        raise InvalidInputError(f"target size must be >= 1, got {h}x{w}")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if (H, W) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h, H)
    c0, c1, fc = coords(w, W)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, img.min(), img.max())


def _to_image(k: np.ndarray, pad_to) -> np.ndarray:
    if pad_to is not None:
        k = kspace.zero_pad_center(k, *pad_to)
    return kspace.idft2(k)


def make_pair(
    phantom: np.ndarray,
    accel: int,
    coil_mode="single",
    seed: int = 0,
    acs_lines: int | None = None,
    pad_to: tuple[int, int] | None = None,
    resize_to: tuple[int, int] | None = None,
    with_phase: bool = False,
) -> SlicePair:
    """Run the preprocessing chain on one phantom and return a normalised pair.

    Chain: (optional smooth phase) -> per-coil k-space -> striped mask ->
    optional k-space zero padding -> iDFT -> magnitude/RSS -> optional resize.
    Both images are divided by the max of the fully-sampled one.
    """
    mode = CoilMode.parse(coil_mode)
    h, w = phantom.shape
    obj = phantom.astype(np.complex128)
    if with_phase:
        obj = obj * np.exp(1j * smooth_phase(h, w, seed))
    mask = kspace.make_striped_mask(h, accel, acs_lines)
    coils = simulate_coils(obj, mode.n_coils, seed) if mode.multi else obj[None]
    full_imgs, under_imgs = [], []
    for coil in coils:
        k = kspace.dft2(coil)
        full_imgs.append(_to_image(k, pad_to))
        under_imgs.append(_to_image(kspace.apply_mask(k, mask), pad_to))
    full = kspace.rss(full_imgs)
    under = kspace.rss(under_imgs)
    if resize_to is not None:
        full = resize_bilinear(full, *resize_to)
        under = resize_bilinear(under, *resize_to)
    peak = full.max()
    scale = 1.0 / peak if peak > 0 else 1.0
    return SlicePair(
        (under * scale).astype(np.float32),
        (full * scale).astype(np.float32),
        accel,
        mode,
        seed,
    )


def build_dataset(
    n_pairs: int,
    accel: int,
    coil_mode,
    h: int,
    w: int,
    seed: int,
    out_dir,
    split: str = "train",
    phantom: PhantomParams | None = None,
    **pair_kwargs,
) -> DatasetManifest:
    """Write ``n_pairs`` pairs under ``out_dir`` and return the manifest.

    Pair ``i`` is generated from seed ``seed + i``. Each pair lives in its own
    directory holding ``under.cmrs`` and ``full.cmrs``.
    """
    if n_pairs < 0:
        raise InvalidInputError("n_pairs must be >= 0")
    mode = CoilMode.parse(coil_mode)
    base = phantom or PhantomParams()
    out_dir = Path(out_dir)
    manifest = DatasetManifest(out_dir, [], split)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_pairs):
            pair_seed = seed + i
            params = PhantomParams(
                base.n_ellipses, base.intensity_range, base.size_range, base.edge_width, pair_seed
            )
            pair = make_pair(generate_phantom(params, h, w), accel, mode, pair_seed, **pair_kwargs)
            pid = f"{split}_{i:06d}"
            rel = f"pairs/{pid}"
            under_path, full_path = pair_files(out_dir / rel)
            write_slice(under_path, pair.under)
            write_slice(full_path, pair.full)
            manifest.entries.append(ManifestEntry(pid, rel, accel, str(mode), pair_seed))
        manifest.save()
    except OSError as exc:
        raise DataError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return manifest


def clear_dir(path) -> None:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
