"""PSNR, SSIM and NMSE, plus dataset-level evaluation reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError
from .formats import DatasetManifest, atomic_write_text, read_pair, read_slice

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref) -> float:
    """``10 log10(max(ref)^2 / MSE)``; ``inf`` when the images are identical."""
    x, ref = _pair(x, ref)
    if not np.any(ref):
        raise InvalidInputError("reference image is identically zero")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(ref.max() ** 2 / mse))


def nmse(x, ref) -> float:
    """``||x - ref||^2 / ||ref||^2``."""
    x, ref = _pair(x, ref)
    denom = np.sum(ref**2)
    if denom == 0:
        raise InvalidInputError("reference image is identically zero")
    return float(np.sum((x - ref) ** 2) / denom)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, win):
    k = win.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", patches, win)


def ssim(x, ref) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows.

    Dynamic range is ``max(ref) - min(ref)``, falling back to 1 for a constant
    reference.
    """
    x, ref = _pair(x, ref)
    if min(x.shape) < SSIM_WIN:
        raise InvalidInputError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    L = float(ref.max() - ref.min()) or 1.0
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    win = gaussian_window()
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(ref, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(ref * ref, win) - mu_y * mu_y
    sxy = _filter_valid(x * ref, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class PairMetrics:
    id: str
    psnr: float
    ssim: float
    nmse: float


def _agg(values):
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return float(arr.mean()), float(arr.std())


@dataclass
class MetricReport:
    records: list[PairMetrics] = field(default_factory=list)
    raw: list[PairMetrics] = field(default_factory=list)

    def summary(self, which: str = "recon") -> dict[str, tuple[float, float]]:
        recs = self.records if which == "recon" else self.raw
        return {m: _agg([getattr(r, m) for r in recs]) for m in ("psnr", "ssim", "nmse")}

    def mean(self, metric: str, which: str = "recon") -> float:
        return self.summary(which)[metric][0]

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim,nmse\n"]
        lines += [f"{r.id},{r.psnr!r},{r.ssim!r},{r.nmse!r}\n" for r in self.records]
        return "".join(lines)

    def to_text(self, label: str = "Recon") -> str:
        rows = [("Raw", self.summary("raw"))] if self.raw else []
        rows.append((label, self.summary("recon")))
        return format_table("", rows)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "metrics.csv", self.to_csv())
        if self.raw:
            raw_csv = MetricReport(self.raw).to_csv()
            atomic_write_text(out_dir / "metrics_raw.csv", raw_csv)
        atomic_write_text(out_dir / "summary.txt", self.to_text())


def format_table(key_label: str, rows) -> str:
    """Aligned text table of ``(key, summary)`` rows: mean ± std per metric."""
    head = f"{key_label:>10} | {'PSNR':>16} | {'SSIM':>16} | {'NMSE':>16}"
    out = [head, "-" * len(head)]
    for key, s in rows:
        out.append(
            f"{key!s:>10} | {s['psnr'][0]:7.2f} ± {s['psnr'][1]:6.2f} | "
            f"{s['ssim'][0]:7.4f} ± {s['ssim'][1]:.4f} | {s['nmse'][0]:7.4f} ± {s['nmse'][1]:.4f}"
        )
    return "\n".join(out) + "\n"


def score(pid: str, x, ref) -> PairMetrics:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    ref = np.clip(np.asarray(ref, dtype=np.float64), 0.0, 1.0)
    return PairMetrics(pid, psnr(x, ref), ssim(x, ref), nmse(x, ref))


def evaluate(manifest: DatasetManifest, recon_dir, out_dir=None) -> MetricReport:
    """Score ``<recon_dir>/<id>.cmrs`` against every manifest pair, plus the raw input row."""
    recon_dir = Path(recon_dir)
    missing = [e.id for e in manifest if not (recon_dir / f"{e.id}.cmrs").is_file()]
    if missing:
        raise DataError(f"missing reconstructions in {recon_dir} for ids: {', '.join(missing)}")
    report = MetricReport()
    for entry in manifest:
        under, full = read_pair(manifest, entry)
        recon = read_slice(recon_dir / f"{entry.id}.cmrs")
        report.records.append(score(entry.id, recon, full))
        report.raw.append(score(entry.id, under, full))
    if out_dir is not None:
        report.write(out_dir)
    return report
