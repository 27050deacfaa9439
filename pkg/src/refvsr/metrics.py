"""PSNR / SSIM and the FoV-banded evaluation protocol.

Bands are concentric rectangles sharing the frame's aspect ratio; band
``(inner, outer)`` keeps the pixels inside the ``outer``-scaled rectangle
and outside the ``inner``-scaled one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over all channels, capped at 100 dB.

    ``mask`` (H, W) restricts the mean to the selected pixels.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[-2:]:
            raise ValueError(f"mask {mask.shape} does not match image {a.shape}")
        if not mask.any():
            raise ValueError("empty mask")
        sq = sq[..., mask]
    mse = float(sq.mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    win.setflags(write=False)
    return win


def to_gray(x) -> np.ndarray:
    """Channel mean of (3, H, W) or (1, 3, H, W); (H, W) passes through."""
    x = _arr(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim == 2:
        return x
    raise ValueError(f"cannot interpret shape {x.shape} as an image")


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM of the grayscale images on the 'valid' grid.

    Entry ``(i, j)`` belongs to the window centred on pixel
    ``(i + 5, j + 5)``.
    """
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    win = gaussian_window()
    f = lambda x: signal.correlate(x, win, mode="valid")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a ** 2
    sbb = f(b * b) - mu_b ** 2
    sab = f(a * b) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    out = num / den
    if np.array_equal(a, b):
        out[:] = 1.0  # exact self-similarity despite rounding in the filtered moments
    return out


def ssim(a, b, mask=None) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1).

    With ``mask`` (H, W) only windows centred on selected pixels count.
    """
    m = ssim_map(a, b)
    if mask is None:
        return float(m.mean())
    mask = np.asarray(mask, dtype=bool)
    r = SSIM_WIN // 2
    inner = mask[r:mask.shape[0] - r, r:mask.shape[1] - r]
    if inner.shape != m.shape:
        raise ValueError(f"mask {mask.shape} does not match image")
    if not inner.any():
        raise ValueError("mask selects no SSIM window centre")
    return float(m[inner].mean())


@dataclass(frozen=True)
class FovBandSpec:
    inner: float
    outer: float

    def __post_init__(self):
        if not (0 <= self.inner < self.outer <= 1):
            raise ValueError(f"band requires 0 <= inner < outer <= 1, got ({self.inner}, {self.outer})")

    @property
    def label(self) -> str:
        return f"{round(self.inner * 100)}%-{round(self.outer * 100)}%"


DEFAULT_BANDS = tuple(FovBandSpec(i, o) for i, o in
                      ((0, .5), (.5, .6), (.5, .7), (.5, .8), (.5, .9), (.5, 1)))


def parse_bands(text: str) -> list:
    """``"0:0.5,0.5:1"`` -> band specs."""
    bands = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"band {part!r} must look like inner:outer")
        bands.append(FovBandSpec(float(lo), float(hi)))
    if not bands:
        raise ValueError("no bands given")
    return bands


def _rect(n: int, frac: float):
    if frac <= 0:
        return 0, 0
    lo = int(round(n * (1 - frac) / 2))
    return lo, n - lo


def band_mask(frame_size, band: FovBandSpec) -> np.ndarray:
    h, w = frame_size
    mask = np.zeros((h, w), dtype=bool)
    y0, y1 = _rect(h, band.outer)
    x0, x1 = _rect(w, band.outer)
    mask[y0:y1, x0:x1] = True
    y0, y1 = _rect(h, band.inner)
    x0, x1 = _rect(w, band.inner)
    mask[y0:y1, x0:x1] = False
    return mask


@dataclass
class BandRow:
    band: FovBandSpec
    psnr: float
    ssim: float
    pixel_count: int


@dataclass
class BandReport:
    rows: list = field(default_factory=list)
    frames: int = 0

    def to_text(self) -> str:
        head = f"{'band':>10}  {'PSNR (dB)':>10}  {'SSIM':>7}  {'pixels':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.band.label:>10}  {r.psnr:>10.3f}  {r.ssim:>7.4f}  {r.pixel_count:>9d}")
        lines.append(f"frames: {self.frames}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"frames={self.frames}"]
        for r in self.rows:
            key = f"band_{r.band.inner:g}_{r.band.outer:g}"
            lines += [f"{key}.psnr={r.psnr:.6f}", f"{key}.ssim={r.ssim:.6f}",
                      f"{key}.pixel_count={r.pixel_count}"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report", figure: bool = True) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"text": out_dir / f"{stem}.txt", "kv": out_dir / f"{stem}.kv"}
        paths["text"].write_text(self.to_text())
        paths["kv"].write_text(self.to_kv())
        if figure:
            from .plotting import plot_band_report
            paths["figure"] = plot_band_report(self, out_dir / f"{stem}.png")
        return paths


def banded_report(sr_seq, gt_seq, bands=DEFAULT_BANDS) -> BandReport:
    """Per-band masked PSNR / SSIM averaged over frames."""
    sr_seq, gt_seq = list(sr_seq), list(gt_seq)
    if len(sr_seq) != len(gt_seq):
        raise ValueError(f"sequence lengths differ: {len(sr_seq)} vs {len(gt_seq)}")
    if not sr_seq:
        raise ValueError("empty sequences")
    report = BandReport(frames=len(sr_seq))
    size = to_gray(gt_seq[0]).shape
    for band in bands:
        mask = band_mask(size, band)
        ps, ss = [], []
        for sr, gt in zip(sr_seq, gt_seq):
            sr, gt = _arr(sr), _arr(gt)
            if sr.ndim == 4:
                sr, gt = sr[0], gt[0]
            ps.append(psnr(sr, gt, mask))
            ss.append(ssim(sr, gt, mask))
        report.rows.append(BandRow(band, float(np.mean(ps)), float(np.mean(ss)), int(mask.sum())))
    return report
