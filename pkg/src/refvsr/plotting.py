"""Figures written next to the text reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_band_report(report, path) -> Path:
    """PSNR (bars) and SSIM (line, right axis) per FoV band."""
    path = Path(path)
    labels = [r.band.label for r in report.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(labels))
        ax.bar(xs, [r.psnr for r in report.rows], color="#4c72b0", width=0.6)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels)
        ax.set_xlabel("FoV band")
        ax.set_ylabel("PSNR (dB)")
        lo = min(r.psnr for r in report.rows)
        hi = max(r.psnr for r in report.rows)
        ax.set_ylim(max(0.0, lo - 2.0), hi + 1.0)
        ax2 = ax.twinx()
        ax2.plot(list(xs), [r.ssim for r in report.rows], "o-", color="#dd8452")
        ax2.set_ylabel("SSIM")
        ax2.grid(False)
        ax.set_title(f"Banded quality over {report.frames} frames")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_curve(steps, losses, path, title: str = "training loss") -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=1.0, color="#4c72b0")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if len(losses) and min(losses) > 0:
            ax.set_yscale("log")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
