"""PSNR, bits-per-pixel, rate-distortion curves and their comparison.

The curve comparison follows the classic procedure: fit a cubic to
log10(rate) as a function of PSNR for both curves, integrate each fit over
the overlapping PSNR interval, and turn the mean log-rate gap into an
average rate difference in percent,

    (10 ** ((I_test - I_anchor) / range) - 1) * 100

Negative values mean the test curve needs fewer bits at equal quality.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codec import CompressedImage, DecodeMode, compress, decompress

MEAN_ROW_ID = "__mean__"


class MetricsError(ValueError):
    pass


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """-10 log10(MSE) over all RGB values, pixels in [0, 1]; inf when equal."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise MetricsError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def bpp(container: CompressedImage | int, width: int, height: int) -> float:
    """8 * file bytes / pixel count; the header is part of the deployed cost."""
    if width <= 0 or height <= 0:
        raise MetricsError("dimensions must be positive")
    nbytes = container.total_bytes if isinstance(container, CompressedImage) else int(container)
    return 8.0 * nbytes / (width * height)


@dataclass(frozen=True)
class RdPoint:
    image_id: str
    lam: float
    bpp: float
    psnr: float


@dataclass(frozen=True)
class RdCurve:
    points: tuple[RdPoint, ...]

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        rates = [p.bpp for p in pts]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise MetricsError("curve bpp values must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def bpps(self) -> np.ndarray:
        return np.asarray([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.asarray([p.psnr for p in self.points])


def bd_rate(anchor: RdCurve, test: RdCurve) -> float:
    """Average rate difference of `test` w.r.t. `anchor`, in percent."""
    a_pts = [p for p in anchor.points if math.isfinite(p.psnr)]
    t_pts = [p for p in test.points if math.isfinite(p.psnr)]
    if len(a_pts) < 4 or len(t_pts) < 4:
        raise MetricsError("need at least 4 finite points per curve for the cubic fit")
    a_p = np.asarray([p.psnr for p in a_pts])
    a_r = np.log10([p.bpp for p in a_pts])
    t_p = np.asarray([p.psnr for p in t_pts])
    t_r = np.log10([p.bpp for p in t_pts])
    lo = max(a_p.min(), t_p.min())
    hi = min(a_p.max(), t_p.max())
    if hi <= lo:
        raise MetricsError("PSNR ranges of the curves do not overlap")
    fit_a = np.polyfit(a_p, a_r, 3)
    fit_t = np.polyfit(t_p, t_r, 3)
    int_a = np.polyval(np.polyint(fit_a), hi) - np.polyval(np.polyint(fit_a), lo)
    int_t = np.polyval(np.polyint(fit_t), hi) - np.polyval(np.polyint(fit_t), lo)
    avg_diff = (int_t - int_a) / (hi - lo)
    return (10.0 ** avg_diff - 1.0) * 100.0


# ---------------------------------------------------------------------------
# sweeps


def _worker_count() -> int:
    env = os.environ.get("QARV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def rd_sweep(model, images: Sequence[tuple[str, np.ndarray]],
             lambdas: Sequence[float], workers: Optional[int] = None) -> list[RdPoint]:
    """Compress/decompress every (image, lambda) pair; per-image rows plus a
    dataset-mean row per lambda, in deterministic order."""
    if not images:
        raise MetricsError("no images to sweep")
    workers = workers if workers is not None else _worker_count()

    def run_one(task):
        lam, (image_id, img) = task
        container = compress(model, img, lam)
        x_hat = decompress(model, container, DecodeMode())
        return RdPoint(image_id=image_id, lam=lam,
                       bpp=bpp(container, container.width, container.height),
                       psnr=psnr(img, x_hat))

    rows: list[RdPoint] = []
    for lam in lambdas:
        tasks = [(lam, item) for item in images]
        if workers > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                pts = list(pool.map(run_one, tasks))
        else:
            pts = [run_one(t) for t in tasks]
        rows.extend(pts)
        rows.append(RdPoint(image_id=MEAN_ROW_ID, lam=lam,
                            bpp=float(np.mean([p.bpp for p in pts])),
                            psnr=float(np.mean([p.psnr for p in pts]))))
    return rows


def write_rd_csv(path: str, rows: Sequence[RdPoint]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "lambda", "bpp", "psnr"])
        for p in rows:
            writer.writerow([p.image_id, f"{p.lam:.8g}", f"{p.bpp:.8g}", f"{p.psnr:.8g}"])


def read_rd_csv(path: str) -> list[RdPoint]:
    rows: list[RdPoint] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(RdPoint(image_id=rec["image_id"], lam=float(rec["lambda"]),
                                bpp=float(rec["bpp"]), psnr=float(rec["psnr"])))
    if not rows:
        raise MetricsError(f"{path}: no data rows")
    return rows


def curve_from_rows(rows: Sequence[RdPoint]) -> RdCurve:
    """Dataset curve: the mean rows if present, otherwise all rows."""
    mean_rows = [p for p in rows if p.image_id == MEAN_ROW_ID]
    return RdCurve(tuple(mean_rows if mean_rows else rows))
