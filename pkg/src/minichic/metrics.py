"""Quality metrics, Bjontegaard rate difference and result tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PSNR_IDENTICAL = 99.0

CSV_FIELDS = ("image", "lambda", "arch", "n_iters", "kappa_enc", "bpp", "psnr_db", "encode_s", "decode_ms")


def as_rgb(img: np.ndarray) -> np.ndarray:
    """(H, W) or (H, W, 1|3|4) 8-bit image -> (H, W, 3) uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected an 8-bit image, got {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3, 4):
        raise ValueError(f"unsupported image shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3])


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(ref: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB; identical inputs give the 99 dB sentinel."""
    err = mse(ref, test)
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / err)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class RdCurve:
    rate: np.ndarray
    psnr: np.ndarray

    def __post_init__(self):
        self.rate = np.asarray(self.rate, dtype=np.float64)
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        if self.rate.shape != self.psnr.shape or self.rate.ndim != 1:
            raise ValueError("rate and psnr must be 1-D and of equal length")
        if self.rate.size < 4:
            raise ValueError("at least 4 rate points are needed")
        if np.any(self.rate <= 0):
            raise ValueError("rates must be positive")
        if not np.all(np.isfinite(self.psnr)):
            raise ValueError("PSNR values must be finite")
        order = np.argsort(self.rate, kind="stable")
        self.rate, self.psnr = self.rate[order], self.psnr[order]
        if np.any(np.diff(self.rate) <= 0):
            raise ValueError("rates must be distinct")

    @classmethod
    def from_points(cls, points) -> "RdCurve":
        pts = list(points)
        return cls([p[0] for p in pts], [p[1] for p in pts])

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.rate.tolist(), self.psnr.tolist()))


def _integrate_log_rate(curve: RdCurve, lo: float, hi: float) -> float:
    coeffs = np.polyfit(curve.psnr, np.log(curve.rate), 3)
    integral = np.polyint(coeffs)
    return float(np.polyval(integral, hi) - np.polyval(integral, lo))


def bd_rate(test: RdCurve, anchor: RdCurve) -> float:
    """Average rate difference (percent) of ``test`` over ``anchor`` at equal PSNR.

    Cubic fit of log-rate against PSNR, integrated over the overlapping PSNR range.
    """
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping quality range")
    diff = (_integrate_log_rate(test, lo, hi) - _integrate_log_rate(anchor, lo, hi)) / (hi - lo)
    return (math.exp(diff) - 1.0) * 100.0


def write_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: row[k] for k in CSV_FIELDS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        return list(rd)


def curves_from_rows(rows: Iterable[dict]) -> dict[str, RdCurve]:
    """Group sweep rows (as written or as read back from CSV) into one curve per image."""
    points: dict[str, list] = {}
    for r in rows:
        points.setdefault(str(r["image"]), []).append((float(r["bpp"]), float(r["psnr_db"])))
    return {name: RdCurve.from_points(p) for name, p in points.items()}
