"""Quality and rate-distortion metrics: PSNR, SSIM and the Bjontegaard
bitrate / PSNR deltas between rate-distortion curves.

The Bjontegaard deltas use the classic procedure: a cubic fit of
log10(bitrate) against quality (or quality against log10 bitrate),
integrated in closed form over the curves' common interval. Negative
BD-rate means the test curve saves bitrate; positive BD-PSNR means it
gains quality.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak=255.0):
    """10*log10(peak^2 / MSE); equal inputs give math.inf."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_from_mse(mse, peak=255.0):
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mse(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def _gaussian_window():
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-(ax ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


_SSIM_G1 = _gaussian_window()


def _filter_valid(x, g1):
    # separable valid-mode correlation with the 1-D window along both axes
    rows = sliding_window_view(x, len(g1), axis=0) @ g1
    return sliding_window_view(rows, len(g1), axis=1) @ g1


def ssim(a, b, peak=255.0):
    """Mean structural similarity: 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, averaged over all valid window positions."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"plane must be 2-D with min side >= {SSIM_WINDOW}, "
                         f"got {a.shape}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g1 = _SSIM_G1
    mu_a = _filter_valid(a, g1)
    mu_b = _filter_valid(b, g1)
    var_a = _filter_valid(a * a, g1) - mu_a * mu_a
    var_b = _filter_valid(b * b, g1) - mu_b * mu_b
    cov = _filter_valid(a * b, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Rate-distortion curves and Bjontegaard deltas

@dataclass(frozen=True)
class RdPoint:
    bitrate: float  # kilobits/second
    quality: float  # PSNR dB

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError(f"bitrate must be > 0, got {self.bitrate}")


@dataclass
class RdCurve:
    points: list
    label: str = ""

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValueError(f"an RD curve needs >= 4 points, got {len(self.points)}")
        rates = [p.bitrate for p in self.points]
        if any(b >= a for a, b in zip(rates[1:], rates)):
            raise ValueError("bitrates must be strictly increasing")
        quals = [p.quality for p in self.points]
        if any(b < a for a, b in zip(quals, quals[1:])):
            warnings.warn(f"RD curve {self.label!r}: quality decreases with "
                          f"bitrate", stacklevel=2)

    @property
    def rates(self):
        return np.array([p.bitrate for p in self.points], np.float64)

    @property
    def qualities(self):
        return np.array([p.quality for p in self.points], np.float64)


def _definite_integral(poly, lo, hi):
    p = np.polyint(poly)
    return np.polyval(p, hi) - np.polyval(p, lo)


def bd_rate(anchor, test):
    """Average bitrate delta (%) at equal quality; negative saves bitrate."""
    la = np.log10(anchor.rates)
    lt = np.log10(test.rates)
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise ValueError("RD curves share no quality interval")
    pa = np.polyfit(anchor.qualities, la, 3)
    pt = np.polyfit(test.qualities, lt, 3)
    avg = (_definite_integral(pt, lo, hi) - _definite_integral(pa, lo, hi)) / (hi - lo)
    return (10.0 ** avg - 1.0) * 100.0


def bd_psnr(anchor, test):
    """Average quality delta (dB) at equal bitrate; positive is better."""
    la = np.log10(anchor.rates)
    lt = np.log10(test.rates)
    lo = max(la.min(), lt.min())
    hi = min(la.max(), lt.max())
    if not hi > lo:
        raise ValueError("RD curves share no bitrate interval")
    pa = np.polyfit(la, anchor.qualities, 3)
    pt = np.polyfit(lt, test.qualities, 3)
    return (_definite_integral(pt, lo, hi) - _definite_integral(pa, lo, hi)) / (hi - lo)


def bd_interval(anchor, test):
    """The common quality and log10-bitrate intervals used by the deltas."""
    q = (max(anchor.qualities.min(), test.qualities.min()),
         min(anchor.qualities.max(), test.qualities.max()))
    la = np.log10(anchor.rates)
    lt = np.log10(test.rates)
    r = (max(la.min(), lt.min()), min(la.max(), lt.max()))
    return q, r


def read_rd_csv(path, label=""):
    """RD curve from a 'bitrate_kbps,psnr_db' CSV."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["bitrate_kbps", "psnr_db"]:
            raise ValueError(f"{path}: expected header 'bitrate_kbps,psnr_db'")
        for row in reader:
            if not row or not row[0].strip():
                continue
            points.append(RdPoint(float(row[0]), float(row[1])))
    return RdCurve(points, label or path)


def append_rd_csv(path, bitrate, quality):
    import os
    fresh = not os.path.exists(path)
    with open(path, "a", newline="\n") as fh:
        if fresh:
            fh.write("bitrate_kbps,psnr_db\n")
        fh.write(f"{bitrate!r},{quality!r}\n")
