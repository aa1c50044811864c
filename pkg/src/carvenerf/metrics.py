"""Image metrics and termination-distribution metrics against analytic truth."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.signal import convolve2d, find_peaks

from .diffcore import ConfigurationError

LUMA = np.array([0.299, 0.587, 0.114])
MODE_THRESHOLD = 0.05
TOL_BINS = 2


def psnr(a, b):
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` when identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    return np.outer(w, w)


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., :3] @ LUMA if img.ndim == 3 else img


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM of the luma channels over fully-covered windows."""
    a, b = to_luma(a), to_luma(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < size:
        raise ConfigurationError(f"image {a.shape} smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------- distributions
def _check_normalized(p, name):
    total = float(np.sum(p))
    if abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"{name} sums to {total}, not 1")


def wasserstein1(pmf_a, pmf_b, grid):
    """``sum |CDF_a - CDF_b| * dt`` for two pmfs on the same sorted grid."""
    pmf_a, pmf_b, grid = (np.asarray(x, dtype=np.float64) for x in (pmf_a, pmf_b, grid))
    _check_normalized(pmf_a, "pmf_a")
    _check_normalized(pmf_b, "pmf_b")
    gap = np.abs(np.cumsum(pmf_a) - np.cumsum(pmf_b))[:-1]
    return float(np.sum(gap * np.diff(grid)))


def wasserstein1_points(t_a, p_a, t_b, p_b):
    """W1 between two discrete distributions on arbitrary supports."""
    t = np.concatenate([t_a, t_b])
    order = np.argsort(t, kind="stable")
    pa = np.concatenate([p_a, np.zeros(len(t_b))])[order]
    pb = np.concatenate([np.zeros(len(t_a)), p_b])[order]
    return wasserstein1(pa, pb, t[order])


def learned_peaks(p, threshold=MODE_THRESHOLD):
    """Indices of local maxima of ``p`` with mass above ``threshold``."""
    padded = np.concatenate([[0.0], np.asarray(p, dtype=np.float64), [0.0]])
    idx, _ = find_peaks(padded, height=threshold)
    return idx - 1


def mode_metrics(t_learned, p_learned, t_true, p_true, tol_bins=TOL_BINS, threshold=MODE_THRESHOLD):
    """``(recall, precision)`` of learned local maxima against true modes.

    True modes are snapped to the nearest learned support point; a match is
    within ``tol_bins`` support indices.
    """
    t_learned = np.asarray(t_learned, dtype=np.float64)
    true_t = np.asarray(t_true, dtype=np.float64)[np.asarray(p_true) > 0]
    true_idx = np.argmin(np.abs(t_learned[None, :] - true_t[:, None]), axis=1)
    peaks = learned_peaks(p_learned, threshold)
    if len(true_idx) == 0:
        return 1.0, 1.0 if len(peaks) == 0 else 0.0
    if len(peaks) == 0:
        return 0.0, 0.0
    dist = np.abs(true_idx[:, None] - peaks[None, :])
    recall = float(np.mean(np.min(dist, axis=1) <= tol_bins))
    precision = float(np.mean(np.min(dist, axis=0) <= tol_bins))
    return recall, precision


# -------------------------------------------------------------------- report
@dataclass
class MetricsRow:
    variant: str
    view: int
    rays: str
    psnr: float
    ssim: float
    depth_mae: float
    mode_recall: float
    mode_precision: float
    dist_w1: float


HEADER = [f.name for f in fields(MetricsRow)]


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(HEADER) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in astuple(r)) + "\n")


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HEADER:
            raise ConfigurationError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for rec in reader:
            out.append(MetricsRow(rec["variant"], int(rec["view"]), rec["rays"],
                                  *(float(rec[k]) for k in HEADER[3:])))
        return out


def distribution_metrics(t_learned, p_learned, gt_packed, tol_bins=TOL_BINS):
    """Per-ray ``(recall, precision, w1, depth error)`` arrays.

    ``gt_packed`` is ``(R, S, 2)`` pairs of ``(t, mass)``.
    """
    n = len(t_learned)
    recall = np.empty(n)
    precision = np.empty(n)
    w1 = np.empty(n)
    for i in range(n):
        tt, pt = gt_packed[i, :, 0], gt_packed[i, :, 1]
        recall[i], precision[i] = mode_metrics(t_learned[i], p_learned[i], tt, pt, tol_bins)
        w1[i] = wasserstein1_points(t_learned[i], p_learned[i], tt, pt)
    e_learned = np.sum(t_learned * p_learned, axis=1)
    e_true = np.sum(gt_packed[..., 0] * gt_packed[..., 1], axis=1)
    return recall, precision, w1, np.abs(e_learned - e_true)


def evaluate_view(variant, view, image, t_learned, p_learned, tol_bins=TOL_BINS):
    """Rows for one view: all rays, plus the multimodal subset when present.

    On the multimodal row PSNR is computed over those pixels only; SSIM is
    always the full-image value.
    """
    gt = view.gt.packed_pmf()
    recall, precision, w1, derr = distribution_metrics(t_learned, p_learned, gt, tol_bins)
    s = ssim(image, view.image)
    rows = [MetricsRow(variant, view.index, "all", psnr(image, view.image), s, float(np.mean(derr)),
                       float(np.mean(recall)), float(np.mean(precision)), float(np.mean(w1)))]
    multi = view.gt.n_modes() >= 2
    if np.any(multi):
        flat_pred = image.reshape(-1, 3)[multi]
        flat_true = view.image.reshape(-1, 3)[multi]
        rows.append(MetricsRow(variant, view.index, "multimodal", psnr(flat_pred, flat_true), s,
                               float(np.mean(derr[multi])), float(np.mean(recall[multi])),
                               float(np.mean(precision[multi])), float(np.mean(w1[multi]))))
    return rows


def summarize(rows, rays="all"):
    """Mean of every numeric column per variant for one ray subset."""
    out = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == variant and r.rays == rays]
        if sel:
            out[variant] = {k: float(np.mean([getattr(r, k) for r in sel])) for k in HEADER[3:]}
    return out
