"""Quantitative map evaluation: PSNR, SSIM, nRMSE, Dice, paired t-tests.

Conventions (fixed for reproducibility): the PSNR data range is max - min of
the reference within the mask; SSIM uses a 7x7 Gaussian window (sigma 1.5,
K1 = 0.01, K2 = 0.03, reflect boundary) evaluated per axial slice with the
dynamic range taken from the reference; nRMSE is ||pred - gt|| / ||gt|| over
the mask.  Multi-channel reports aggregate by the mean over channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

__all__ = [
    "MetricReport",
    "psnr",
    "ssim",
    "ssim_volume",
    "nrmse",
    "dice",
    "paired_t_test",
    "report_channels",
]


def _masked(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {pred.shape}")
    if not mask.any():
        raise ValueError("mask is empty")
    return pred, gt, mask


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf.

    The peak is the reference range (max - min) inside the mask; a zero
    range is rejected.
    """
    pred, gt, mask = _masked(pred, gt, mask)
    rng = float(gt[mask].max() - gt[mask].min())
    if rng <= 0:
        raise ValueError("reference has zero range inside the mask")
    mse = float(np.mean((pred[mask] - gt[mask]) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(rng * rng / mse)


def _gaussian_kernel(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()
_SSIM_K1, _SSIM_K2 = 0.01, 0.03


def ssim(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray | None = None,
    data_range: float | None = None,
) -> float:
    """Mean local structural similarity of one 2D slice over masked windows.

    Local means, variances and covariance come from a 7x7 Gaussian window
    (sigma 1.5).  The dynamic range defaults to max - min of the reference
    slice; pass ``data_range`` explicitly to share a convention between
    calls (required when the reference is constant).
    """
    pred, gt, mask = _masked(pred, gt, mask)
    if pred.ndim != 2 or min(pred.shape) < 7:
        raise ValueError("ssim expects a 2D slice of at least 7x7")
    if data_range is None:
        data_range = float(gt.max() - gt.min())
        if data_range <= 0:
            raise ValueError("reference slice is constant; pass data_range explicitly")
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2

    conv = lambda a: ndimage.correlate(a, _SSIM_KERNEL, mode="reflect")
    mx, my = conv(pred), conv(gt)
    mxx, myy, mxy = conv(pred * pred), conv(gt * gt), conv(pred * gt)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num[mask] / den[mask]))


def ssim_volume(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Slice-wise SSIM of a 3D map, averaged over axial slices with mask support.

    The dynamic range is shared across slices (reference range inside the
    mask); slices with no masked voxels are skipped.
    """
    pred, gt, mask = _masked(pred, gt, mask)
    rng = float(gt[mask].max() - gt[mask].min())
    if rng <= 0:
        raise ValueError("reference has zero range inside the mask")
    vals = []
    for z in range(pred.shape[2]):
        m = mask[:, :, z]
        if not m.any():
            continue
        vals.append(ssim(pred[:, :, z], gt[:, :, z], m, data_range=rng))
    return float(np.mean(vals))


def nrmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Normalized root mean square error ||pred - gt|| / ||gt|| over the mask."""
    pred, gt, mask = _masked(pred, gt, mask)
    denom = float(np.linalg.norm(gt[mask]))
    if denom == 0:
        raise ValueError("reference is zero inside the mask")
    return float(np.linalg.norm(pred[mask] - gt[mask]) / denom)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|); two empty masks count as 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def paired_t_test(samples_a, samples_b) -> tuple[float, float]:
    """Two-sided paired Student's t-test.

    Returns (t, p).  All-zero differences give (0, 1) by convention; a
    nonzero constant difference gives an infinite t and p = 0.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two equal-length 1D sample vectors")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        return float(np.sign(mean)) * float("inf"), 0.0
    t = mean / (sd / np.sqrt(n))
    nu = n - 1
    p = float(special.betainc(nu / 2.0, 0.5, nu / (nu + t * t)))
    return float(t), p


@dataclass
class MetricReport:
    """Per-channel and aggregate map quality for one method/condition."""

    channels: list[str]
    psnr: dict[str, float] = field(default_factory=dict)
    ssim: dict[str, float] = field(default_factory=dict)
    nrmse: dict[str, float] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)
    mask_voxels: int = 0

    def to_rows(self, **context) -> list[dict]:
        """One CSV-ready row per channel plus the aggregate row."""
        rows = []
        for ch in list(self.channels) + ["all"]:
            rows.append(
                {
                    **context,
                    "channel": ch,
                    "psnr": self.psnr.get(ch, ""),
                    "ssim": self.ssim.get(ch, ""),
                    "nrmse": self.nrmse.get(ch, ""),
                    "mask_voxels": self.mask_voxels,
                }
            )
        return rows


def report_channels(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    channels: list[str],
) -> MetricReport:
    """Evaluate (W, H, S, N) prediction and reference maps channel by channel.

    The aggregate entry ``all`` is the mean over channels (infinite PSNR
    values propagate).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[3] != len(channels):
        raise ValueError("prediction/reference must be (W, H, S, n_channels)")
    rep = MetricReport(channels=list(channels), mask_voxels=int(np.sum(mask)))
    for i, ch in enumerate(channels):
        rep.psnr[ch] = psnr(pred[..., i], gt[..., i], mask)
        rep.ssim[ch] = ssim_volume(pred[..., i], gt[..., i], mask)
        rep.nrmse[ch] = nrmse(pred[..., i], gt[..., i], mask)
    rep.psnr["all"] = float(np.mean([rep.psnr[c] for c in channels]))
    rep.ssim["all"] = float(np.mean([rep.ssim[c] for c in channels]))
    rep.nrmse["all"] = float(np.mean([rep.nrmse[c] for c in channels]))
    return rep
