"""Mask accuracy/IoU and foreground rendering quality (PSNR/SSIM on a
tight ground-truth crop), plus the structured text records the CLI
prints and re-reads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EvalError(ValueError):
    pass


@dataclass
class MaskMetrics:
    accuracy: float
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int
    degenerate: bool = False   # empty-over-empty IoU convention used

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class RenderMetrics:
    psnr: float
    ssim: float
    bbox: tuple   # (v0, v1, u0, u1) inclusive-exclusive rows/cols


def mask_metrics(pred: np.ndarray, gt: np.ndarray) -> MaskMetrics:
    """Pixel accuracy and foreground IoU.

    IoU of an empty prediction against an empty gt is defined as 1 and
    flagged degenerate.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise EvalError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    total = tp + fp + fn + tn
    acc = (tp + tn) / total
    union = tp + fp + fn
    if union == 0:
        return MaskMetrics(acc, 1.0, tp, fp, fn, tn, degenerate=True)
    return MaskMetrics(acc, tp / union, tp, fp, fn, tn)


def crop_to_gt_bbox(image: np.ndarray, gt_mask: np.ndarray,
                    pad: int = 0) -> np.ndarray:
    """Tight axis-aligned crop around the gt's true pixels, padded and
    clamped to the image."""
    gt_mask = np.asarray(gt_mask).astype(bool)
    if image.shape[:2] != gt_mask.shape:
        raise EvalError("image and gt mask sizes differ")
    if not gt_mask.any():
        raise EvalError("cannot crop to an empty gt mask")
    rows = np.flatnonzero(gt_mask.any(axis=1))
    cols = np.flatnonzero(gt_mask.any(axis=0))
    v0 = max(rows[0] - pad, 0)
    v1 = min(rows[-1] + pad + 1, gt_mask.shape[0])
    u0 = max(cols[0] - pad, 0)
    u1 = min(cols[-1] + pad + 1, gt_mask.shape[1])
    return image[v0:v1, u0:u1]


def gt_bbox(gt_mask: np.ndarray, pad: int = 0) -> tuple:
    gt_mask = np.asarray(gt_mask).astype(bool)
    if not gt_mask.any():
        raise EvalError("cannot crop to an empty gt mask")
    rows = np.flatnonzero(gt_mask.any(axis=1))
    cols = np.flatnonzero(gt_mask.any(axis=0))
    return (max(rows[0] - pad, 0),
            min(rows[-1] + pad + 1, gt_mask.shape[0]),
            max(cols[0] - pad, 0),
            min(cols[-1] + pad + 1, gt_mask.shape[1]))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.min() < -1e-9 or a.max() > 1 + 1e-9 or b.min() < -1e-9 \
            or b.max() > 1 + 1e-9:
        raise EvalError("images must be in [0, 1]")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/mse) for unit-range images, capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _luma(img):
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img, kernel):
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, C1 = 0.01^2,
    C2 = 0.03^2, valid windows only; RGB reduced to luminance first."""
    a, b = _check_pair(a, b)
    x = _luma(a)
    y = _luma(b)
    k = _gaussian_kernel()
    if x.shape[0] < 11 or x.shape[1] < 11:
        raise EvalError("image smaller than the 11x11 SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx = _windowed_mean(x, k)
    my = _windowed_mean(y, k)
    sxx = _windowed_mean(x * x, k) - mx * mx
    syy = _windowed_mean(y * y, k) - my * my
    sxy = _windowed_mean(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def render_metrics(pred_img: np.ndarray, gt_img: np.ndarray,
                   gt_mask: np.ndarray, pad: int = 0) -> RenderMetrics:
    """PSNR/SSIM of the predicted foreground render inside the gt bbox."""
    box = gt_bbox(gt_mask, pad)
    pa = crop_to_gt_bbox(pred_img, gt_mask, pad)
    pb = crop_to_gt_bbox(gt_img, gt_mask, pad)
    return RenderMetrics(psnr(pa, pb), ssim(pa, pb), box)


# -- report records -----------------------------------------------------------
#
# One record per line: "<scene id>\t<metric>\t<value>". Values print
# with repr-exact precision so `eval` on saved artifacts reproduces the
# in-run numbers bitwise.

def format_report(records) -> str:
    lines = [f"{scene}\t{metric}\t{value:.17g}"
             for scene, metric, value in records]
    return "\n".join(lines) + "\n"


def parse_report(text: str):
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise EvalError(f"report line {i}: expected 3 tab-separated "
                            f"fields, got {len(parts)}")
        out.append((parts[0], parts[1], float(parts[2])))
    return out
