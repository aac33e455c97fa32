"""Evaluation metrics and the serialized metrics report.

MAE is measured in Hounsfield units; PSNR and SSIM on volumes normalized to
[0, 1] (peak / dynamic range 1). Per-band MAEs compare low and high bands of
prediction and ground truth. Three-class thresholding (air, soft tissue,
bone) gives per-class Dice overlaps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError
from .frequency import GaussianSpec, decompose
from .volume import Domain, HURange, Volume, normalize_ct

N_CLASSES = 3


def _arrays(a, b):
    a = np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Volume) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dims mismatch: {a.shape} vs {b.shape}")
    return a, b


def error_map(a, b):
    """Voxelwise |a - b| as a volume (brighter means larger error)."""
    x, y = _arrays(a, b)
    err = np.abs(x - y)
    return a.like(err, a.domain) if isinstance(a, Volume) else err


def mae(a, b):
    x, y = _arrays(a, b)
    return float(np.mean(np.abs(x - y)))


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    x, y = _arrays(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(x, taps):
    n = len(taps)
    for axis in range(x.ndim):
        length = x.shape[axis] - n + 1
        out = np.zeros(x.shape[:axis] + (length,) + x.shape[axis + 1:])
        for i, t in enumerate(taps):
            out += t * np.take(x, np.arange(i, i + length), axis=axis)
        x = out
    return x


def ssim(a, b, window=11, sigma=1.5, data_range=1.0):
    """Mean SSIM over every position where the 3D Gaussian window fits."""
    x, y = _arrays(a, b)
    if min(x.shape) < window:
        raise ArgumentError(f"volume {x.shape} is smaller than the {window}^3 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    taps = gaussian_window(window, sigma)
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x**2
    var_y = _filter_valid(y * y, taps) - mu_y**2
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def threshold_segment(ct, t_air=-200.0, t_bone=200.0):
    """0 = air/background (< t_air), 1 = soft tissue, 2 = bone (>= t_bone)."""
    if not t_air < t_bone:
        raise ArgumentError(f"need t_air < t_bone, got {t_air}, {t_bone}")
    data = np.asarray(ct.data if isinstance(ct, Volume) else ct)
    mask = np.ones(data.shape, dtype=np.uint8)
    mask[data < t_air] = 0
    mask[data >= t_bone] = 2
    return mask


def dice(m1, m2):
    """Per-class Dice; a class absent from both masks scores 1."""
    m1, m2 = np.asarray(m1), np.asarray(m2)
    if m1.shape != m2.shape:
        raise ShapeError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    out = []
    for c in range(N_CLASSES):
        a, b = m1 == c, m2 == c
        total = int(a.sum()) + int(b.sum())
        out.append(1.0 if total == 0 else 2.0 * int(np.logical_and(a, b).sum()) / total)
    return tuple(out)


@dataclass
class EvalConfig:
    sigma: float = 2.0
    t_air: float = -200.0
    t_bone: float = 200.0
    ssim_window: int = 11
    hu: HURange = field(default_factory=HURange)


@dataclass
class MetricsReport:
    mae: float
    psnr: float
    ssim: float
    mae_high: float
    mae_low: float
    dice: tuple
    clamp_count: int
    provenance: dict = field(default_factory=dict)

    SCALARS = ("mae", "psnr", "ssim", "mae_high", "mae_low")

    def to_text(self):
        lines = [f"{k} = {_fmt(getattr(self, k))}" for k in self.SCALARS]
        lines += [f"dice_{i} = {_fmt(v)}" for i, v in enumerate(self.dice)]
        lines.append(f"clamp_count = {self.clamp_count}")
        lines += [f"provenance.{k} = {v}" for k, v in self.provenance.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values, prov = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("provenance."):
                prov[key[len("provenance."):]] = value
            else:
                values[key] = value
        dice_ = tuple(float(values.pop(f"dice_{i}")) for i in range(N_CLASSES))
        return cls(**{k: float(values[k]) for k in cls.SCALARS}, dice=dice_,
                   clamp_count=int(values["clamp_count"]), provenance=prov)

    def csv_header(self):
        return ",".join(list(self.SCALARS) + [f"dice_{i}" for i in range(N_CLASSES)]
                        + ["clamp_count"])

    def csv_row(self):
        vals = [_fmt(getattr(self, k)) for k in self.SCALARS] + [_fmt(v) for v in self.dice]
        return ",".join(vals + [str(self.clamp_count)])


def _fmt(x):
    return "inf" if x == math.inf else repr(float(x))


def evaluate(pred, gt, config=EvalConfig(), pred_bands=None, provenance=None):
    """All metrics for a predicted CT volume against ground truth (both in HU).

    ``pred_bands`` optionally supplies the model's own (low, high) outputs in
    HU; otherwise the prediction is split with the same low-pass as the
    ground truth.
    """
    if pred.dims != gt.dims:
        raise ShapeError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    hu = config.hu
    pred_n = normalize_ct(pred, hu)
    gt_n = normalize_ct(gt, hu)
    window = min(config.ssim_window, min(gt.dims))
    window -= 1 - window % 2
    spec = GaussianSpec(config.sigma)
    gt_bands = decompose(gt.like(gt.data, Domain.CT_HU), spec)
    if pred_bands is None:
        pb = decompose(pred.like(pred.data, Domain.CT_HU), spec)
        pred_low, pred_high = pb.low.data, pb.high.data
    else:
        pred_low, pred_high = (np.asarray(getattr(v, "data", v)) for v in pred_bands)
    return MetricsReport(
        mae=mae(pred, gt),
        psnr=psnr(pred_n, gt_n),
        ssim=ssim(pred_n, gt_n, window=window),
        mae_high=mae(pred_high, gt_bands.high.data),
        mae_low=mae(pred_low, gt_bands.low.data),
        dice=dice(threshold_segment(pred, config.t_air, config.t_bone),
                  threshold_segment(gt, config.t_air, config.t_bone)),
        clamp_count=pred_n.clamp_count,
        provenance=dict(provenance or {}),
    )
