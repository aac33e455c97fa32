"""Whole-volume prediction by sliding windows with overlap-tiling stitching.

Windows start at multiples of the stride; the last window on each axis is
moved back to sit flush with the boundary instead of padding the volume.
Overlapping predictions are averaged with uniform weights. The average is
kept as a running mean so that identical contributions stitch back to the
identical value.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .training import _triple
from .volume import Domain, Volume


def axis_origins(n, window, stride):
    if window > n:
        raise ArgumentError(f"window {window} exceeds extent {n}")
    if not 1 <= stride <= window:
        raise ArgumentError(f"stride must satisfy 1 <= stride <= window, got {stride}")
    origins = list(range(0, n - window + 1, stride))
    if origins[-1] != n - window:
        origins.append(n - window)
    return origins


@dataclass
class StitchPlan:
    dims: tuple
    window: tuple
    stride: tuple
    origins: list

    def coverage(self):
        """Number of windows covering each voxel."""
        counts = np.zeros(self.dims, dtype=np.int64)
        for sl in self.slices():
            counts[sl] += 1
        return counts

    def normalized_weight_sum(self):
        """Per-voxel sum of normalized window weights (1 everywhere for a valid plan).

        Every window adds a unit weight; the accumulated map is normalized once
        at the end, so the result is exact.
        """
        weight = np.zeros(self.dims)
        for sl in self.slices():
            weight[sl] += 1.0
        if weight.min() < 1:
            raise ShapeError("plan leaves voxels uncovered")
        return weight / weight

    def slices(self):
        for o in self.origins:
            yield tuple(slice(a, a + w) for a, w in zip(o, self.window))


def plan_windows(dims, window, stride=None):
    dims = tuple(int(d) for d in dims)
    window = _triple(window)
    stride = tuple(max(1, w // 2) for w in window) if stride is None else _triple(stride)
    per_axis = [axis_origins(n, w, s) for n, w, s in zip(dims, window, stride)]
    return StitchPlan(dims, window, stride, list(itertools.product(*per_axis)))


def stitch(predict, x, plan, n_outputs=1):
    """Run ``predict`` on every window of the (1, D, H, W) array ``x``.

    ``predict`` returns a tuple of ``n_outputs`` arrays shaped like the window
    (None entries are skipped). Returns the stitched (D, H, W) arrays.
    """
    if tuple(x.shape[1:]) != plan.dims:
        raise ShapeError(f"input dims {x.shape[1:]} do not match plan dims {plan.dims}")
    means = [np.zeros(plan.dims, dtype=np.float64) for _ in range(n_outputs)]
    counts = np.zeros(plan.dims, dtype=np.int64)
    present = [False] * n_outputs
    for sl in plan.slices():
        outs = predict(x[(slice(None),) + sl])
        counts[sl] += 1
        n = counts[sl]
        for k, out in enumerate(outs):
            if out is None:
                continue
            present[k] = True
            out = np.asarray(out, dtype=np.float64).reshape(plan.window)
            region = means[k][sl]
            region += (out - region) / n
    return [m if p else None for m, p in zip(means, present)]


@dataclass
class Prediction:
    ct: Volume
    low: Volume | None = None
    high: Volume | None = None


def predict_volume(model, mr, plan):
    """Stitched CT_NORM prediction (plus low/high bands when the model has them).

    ``mr`` is an MR_NORM volume; ``model.predict`` maps a (1, d, h, w) window
    to ``(y_low, y_high, y)`` arrays.
    """
    x = mr.data[None]

    def run(window):
        y_low, y_high, y = model.predict(window)
        return y, y_low, y_high

    y, low, high = stitch(run, x, plan, n_outputs=3)
    dtype = mr.data.dtype
    wrap = lambda a, dom: None if a is None else mr.like(a.astype(dtype), dom)  # noqa: E731
    return Prediction(wrap(y, Domain.CT_NORM), wrap(low, Domain.CT_LOWFREQ),
                      wrap(high, Domain.CT_HIGHFREQ))
