"""Occlusion-masked photometric losses and edge-aware smoothness losses.

All losses accept a single sample (channels-first, no batch axis) or a batch,
and return scalar tensors.  Images and warped images share (...,C,H,W); flows
are (...,2,H,W); occlusion masks are (...,H,W).

Per-pixel robust penalties are averaged over channels (and, where both spatial
directions contribute, over directions), so every term bottoms out at the
charbonnier floor of 0.001 regardless of channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import flowforge.tensor as ft
import flowforge.warp as fw
from flowforge.tensor import Tensor

CHARBONNIER_EPS_SQ = 1e-6  # penalty floor sqrt(1e-6) = 0.001


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss terms plus the edge-aware smoothness falloff."""

    photo_brightness: float = 1.0
    photo_gradient: float = 1.0
    smooth_first: float = 10.0
    smooth_second: float = 0.0
    edge_alpha: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


# presets: weights used for Chairs/Sintel-style data vs KITTI-style data
CHAIRS_WEIGHTS = LossWeights(1.0, 1.0, 10.0, 0.0, 10.0)
KITTI_WEIGHTS = LossWeights(0.03, 3.0, 0.0, 10.0, 10.0)


def charbonnier(s: Tensor) -> Tensor:
    """sqrt(s^2 + 0.001^2): a smooth everywhere-differentiable |s|."""
    return ft.sqrt(ft.add(ft.mul(s, s), CHARBONNIER_EPS_SQ))


def _channel_mean(t: Tensor) -> Tensor:
    """(...,C,H,W) -> (...,H,W) average over the channel axis."""
    return ft.mean(t, axes=(t.ndim - 3,))


def _spatial_diff(t: Tensor, axis: int) -> Tensor:
    n = t.shape[axis]
    return ft.sub(ft.narrow(t, axis, 1, n - 1), ft.narrow(t, axis, 0, n - 1))


def photometric_loss(warped: Tensor, target: Tensor, occ: Tensor, mode: str) -> Tensor:
    """Masked mean charbonnier difference between warped and target images.

    ``brightness`` compares intensities; ``gradient`` compares forward-difference
    image gradients in x and y (border row/column excluded).  Only pixels with
    occ > 0 contribute, and the sum is normalized by the total mask weight.
    """
    if warped.shape != target.shape:
        raise ValueError(f"warped {warped.shape} and target {target.shape} differ")
    if mode == "brightness":
        diff = ft.sub(warped, target)
        mask = occ
    elif mode == "gradient":
        h, w = warped.shape[-2:]
        dx = ft.narrow(_spatial_diff(warped, -1), -2, 0, h - 1)
        dy = ft.narrow(_spatial_diff(warped, -2), -1, 0, w - 1)
        tx = ft.narrow(_spatial_diff(target, -1), -2, 0, h - 1)
        ty = ft.narrow(_spatial_diff(target, -2), -1, 0, w - 1)
        diff = ft.concat([ft.sub(dx, tx), ft.sub(dy, ty)], axis=warped.ndim - 3)
        mask = ft.narrow(ft.narrow(occ, -1, 0, w - 1), -2, 0, h - 1)
    else:
        raise ValueError(f"unknown photometric mode {mode!r}")

    penalty = _channel_mean(charbonnier(diff))
    if penalty.shape != mask.shape:
        raise ValueError(f"occlusion mask shape {occ.shape} does not match images")
    masked = ft.mul(penalty, mask)
    num = ft.reduce_sum(masked, axes=(-2, -1))
    den = ft.reduce_sum(mask, axes=(-2, -1))
    if float(np.min(den.data)) <= 0:
        raise ValueError("fully occluded frame")
    return ft.mean(ft.div(num, den))


def smoothness_loss(flow: Tensor, image: Tensor, order: int, alpha: float) -> Tensor:
    """Edge-aware charbonnier penalty on flow derivatives.

    Flow differences (first or second order) are damped by exp(-alpha*|dI|)
    with the image gradient averaged over channels, then averaged over pixels,
    directions, and flow components.
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    total = None
    count = 0
    for axis in (-1, -2):
        img_grad = _channel_mean(ft.absolute(_spatial_diff(image, axis)))
        if order == 1:
            df = _spatial_diff(flow, axis)
            edge = img_grad
        else:
            n = flow.shape[axis]
            a = ft.narrow(flow, axis, 2, n - 2)
            b = ft.narrow(flow, axis, 1, n - 2)
            c = ft.narrow(flow, axis, 0, n - 2)
            df = ft.sub(ft.add(a, c), ft.mul(b, 2.0))
            edge = ft.narrow(img_grad, axis, 1, n - 2)
        weight = ft.exp(ft.mul(edge, -alpha))
        comp_axis = flow.ndim - 3
        weight2 = ft.repeat_axis(ft.unsqueeze(weight, comp_axis), comp_axis, 2)
        penalty = charbonnier(ft.mul(df, weight2))
        term = ft.reduce_sum(penalty)
        count += penalty.size
        total = term if total is None else ft.add(total, term)
    return ft.div(total, float(count))


def total_loss(i1: Tensor, i2: Tensor, flow_fwd: Tensor, flow_bwd: Tensor,
               weights: LossWeights, radius: int = 4, occlusion: bool = True,
               detach_occlusion: bool = True) -> tuple[Tensor, dict]:
    """Weighted sum of the photometric and smoothness terms at one scale.

    The occlusion mask comes from forward-warping the backward flow; with
    ``occlusion=False`` the mask is all-ones (no occlusion handling).  The
    warped image uses the enlarged search when ``radius`` >= 1, plain bilinear
    warping when ``radius`` == 0.  ``detach_occlusion`` stops gradients from
    shrinking the non-occluded area through the mask.
    """
    if occlusion:
        occ = fw.occlusion_map(fw.range_map(flow_bwd))
        if detach_occlusion:
            occ = occ.detach()
    else:
        shape = (i1.shape[0], *i1.shape[-2:]) if i1.ndim == 4 else i1.shape[-2:]
        occ = Tensor(np.ones(shape, dtype=i1.data.dtype), dtype=i1.data.dtype)

    if radius >= 1:
        warped = fw.backward_warp_enlarged(i2, i1, flow_fwd, radius)
    else:
        warped = fw.backward_warp(i2, flow_fwd)

    lp1 = photometric_loss(warped, i1, occ, "brightness")
    lp2 = photometric_loss(warped, i1, occ, "gradient")
    ls1 = smoothness_loss(flow_fwd, i1, 1, weights.edge_alpha)
    ls2 = smoothness_loss(flow_fwd, i1, 2, weights.edge_alpha)

    total = ft.mul(lp1, weights.photo_brightness)
    total = ft.add(total, ft.mul(lp2, weights.photo_gradient))
    total = ft.add(total, ft.mul(ls1, weights.smooth_first))
    total = ft.add(total, ft.mul(ls2, weights.smooth_second))
    parts = {
        "photo_brightness": lp1.item(),
        "photo_gradient": lp2.item(),
        "smooth_first": ls1.item(),
        "smooth_second": ls2.item(),
        "total": total.item(),
        "occluded_fraction": 1.0 - float(np.mean(occ.data)),
    }
    return total, parts


@dataclass(frozen=True)
class ScaleSchedule:
    """Per-scale loss weights as a function of training progress t in [0,1].

    Starts uniform, then ramps linearly until ``ramp_end`` toward a profile
    with ``final_finest_weight`` on the finest scale and the remainder decaying
    geometrically over coarser scales; constant afterwards.
    """

    num_scales: int
    final_finest_weight: float = 0.7
    coarse_ratio: float = 0.5
    ramp_end: float = 0.5

    def weights(self, t: float) -> np.ndarray:
        """Weight per scale, index 0 = coarsest; always sums to 1."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"progress t must be in [0, 1], got {t}")
        n = self.num_scales
        if n == 1:
            return np.array([1.0])
        start = np.full(n, 1.0 / n)
        raw = self.coarse_ratio ** np.arange(1, n)  # distance from the finest scale
        coarse = (1.0 - self.final_finest_weight) * raw / raw.sum()
        end = np.concatenate([coarse[::-1], [self.final_finest_weight]])
        s = 1.0 if self.ramp_end <= 0 else min(t / self.ramp_end, 1.0)
        return (1.0 - s) * start + s * end


def multiscale_loss(per_scale_losses: list[Tensor], schedule: ScaleSchedule, t: float) -> Tensor:
    """Schedule-weighted combination of per-scale losses (coarsest first)."""
    if len(per_scale_losses) != schedule.num_scales:
        raise ValueError(f"got {len(per_scale_losses)} losses for {schedule.num_scales} scales")
    w = schedule.weights(t)
    total = None
    for weight, loss in zip(w, per_scale_losses):
        term = ft.mul(loss, float(weight))
        total = term if total is None else ft.add(total, term)
    return total
