"""Differentiable image warping and occlusion reasoning.

Flow tensors carry 2 channels (u horizontal, v vertical, in pixels; positive u
points right, positive v down).  Every function accepts a single sample
(``C,H,W`` image with ``2,H,W`` flow) or a batch (``N,C,H,W`` / ``N,2,H,W``).

Boundary policy: gathers clamp sample coordinates to the image border; splats
discard weight falling outside the image, so pixels that flow out of frame end
up with a zero range-map value and read as occluded.
"""

from __future__ import annotations

import numpy as np

from flowforge.tensor import Tensor, _result


def _batched(t: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if t.ndim == 3:
        return t.data[None], False
    if t.ndim == 4:
        return t.data, True
    raise ValueError(f"{name} must be 3-d or 4-d, got shape {t.shape}")


def _check_flow(flow: np.ndarray) -> None:
    if flow.shape[1] != 2:
        raise ValueError(f"flow needs 2 channels, got {flow.shape[1]}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")


def _scatter(index: np.ndarray, weights: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(index.reshape(-1), weights=weights.reshape(-1), minlength=size)


# ---------------------------------------------------------------------------
# forward warping: range map and occlusion map


def range_map(flow_backward: Tensor) -> Tensor:
    """Accumulated splat weight each pixel receives under the backward flow.

    Every source pixel carries unit weight to its flow-translated position,
    split bilinearly over the four enclosing grid cells.  Differentiable with
    respect to the flow.
    """
    fd, batched = _batched(flow_backward, "flow")
    _check_flow(fd)
    n, _, h, w = fd.shape
    dtype = fd.dtype

    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tx = xs[None] + fd[:, 0]
    ty = ys[None] + fd[:, 1]
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = (tx - x0).astype(dtype)
    fy = (ty - y0).astype(dtype)

    base = (np.arange(n, dtype=np.int64) * h * w)[:, None, None]
    out = np.zeros(n * h * w, dtype=np.float64)
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            cx, cy = x0 + dx, y0 + dy
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            idx = base + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            weight = np.where(valid, wx * wy, 0.0)
            out += _scatter(idx, weight.astype(np.float64), n * h * w)
            corners.append((idx, valid, dx, dy))
    v = out.reshape(n, h, w).astype(dtype)

    def backward(g):
        gflat = g.reshape(n * h * w)
        # gathered upstream grad at each corner, zero where the splat was discarded
        gc = {}
        for idx, valid, dx, dy in corners:
            gc[(dx, dy)] = np.where(valid, gflat[idx.reshape(-1)].reshape(idx.shape), 0.0)
        gu = (1.0 - fy) * (gc[(1, 0)] - gc[(0, 0)]) + fy * (gc[(1, 1)] - gc[(0, 1)])
        gv = (1.0 - fx) * (gc[(0, 1)] - gc[(0, 0)]) + fx * (gc[(1, 1)] - gc[(1, 0)])
        gf = np.stack([gu, gv], axis=1).astype(g.dtype)
        return (gf if batched else gf[0],)

    return _result(v if batched else v[0], (flow_backward,), backward, "range_map")


def occlusion_map(v: Tensor) -> Tensor:
    """min(1, V): 0 marks occluded pixels, 1 non-occluded, soft in between.

    Zero gradient where V >= 1 (the threshold side wins ties).
    """
    if np.any(v.data < 0):
        raise ValueError("range map values must be non-negative")
    pass_grad = (v.data < 1.0).astype(v.data.dtype)

    def backward(g):
        return (g * pass_grad,)

    return _result(np.minimum(v.data, 1.0), (v,), backward, "occlusion_map")


# ---------------------------------------------------------------------------
# backward warping (bilinear gather)


def _sample_coords(flow: np.ndarray) -> tuple[np.ndarray, ...]:
    """Clamped sample positions plus interpolation corners for a flow array."""
    n, _, h, w = flow.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = xs[None] + flow[:, 0]
    sy = ys[None] + flow[:, 1]
    # pass gradient only where the raw position lies inside the border clamp
    mx = ((sx >= 0) & (sx <= w - 1)).astype(flow.dtype)
    my = ((sy >= 0) & (sy <= h - 1)).astype(flow.dtype)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(np.int64)
    y0 = np.floor(syc).astype(np.int64)
    fx = (sxc - x0).astype(flow.dtype)
    fy = (syc - y0).astype(flow.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return sxc, syc, x0, x1, y0, y1, fx, fy, mx, my


def _gather(img: np.ndarray, ny: np.ndarray, nx: np.ndarray) -> np.ndarray:
    """img (N,C,H,W) indexed by per-pixel integer maps (N,H,W) -> (N,C,H,W)."""
    n = img.shape[0]
    bi = np.arange(n)[:, None, None]
    return img[bi, :, ny, nx].transpose(0, 3, 1, 2)


def backward_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Bilinear sample of ``image`` at positions displaced by ``flow``.

    Out-of-bounds positions clamp to the border.  Differentiable in both the
    image and the flow.
    """
    img, batched = _batched(image, "image")
    fd = flow.data if flow.ndim == 4 else flow.data[None]
    _check_flow(fd)
    n, c, h, w = img.shape
    if fd.shape[0] != n or fd.shape[2:] != (h, w):
        raise ValueError(f"image {image.shape} and flow {flow.shape} are not aligned")

    sxc, syc, x0, x1, y0, y1, fx, fy, mx, my = _sample_coords(fd)
    v00 = _gather(img, y0, x0)
    v01 = _gather(img, y0, x1)
    v10 = _gather(img, y1, x0)
    v11 = _gather(img, y1, x1)
    wx = fx[:, None]
    wy = fy[:, None]
    out = ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01
           + (1 - wx) * wy * v10 + wx * wy * v11)

    def backward(g):
        gu = (g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))).sum(axis=1) * mx
        gv = (g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))).sum(axis=1) * my
        gflow = np.stack([gu, gv], axis=1)
        gimg = np.zeros(n * c * h * w, dtype=np.float64)
        chan = (np.arange(c, dtype=np.int64) * h * w)[None, :, None, None]
        base = (np.arange(n, dtype=np.int64) * c * h * w)[:, None, None, None]
        for ny, nx, wgt in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                            (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
            idx = base + chan + (ny * w + nx)[:, None]
            gimg += _scatter(idx, (g * wgt).astype(np.float64), n * c * h * w)
        gimg = gimg.reshape(n, c, h, w).astype(g.dtype)
        return ((gimg if batched else gimg[0]), (gflow if flow.ndim == 4 else gflow[0]))

    return _result(out if batched else out[0], (image, flow), backward, "backward_warp")


# ---------------------------------------------------------------------------
# backward warping with an enlarged search window


def enlarged_search(image: np.ndarray, target: np.ndarray, flow: np.ndarray,
                    radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Best-matching pixel inside the search window around each flow proposal.

    For every output pixel, scans the integer window of half-width ``radius``
    centered on the rounded (clamped) proposal and returns the coordinates of
    the candidate whose value is closest to the target value (absolute
    difference summed over channels).  Ties prefer the candidate nearest the
    proposal, then window row-major order.  Plain numpy in, plain numpy out:
    this choice is frozen during backprop.
    """
    if radius < 1:
        raise ValueError(f"search radius must be >= 1, got {radius}")
    n, c, h, w = image.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = np.clip(xs[None] + flow[:, 0], 0, w - 1)
    py = np.clip(ys[None] + flow[:, 1], 0, h - 1)
    rx = np.rint(px).astype(np.int64)
    ry = np.rint(py).astype(np.int64)

    offs = np.arange(-radius, radius + 1)
    dyy, dxx = np.meshgrid(offs, offs, indexing="ij")  # row-major window order
    dyy = dyy.reshape(-1)
    dxx = dxx.reshape(-1)
    cx = np.clip(rx[..., None] + dxx, 0, w - 1)  # (N,H,W,K)
    cy = np.clip(ry[..., None] + dyy, 0, h - 1)

    bi = np.arange(n)[:, None, None, None]
    cand = image[bi, :, cy, cx]  # (N,H,W,K,C)
    score = np.abs(cand - target.transpose(0, 2, 3, 1)[:, :, :, None, :]).sum(axis=-1)
    dist2 = (cx - px[..., None]) ** 2 + (cy - py[..., None]) ** 2

    best = score.min(axis=-1, keepdims=True)
    on_best = score == best
    dist_masked = np.where(on_best, dist2, np.inf)
    nearest = dist_masked.min(axis=-1, keepdims=True)
    pick = (on_best & (dist_masked == nearest)).argmax(axis=-1)

    take = np.take_along_axis
    cand_x = take(cx, pick[..., None], axis=-1)[..., 0]
    cand_y = take(cy, pick[..., None], axis=-1)[..., 0]
    return cand_x, cand_y


def _mirror_pair(frac, low, cand):
    """Stencil coordinate pair along one axis.

    The candidate keeps its side of the proposal's unit cell [low, low+1] and
    the opposite corner mirrors it across the cell (low + low+1 - cand), which
    reduces to the plain bilinear pair when the candidate is one of the
    nearest neighbors.  At integer proposals the pair collapses onto the
    proposal column/row.
    """
    mirror = 2 * low + 1 - cand
    left_side = cand <= low + frac  # cand on/left of the proposal
    lo = np.where(left_side, cand, mirror)
    hi = np.where(left_side, mirror, cand)
    lo = np.where(frac == 0, low, lo)
    hi = np.where(frac == 0, low, hi)
    return lo, hi


def backward_warp_enlarged(image: Tensor, target: Tensor, flow: Tensor, radius: int,
                           candidates: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Bilinear warp whose stencil is steered toward the best target match.

    Searches a window of half-width ``radius`` around each proposal for the
    pixel closest in value to ``target``, then interpolates that pixel and its
    three mirrored stencil partners with the plain bilinear weights, so the
    flow receives a gradient pointing at distant matches.  The candidate
    choice itself is constant under differentiation; pass ``candidates`` (from
    :func:`enlarged_search`) to pin it explicitly, e.g. for gradient checks.
    """
    img, batched = _batched(image, "image")
    tgt = target.data if target.ndim == 4 else target.data[None]
    fd = flow.data if flow.ndim == 4 else flow.data[None]
    _check_flow(fd)
    n, c, h, w = img.shape
    if tgt.shape != img.shape:
        raise ValueError(f"image {image.shape} and target {target.shape} differ")
    if fd.shape[0] != n or fd.shape[2:] != (h, w):
        raise ValueError(f"image {image.shape} and flow {flow.shape} are not aligned")
    if candidates is None:
        candidates = enlarged_search(img, tgt, fd, radius)
    elif radius < 1:
        raise ValueError(f"search radius must be >= 1, got {radius}")
    cand_x, cand_y = candidates

    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = xs[None] + fd[:, 0]
    sy = ys[None] + fd[:, 1]
    mx = ((sx >= 0) & (sx <= w - 1)).astype(fd.dtype)
    my = ((sy >= 0) & (sy <= h - 1)).astype(fd.dtype)
    pxc = np.clip(sx, 0, w - 1)
    pyc = np.clip(sy, 0, h - 1)
    x0 = np.floor(pxc).astype(np.int64)
    y0 = np.floor(pyc).astype(np.int64)
    fx = (pxc - x0).astype(fd.dtype)
    fy = (pyc - y0).astype(fd.dtype)

    xl, xr = _mirror_pair(fx, x0, cand_x)
    yl, yr = _mirror_pair(fy, y0, cand_y)
    xl, xr = np.clip(xl, 0, w - 1), np.clip(xr, 0, w - 1)
    yl, yr = np.clip(yl, 0, h - 1), np.clip(yr, 0, h - 1)

    v00 = _gather(img, yl, xl)
    v01 = _gather(img, yl, xr)
    v10 = _gather(img, yr, xl)
    v11 = _gather(img, yr, xr)
    wx = fx[:, None]
    wy = fy[:, None]
    out = ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01
           + (1 - wx) * wy * v10 + wx * wy * v11)

    def backward(g):
        gu = (g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))).sum(axis=1) * mx
        gv = (g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))).sum(axis=1) * my
        gflow = np.stack([gu, gv], axis=1)
        gimg = np.zeros(n * c * h * w, dtype=np.float64)
        chan = (np.arange(c, dtype=np.int64) * h * w)[None, :, None, None]
        base = (np.arange(n, dtype=np.int64) * c * h * w)[:, None, None, None]
        for ny, nx, wgt in ((yl, xl, (1 - wx) * (1 - wy)), (yl, xr, wx * (1 - wy)),
                            (yr, xl, (1 - wx) * wy), (yr, xr, wx * wy)):
            idx = base + chan + (ny * w + nx)[:, None]
            gimg += _scatter(idx, (g * wgt).astype(np.float64), n * c * h * w)
        gimg = gimg.reshape(n, c, h, w).astype(g.dtype)
        return ((gimg if batched else gimg[0]), None,
                (gflow if flow.ndim == 4 else gflow[0]))

    return _result(out if batched else out[0], (image, target, flow), backward,
                   "backward_warp_enlarged")
