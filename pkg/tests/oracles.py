"""Brute-force reference implementations used as independent test oracles.

Everything here is deliberately slow and loop-based, mirroring the defining
formulas directly rather than the vectorized production paths.
"""

import numpy as np


def brute_range_map(flow):
    """Direct double-sum evaluation of the range map for a (2,H,W) flow."""
    u, v = np.asarray(flow, dtype=np.float64)
    h, w = u.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            total = 0.0
            for j in range(h):
                for i in range(w):
                    wx = max(0.0, 1.0 - abs(x - (i + u[j, i])))
                    wy = max(0.0, 1.0 - abs(y - (j + v[j, i])))
                    total += wx * wy
            out[y, x] = total
    return out


def brute_bilinear_warp(image, flow):
    """Per-pixel bilinear gather with border clamping for (C,H,W) images."""
    image = np.asarray(image, dtype=np.float64)
    u, v = np.asarray(flow, dtype=np.float64)
    c, h, w = image.shape
    out = np.zeros_like(image)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + u[y, x], 0.0), w - 1.0)
            sy = min(max(y + v[y, x], 0.0), h - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            out[:, y, x] = ((1 - fx) * (1 - fy) * image[:, y0, x0]
                            + fx * (1 - fy) * image[:, y0, x1]
                            + (1 - fx) * fy * image[:, y1, x0]
                            + fx * fy * image[:, y1, x1])
    return out


def brute_occlusion_from_forward_map(owner1, owner2, flows, h, w):
    """Occlusion of frame-1 pixels by forward mapping with depth order.

    ``owner1``/``owner2`` give the paint-order index of the surface visible at
    each pixel in frame 1/2 (-1 = background).  ``flows`` maps owner index to
    its integer (dx, dy) displacement.  A pixel is occluded when its target
    leaves the frame or another source pixel of strictly higher paint order
    lands on the same target cell.
    """
    targets = {}
    for y in range(h):
        for x in range(w):
            dx, dy = flows[owner1[y, x]]
            tx, ty = x + int(dx), y + int(dy)
            if 0 <= tx < w and 0 <= ty < h:
                key = (ty, tx)
                order = owner1[y, x]
                if key not in targets or order > targets[key]:
                    targets[key] = order
    occ = np.ones((h, w))
    for y in range(h):
        for x in range(w):
            dx, dy = flows[owner1[y, x]]
            tx, ty = x + int(dx), y + int(dy)
            if not (0 <= tx < w and 0 <= ty < h):
                occ[y, x] = 0.0
            elif targets[(ty, tx)] > owner1[y, x]:
                occ[y, x] = 0.0
    return occ


def brute_max_f_measure(scores, gt_occluded, num_steps=255):
    """Confusion-matrix sweep for the occlusion F-measure."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_occluded).reshape(-1).astype(bool)
    best = 0.0
    for k in range(num_steps):
        tau = k / (num_steps - 1)
        pred = scores >= tau
        tp = np.sum(pred & gt)
        fp = np.sum(pred & ~gt)
        fn = np.sum(~pred & gt)
        denom = 2 * tp + fp + fn
        f = 2 * tp / denom if denom else 0.0
        best = max(best, f)
    return best
