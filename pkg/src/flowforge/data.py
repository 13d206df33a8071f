"""Synthetic moving-shapes data with exact ground truth, plus flow file I/O.

Scenes are a textured background under a small global drift with a handful of
rigidly translating textured shapes painted on top.  Because every surface is
parametric, forward/backward flow and the occlusion mask are computed exactly
(a frame-1 pixel is occluded when its target leaves the frame or a surface
higher in the paint order covers the target in frame 2).

Also here: per-channel histogram equalization, flip/swap augmentation, the
Middlebury .flo format, KITTI-style 16-bit flow PNGs, and the color-wheel
flow visualization.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from flowforge.tensor import Tensor

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """Per-pixel displacement map: u points right, v points down, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u/v must be equal 2-d maps, got {self.u.shape} and {self.v.shape}")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    @staticmethod
    def from_array(arr) -> "FlowField":
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"expected a (2,H,W) array, got {arr.shape}")
        return FlowField(arr[0], arr[1])

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2)


@dataclass
class Sample:
    i1: np.ndarray
    i2: np.ndarray
    gt_flow: FlowField | None = None
    gt_occ: np.ndarray | None = None
    gt_flow_backward: FlowField | None = None
    seed: int = 0


@dataclass(frozen=True)
class ShapesConfig:
    size: int = 64
    channels: int = 1
    min_shapes: int = 2
    max_shapes: int = 4
    max_displacement: float = 8.0
    background_displacement: float = 2.0
    background_mode: str = "noise"  # or "flat"
    noise_sigma: float = 0.0
    integer_displacements: bool = False

    def __post_init__(self):
        if self.max_displacement >= self.size / 4:
            raise ValueError(
                f"max_displacement {self.max_displacement} must stay below size/4 = {self.size / 4}")
        if self.background_mode not in ("noise", "flat"):
            raise ValueError(f"unknown background mode {self.background_mode!r}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


class _ValueNoise:
    """Continuous texture: bilinear interpolation of a random value grid."""

    def __init__(self, rng, channels, span, cell, lo, hi):
        n = int(np.ceil(span / cell)) + 3
        self.cell = cell
        self.grid = rng.uniform(lo, hi, size=(channels, n, n)).astype(np.float32)

    def sample(self, ys, xs):
        # domain is shifted so moderately negative coords stay on the grid
        gx = np.clip(xs / self.cell + 1.0, 0, self.grid.shape[2] - 1.001)
        gy = np.clip(ys / self.cell + 1.0, 0, self.grid.shape[1] - 1.001)
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        fx = (gx - x0).astype(np.float32)
        fy = (gy - y0).astype(np.float32)
        g = self.grid
        return ((1 - fx) * (1 - fy) * g[:, y0, x0] + fx * (1 - fy) * g[:, y0, x0 + 1]
                + (1 - fx) * fy * g[:, y0 + 1, x0] + fx * fy * g[:, y0 + 1, x0 + 1])


class _Flat:
    def __init__(self, channels, value):
        self.value = np.float32(value)
        self.channels = channels

    def sample(self, ys, xs):
        return np.broadcast_to(self.value, (self.channels,) + np.shape(ys)).copy()


@dataclass
class _Surface:
    kind: str  # "ellipse" or "box"
    center: tuple[float, float]
    extent: tuple[float, float]
    angle: float
    disp: tuple[float, float]
    texture: object

    def contains(self, xs, ys, frame2: bool) -> np.ndarray:
        dx, dy = self.disp if frame2 else (0.0, 0.0)
        rx = xs - dx - self.center[0]
        ry = ys - dy - self.center[1]
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        lx = rx * ca + ry * sa
        ly = -rx * sa + ry * ca
        if self.kind == "ellipse":
            return (lx / self.extent[0]) ** 2 + (ly / self.extent[1]) ** 2 <= 1.0
        return (np.abs(lx) <= self.extent[0]) & (np.abs(ly) <= self.extent[1])

    def paint(self, img, owner, order, xs, ys, frame2: bool):
        mask = self.contains(xs, ys, frame2)
        if not mask.any():
            return
        dx, dy = self.disp if frame2 else (0.0, 0.0)
        img[:, mask] = self.texture.sample(ys[mask] - dy, xs[mask] - dx)
        owner[mask] = order


def _draw_displacement(rng, bound, integer):
    d = rng.uniform(-bound, bound, size=2)
    return tuple(np.round(d) if integer else d)


def generate_sample(config: ShapesConfig, seed: int) -> Sample:
    """Deterministic scene for one seed, with exact flow and occlusion truth."""
    rng = np.random.default_rng(seed)
    size, chans = config.size, config.channels
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")

    if config.background_mode == "noise":
        bg_tex = _ValueNoise(rng, chans, span=1.5 * size, cell=size / 8.0, lo=0.1, hi=0.9)
    else:
        bg_tex = _Flat(chans, rng.uniform(0.3, 0.7))
    bg_disp = _draw_displacement(rng, config.background_displacement,
                                 config.integer_displacements)

    count = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    surfaces = []
    for _ in range(count):
        kind = "ellipse" if rng.uniform() < 0.5 else "box"
        center = tuple(rng.uniform(0.15 * size, 0.85 * size, size=2))
        extent = tuple(rng.uniform(size / 10.0, size / 5.0, size=2))
        angle = float(rng.uniform(0, np.pi))
        disp = _draw_displacement(rng, config.max_displacement, config.integer_displacements)
        lo = rng.uniform(0.0, 0.55)
        tex = _ValueNoise(rng, chans, span=1.5 * size, cell=size / 12.0, lo=lo, hi=lo + 0.45)
        surfaces.append(_Surface(kind, center, extent, angle, disp, tex))

    def render(frame2: bool):
        dx, dy = bg_disp if frame2 else (0.0, 0.0)
        img = bg_tex.sample(ys - dy, xs - dx).astype(np.float32)
        owner = np.full((size, size), -1, dtype=np.int64)
        for order, surf in enumerate(surfaces):
            surf.paint(img, owner, order, xs, ys, frame2)
        return img, owner

    i1, owner1 = render(frame2=False)
    i2, owner2 = render(frame2=True)

    disp_of = np.array([bg_disp] + [s.disp for s in surfaces])  # index owner+1
    fwd = disp_of[owner1 + 1]  # (H,W,2)
    bwd = -disp_of[owner2 + 1]
    gt_flow = FlowField(fwd[..., 0], fwd[..., 1])
    gt_flow_backward = FlowField(bwd[..., 0], bwd[..., 1])

    # frame-1 pixel is occluded unless its (continuous) target point is inside
    # the frame and still owned by the same surface in frame 2
    tx = xs + fwd[..., 0]
    ty = ys + fwd[..., 1]
    in_frame = (tx >= 0) & (tx <= size - 1) & (ty >= 0) & (ty <= size - 1)
    target_owner = np.full((size, size), -1, dtype=np.int64)
    for order, surf in enumerate(surfaces):
        target_owner[surf.contains(tx, ty, frame2=True)] = order
    gt_occ = (in_frame & (target_owner == owner1)).astype(np.float32)

    if config.noise_sigma > 0:
        i1 = np.clip(i1 + rng.normal(0, config.noise_sigma, i1.shape), 0, 1).astype(np.float32)
        i2 = np.clip(i2 + rng.normal(0, config.noise_sigma, i2.shape), 0, 1).astype(np.float32)

    return Sample(i1, i2, gt_flow, gt_occ, gt_flow_backward, seed)


# ---------------------------------------------------------------------------
# preprocessing and augmentation


def histogram_equalize(image):
    """Global per-channel histogram equalization over 256 bins.

    Input values are expected in [0,1]; a constant channel passes through
    unchanged.  Accepts a (C,H,W) array or Tensor and returns the same kind.
    """
    tensor_in = isinstance(image, Tensor)
    arr = np.asarray(image.data if tensor_in else image, dtype=np.float32)
    out = np.empty_like(arr)
    flat = out.reshape(arr.shape[0] if arr.ndim == 3 else 1, -1)
    src = arr.reshape(flat.shape)
    n = flat.shape[1]
    for c in range(flat.shape[0]):
        bins = np.clip((src[c] * 256).astype(np.int64), 0, 255)
        hist = np.bincount(bins, minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = int(cdf[np.nonzero(hist)[0][0]])
        if cdf_min == n:  # constant channel
            flat[c] = src[c]
            continue
        lut = (cdf - cdf_min) / (n - cdf_min)
        flat[c] = lut[bins].astype(np.float32)
    result = out.reshape(arr.shape)
    return Tensor(result) if tensor_in else result


def augment(sample: Sample, op: str) -> Sample:
    """hflip/vflip mirror frames and ground truth; swap exchanges the frames.

    Swapping drops the ground truth: the swapped pair's forward flow is not
    derivable from the original forward flow alone.
    """
    def flip(arr, axis):
        return None if arr is None else np.ascontiguousarray(np.flip(arr, axis=axis))

    if op == "hflip":
        flow = occ = back = None
        if sample.gt_flow is not None:
            flow = FlowField(-flip(sample.gt_flow.u, 1), flip(sample.gt_flow.v, 1))
        if sample.gt_flow_backward is not None:
            back = FlowField(-flip(sample.gt_flow_backward.u, 1), flip(sample.gt_flow_backward.v, 1))
        occ = flip(sample.gt_occ, 1)
        return Sample(flip(sample.i1, 2), flip(sample.i2, 2), flow, occ, back, sample.seed)
    if op == "vflip":
        flow = occ = back = None
        if sample.gt_flow is not None:
            flow = FlowField(flip(sample.gt_flow.u, 0), -flip(sample.gt_flow.v, 0))
        if sample.gt_flow_backward is not None:
            back = FlowField(flip(sample.gt_flow_backward.u, 0), -flip(sample.gt_flow_backward.v, 0))
        occ = flip(sample.gt_occ, 0)
        return Sample(flip(sample.i1, 1), flip(sample.i2, 1), flow, occ, back, sample.seed)
    if op == "swap":
        return Sample(sample.i2.copy(), sample.i1.copy(), None, None, None, sample.seed)
    raise ValueError(f"unknown augmentation {op!r}")


# ---------------------------------------------------------------------------
# file formats


def write_flo(flow: FlowField, path) -> None:
    if not (np.all(np.isfinite(flow.u)) and np.all(np.isfinite(flow.v))):
        raise ValueError("refusing to write non-finite flow")
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        np.stack([flow.u, flow.v], axis=-1).astype("<f4").tofile(f)


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated .flo file")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise ValueError(f"{path}: bad .flo magic {magic}")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0 or len(raw) - 12 != 8 * int(w) * int(h):
        raise ValueError(f"{path}: expected {8 * int(w) * int(h)} payload bytes for "
                         f"{w}x{h}, found {len(raw) - 12}")
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    uv = data.reshape(int(h), int(w), 2)
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy())


KITTI_OFFSET = 2 ** 15
KITTI_SCALE = 64.0


def write_kitti_png(flow: FlowField, valid_mask: np.ndarray | None, path) -> None:
    """16-bit 3-channel PNG: (u, v) as round(f*64 + 2^15), validity 0/1."""
    if np.max(np.abs(flow.u), initial=0) >= 512 or np.max(np.abs(flow.v), initial=0) >= 512:
        raise ValueError("flow magnitude out of the encodable range (|f| < 512)")
    if valid_mask is None:
        valid_mask = np.ones_like(flow.u)
    enc_u = np.round(flow.u.astype(np.float64) * KITTI_SCALE + KITTI_OFFSET).astype(np.uint16)
    enc_v = np.round(flow.v.astype(np.float64) * KITTI_SCALE + KITTI_OFFSET).astype(np.uint16)
    valid = (np.asarray(valid_mask) > 0).astype(np.uint16)
    rgb = np.stack([enc_u, enc_v, valid], axis=-1)
    if not cv2.imwrite(str(path), rgb[..., ::-1]):  # cv2 stores BGR
        raise IOError(f"failed to write {path}")


def read_kitti_png(path) -> tuple[FlowField, np.ndarray]:
    bgr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if bgr is None or bgr.ndim != 3 or bgr.dtype != np.uint16:
        raise ValueError(f"{path}: not a 16-bit 3-channel flow png")
    rgb = bgr[..., ::-1].astype(np.float64)
    u = (rgb[..., 0] - KITTI_OFFSET) / KITTI_SCALE
    v = (rgb[..., 1] - KITTI_OFFSET) / KITTI_SCALE
    valid = (rgb[..., 2] > 0).astype(np.float32)
    return FlowField(u, v), valid


# ---------------------------------------------------------------------------
# visualization


def _color_wheel() -> np.ndarray:
    """Middlebury 55-entry color wheel (RY/YG/GC/CB/BM/MR transitions)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_color(flow: FlowField, max_mag: float | None = None) -> np.ndarray:
    """RGB uint8 rendering: hue encodes direction, saturation magnitude.

    Zero flow maps to white; magnitudes are scaled by ``max_mag`` (default:
    the 99th percentile) and clipped at full saturation.
    """
    wheel = _color_wheel()
    ncols = wheel.shape[0]
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    rad = np.sqrt(u * u + v * v)
    if max_mag is None:
        max_mag = float(np.percentile(rad, 99))
    if max_mag <= 0:
        max_mag = 1.0
    rad = np.clip(rad / max_mag, 0.0, 1.0)
    angle = np.arctan2(-v, -u) / np.pi
    # span all ncols intervals (wrapping the last back to the first) so a
    # rotating field sweeps hue without a seam at the +-pi direction
    fk = (angle + 1) / 2 * ncols
    kf = np.floor(fk).astype(np.int64)
    f = fk - kf
    k0 = kf % ncols
    k1 = (kf + 1) % ncols
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        col0 = wheel[k0, ch] / 255.0
        col1 = wheel[k1, ch] / 255.0
        col = (1 - f) * col0 + f * col1
        col = 1.0 - rad * (1.0 - col)  # desaturate toward white at zero flow
        img[..., ch] = np.floor(255.0 * col)
    return img


# ---------------------------------------------------------------------------
# image and dataset files


def write_image_png(image: np.ndarray, path) -> None:
    """(C,H,W) float [0,1] -> 8-bit grayscale or RGB png."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        frame = arr[0]
    elif arr.shape[0] == 3:
        frame = arr.transpose(1, 2, 0)[..., ::-1]
    else:
        raise ValueError(f"can only write 1- or 3-channel images, got {arr.shape[0]}")
    if not cv2.imwrite(str(path), frame):
        raise IOError(f"failed to write {path}")


def read_image_png(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"{path}: unreadable image")
    if raw.ndim == 2:
        arr = raw[None]
    else:
        arr = raw[..., ::-1].transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0).copy()


def write_occlusion_png(occ: np.ndarray, path) -> None:
    arr = (np.asarray(occ) >= 0.5).astype(np.uint8) * 255
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"failed to write {path}")


def read_occlusion_png(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise ValueError(f"{path}: unreadable occlusion mask")
    return (raw >= 128).astype(np.float32)


@dataclass
class ManifestRecord:
    i1: str
    i2: str
    flow: str | None = None
    occ: str | None = None


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            fields = [r.i1, r.i2] + ([r.flow] if r.flow else []) + ([r.occ] if r.occ else [])
            f.write(" ".join(fields) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) < 2 or len(fields) > 4:
                raise ValueError(f"{path}:{line_no}: expected 2-4 fields, got {len(fields)}")
            records.append(ManifestRecord(*fields))
    return records
