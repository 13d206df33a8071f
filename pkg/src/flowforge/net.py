"""Scaled-down FlowNetS-style encoder-decoder for bidirectional flow.

Each decoder stage refines the upsampled coarser flow with a residual, and on
top of the usual skip features it sees the frame-1 image at that scale, frame
2 warped by the coarser flow, and their absolute error map.  Both flow
directions run the same parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import flowforge.tensor as ft
import flowforge.warp as fw
from flowforge.tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    num_scales: int = 4
    base_channels: int = 16
    input_channels: int = 1
    leaky_slope: float = 0.1
    enlarged_radius: int = 4

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError(f"num_scales must be >= 2, got {self.num_scales}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        # checkpoints store config as f32; normalize so round trips compare equal
        object.__setattr__(self, "leaky_slope", float(np.float32(self.leaky_slope)))

    def encoder_channels(self) -> list[int]:
        """Feature width at scales 1..num_scales (e.g. 16, 32, 64, 96)."""
        def factor(i):
            return 2 ** i if i < 3 else 2 * i
        return [self.base_channels * factor(i) for i in range(self.num_scales)]


@dataclass
class NetworkParams:
    config: NetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def clone(self) -> "NetworkParams":
        return NetworkParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        })


def param_shapes(config: NetConfig, include_warp_inputs: bool = True) -> dict[str, tuple]:
    """Shape of every learnable tensor, in deterministic construction order.

    ``include_warp_inputs=False`` drops the warped-image/error-map channels
    from the decoder stage convolutions (the unmodified decoder), used to
    bound the parameter overhead of the modification.
    """
    s_max = config.num_scales
    ch = config.encoder_channels()  # index s-1 -> width at scale s
    c_img = config.input_channels
    shapes: dict[str, tuple] = {}

    in_ch = 2 * c_img
    for s in range(1, s_max + 1):
        shapes[f"enc{s}.weight"] = (ch[s - 1], in_ch, 3, 3)
        shapes[f"enc{s}.bias"] = (ch[s - 1],)
        in_ch = ch[s - 1]

    shapes[f"flow{s_max}.weight"] = (2, ch[s_max - 1], 3, 3)
    shapes[f"flow{s_max}.bias"] = (2,)

    prev_feat = ch[s_max - 1]
    for s in range(s_max - 1, 0, -1):
        up_ch = max(ch[s - 1] // 2, 8)
        shapes[f"up{s}.weight"] = (prev_feat, up_ch, 4, 4)  # conv-transpose layout
        shapes[f"up{s}.bias"] = (up_ch,)
        dec_in = up_ch + ch[s - 1] + 2
        if include_warp_inputs:
            dec_in += 3 * c_img
        shapes[f"dec{s}.weight"] = (ch[s - 1], dec_in, 3, 3)
        shapes[f"dec{s}.bias"] = (ch[s - 1],)
        shapes[f"flow{s}.weight"] = (2, ch[s - 1], 3, 3)
        shapes[f"flow{s}.bias"] = (2,)
        prev_feat = ch[s - 1]
    return shapes


def param_count(config: NetConfig, include_warp_inputs: bool = True) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config, include_warp_inputs).values())


def init_params(config: NetConfig, seed: int) -> NetworkParams:
    """Fan-in-scaled uniform weights; biases and flow heads start at zero,
    so the first forward pass predicts exactly zero flow everywhere."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("flow") or name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            if name.startswith("up"):
                fan_in = shape[0] * shape[2] * shape[3]  # transpose conv reduces over dim 0
            else:
                fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    return NetworkParams(config, tensors)


def _avg_pool_np(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def image_pyramid(image: np.ndarray, num_scales: int) -> list[np.ndarray]:
    """Downsampled copies at scales 1..num_scales (half resolution each step)."""
    out = []
    cur = np.asarray(image)
    for _ in range(num_scales):
        cur = _avg_pool_np(cur)
        out.append(cur)
    return out


def _conv_block(params: NetworkParams, name: str, x: Tensor, stride: int) -> Tensor:
    t = params.tensors
    y = ft.conv2d(x, t[f"{name}.weight"], stride=stride, pad=1)
    y = ft.add_channel_bias(y, t[f"{name}.bias"])
    return ft.leaky_relu(y, params.config.leaky_slope)


def forward_flow(params: NetworkParams, i1: Tensor, i2: Tensor) -> list[Tensor]:
    """Flow pyramid from coarsest (1/2^num_scales) to finest (1/2) resolution.

    Inputs are preprocessed image batches (N,C,H,W) with H and W divisible by
    2^num_scales.  Flow values at each scale are in that scale's pixel units.
    """
    cfg = params.config
    if i1.ndim != 4 or i2.ndim != 4:
        raise ValueError("forward_flow expects batched NCHW images")
    if i1.shape != i2.shape:
        raise ValueError(f"image shapes differ: {i1.shape} vs {i2.shape}")
    n, c, h, w = i1.shape
    if c != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} channels, got {c}")
    div = 2 ** cfg.num_scales
    if h % div or w % div:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {div}")

    t = params.tensors
    s_max = cfg.num_scales
    pyr1 = image_pyramid(i1.data, s_max)
    pyr2 = image_pyramid(i2.data, s_max)

    feats = {}
    x = ft.concat([i1, i2], axis=1)
    for s in range(1, s_max + 1):
        x = _conv_block(params, f"enc{s}", x, stride=2)
        feats[s] = x

    flow = ft.add_channel_bias(ft.conv2d(feats[s_max], t[f"flow{s_max}.weight"], 1, 1),
                               t[f"flow{s_max}.bias"])
    flows = [flow]
    feat = feats[s_max]
    for s in range(s_max - 1, 0, -1):
        up_feat = ft.conv_transpose2d(feat, t[f"up{s}.weight"], stride=2, pad=1)
        up_feat = ft.leaky_relu(ft.add_channel_bias(up_feat, t[f"up{s}.bias"]), cfg.leaky_slope)
        up_flow = ft.mul(ft.resample2x(flow, "up_bilinear"), 2.0)
        im1 = Tensor(pyr1[s - 1], dtype=i1.data.dtype)
        im2 = Tensor(pyr2[s - 1], dtype=i1.data.dtype)
        warped = fw.backward_warp(im2, up_flow)
        err = ft.absolute(ft.sub(warped, im1))
        x = ft.concat([up_feat, feats[s], up_flow, im1, warped, err], axis=1)
        feat = _conv_block(params, f"dec{s}", x, stride=1)
        residual = ft.add_channel_bias(ft.conv2d(feat, t[f"flow{s}.weight"], 1, 1),
                                       t[f"flow{s}.bias"])
        flow = ft.add(up_flow, residual)
        flows.append(flow)
    return flows


def bidirectional_flow(params: NetworkParams, i1: Tensor, i2: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Forward and backward flow pyramids from one shared parameter set."""
    return forward_flow(params, i1, i2), forward_flow(params, i2, i1)


def full_resolution_flow(finest: Tensor) -> Tensor:
    """Upsample the finest (half-resolution) flow to full resolution."""
    return ft.mul(ft.resample2x(finest, "up_bilinear"), 2.0)


# checkpoint helpers: parameters plus enough config to rebuild the network

_CONFIG_KEYS = ("num_scales", "base_channels", "input_channels", "leaky_slope", "enlarged_radius")


def save_params(path, params: NetworkParams, extra: dict[str, np.ndarray] | None = None) -> None:
    record: dict[str, np.ndarray] = {}
    for key in _CONFIG_KEYS:
        record[f"config/{key}"] = np.float32(getattr(params.config, key)).reshape(())
    for name, tensor in params.tensors.items():
        record[f"param/{name}"] = tensor.data
    if extra:
        for name, arr in extra.items():
            record[name] = arr
    ft.save_checkpoint(path, record)


def load_params(path, config: NetConfig | None = None) -> tuple[NetworkParams, dict[str, np.ndarray]]:
    """Restore parameters; returns them plus any non-parameter extras.

    Raises with the offending tensor name when the checkpoint does not match
    the (given or stored) configuration.
    """
    record = ft.load_checkpoint(path)
    stored = {}
    for key in _CONFIG_KEYS:
        name = f"config/{key}"
        if name not in record:
            raise ValueError(f"{path}: missing checkpoint entry {name}")
        stored[key] = record.pop(name).item()
    loaded_cfg = NetConfig(
        num_scales=int(stored["num_scales"]),
        base_channels=int(stored["base_channels"]),
        input_channels=int(stored["input_channels"]),
        leaky_slope=float(stored["leaky_slope"]),
        enlarged_radius=int(stored["enlarged_radius"]),
    )
    if config is not None and config != loaded_cfg:
        raise ValueError(f"checkpoint config {loaded_cfg} does not match requested {config}")

    tensors: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    expected = param_shapes(loaded_cfg)
    for name, arr in record.items():
        if name.startswith("param/"):
            pname = name[len("param/"):]
            if pname not in expected:
                raise ValueError(f"{path}: unexpected parameter {pname}")
            if arr.shape != expected[pname]:
                raise ValueError(
                    f"{path}: parameter {pname} has shape {arr.shape}, expected {expected[pname]}")
            tensors[pname] = Tensor(arr, requires_grad=True)
        else:
            extra[name] = arr
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing parameter {sorted(missing)[0]}")
    return NetworkParams(loaded_cfg, tensors), extra
