"""Shared neural building blocks.

Backbone feature extraction for both models, directional corner pooling,
RoI alignment, axis down-sampling blocks, sequential slice propagation,
and the weight checkpoint format.

Tensors are (B, C, H, W) throughout; batch size 1 in the pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box

CHECKPOINT_FORMAT = 1


@dataclass
class FeatureMap:
    """Convolutional feature map plus its stride relative to the input image."""

    values: torch.Tensor  # (B, C, H, W)
    stride: int

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) tensor, got {tuple(self.values.shape)}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# corner pooling


_SCAN_FLIP_DIM = {"top": 2, "left": 3, "bottom": None, "right": None}
_SCAN_DIM = {"top": 2, "bottom": 2, "left": 3, "right": 3}


def directional_max(x: torch.Tensor, scan: str) -> torch.Tensor:
    """Directional running max.

    "top": each location becomes the max over itself and everything below
    in its column; "left": itself and everything to its right; "bottom"
    and "right" mirror those scans.
    """
    if scan not in _SCAN_DIM:
        raise ValueError(f"unknown scan {scan!r}")
    dim = _SCAN_DIM[scan]
    flip = scan in ("top", "left")
    if flip:
        x = x.flip(dim)
    out = torch.cummax(x, dim=dim).values
    if flip:
        out = out.flip(dim)
    return out


def corner_pool(x: torch.Tensor, kind: str) -> torch.Tensor:
    """Sum of the two directional scans for a corner kind.

    "top_left" adds the top and left scans so corner evidence can flow
    from the object interior to its top-left corner; "bottom_right"
    mirrors both scans.
    """
    if kind == "top_left":
        return directional_max(x, "top") + directional_max(x, "left")
    if kind == "bottom_right":
        return directional_max(x, "bottom") + directional_max(x, "right")
    raise ValueError(f"unknown corner kind {kind!r}")


# ---------------------------------------------------------------------------
# RoI align


def roi_align(
    values: torch.Tensor,
    boxes: Iterable[Box],
    stride: float,
    out_size: int = 7,
    samples: int = 2,
) -> torch.Tensor:
    """Average-pooled bilinear sampling of box regions -> (N, C, out, out).

    Boxes are in image pixels and divided by the feature stride without
    rounding. Each output bin averages samples x samples bilinear lookups
    at evenly spaced in-bin points. Feature values live at integer
    coordinates; sampling clamps to the border.
    """
    if values.dim() == 4:
        if values.shape[0] != 1:
            raise ValueError("roi_align expects a single feature map")
        values = values[0]
    c, h, w = values.shape
    box_list = list(boxes)
    if not box_list:
        return values.new_zeros((0, c, out_size, out_size))
    for b in box_list:
        bx, by, bx2, by2 = (v / stride for v in b.as_xyxy())
        if bx2 <= 0 or by2 <= 0 or bx >= w or by >= h:
            raise ValueError(f"box {b} lies entirely outside the feature extent")

    dtype = values.dtype
    arr = np.array([b.as_xyxy() for b in box_list], dtype=np.float64) / stride
    n = len(box_list)
    # sample point grid: per bin, fractions (k + 0.5)/samples for k < samples
    frac = (np.arange(samples) + 0.5) / samples
    xs = np.zeros((n, out_size * samples))
    ys = np.zeros((n, out_size * samples))
    for i, (x1, y1, x2, y2) in enumerate(arr):
        bw = (x2 - x1) / out_size
        bh = (y2 - y1) / out_size
        xs[i] = (x1 + (np.repeat(np.arange(out_size), samples) + np.tile(frac, out_size)) * bw)
        ys[i] = (y1 + (np.repeat(np.arange(out_size), samples) + np.tile(frac, out_size)) * bh)

    xg = torch.as_tensor(np.clip(xs, 0, w - 1), dtype=dtype, device=values.device)
    yg = torch.as_tensor(np.clip(ys, 0, h - 1), dtype=dtype, device=values.device)
    x0 = xg.floor().long().clamp(0, w - 1)
    y0 = yg.floor().long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (xg - x0.to(dtype)).clamp(0, 1)
    fy = (yg - y0.to(dtype)).clamp(0, 1)

    flat = values.reshape(c, -1)  # (C, H*W)

    def gather(yi, xi):
        # yi, xi: (N, S) -> (N, C, S, S) after outer combination below
        idx = (yi[:, :, None] * w + xi[:, None, :]).reshape(n, -1)  # (N, Sy*Sx)
        out = flat[:, idx.reshape(-1)].reshape(c, n, yi.shape[1], xi.shape[1])
        return out.permute(1, 0, 2, 3)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    wy = fy[:, None, :, None]
    wx = fx[:, None, None, :]
    sample_vals = (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )  # (N, C, out*samples, out*samples)
    binned = sample_vals.reshape(n, c, out_size, samples, out_size, samples)
    return binned.mean(dim=(3, 5))


# ---------------------------------------------------------------------------
# down-sampling and slice propagation


class DownsampleBlock(nn.Module):
    """Halve one spatial axis: 1x2 (or 2x1) max pool, 3x3 conv + norm, ReLU.

    Batch norm keeps the activation scale stable through the stacked
    blocks regardless of the head weight init.
    """

    def __init__(self, channels: int, axis: str, track_stats: bool = True):
        super().__init__()
        if axis not in ("width", "height"):
            raise ValueError(f"axis must be 'width' or 'height', got {axis!r}")
        self.axis = axis
        self.pool = nn.MaxPool2d((1, 2) if axis == "width" else (2, 1))
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(channels, track_running_stats=track_stats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.axis == "width" and x.shape[3] % 2 == 1:
            x = F.pad(x, (0, 1, 0, 0), mode="replicate")
        if self.axis == "height" and x.shape[2] % 2 == 1:
            x = F.pad(x, (0, 0, 0, 1), mode="replicate")
        return F.relu(self.norm(self.conv(self.pool(x))))


class SlicePropagation(nn.Module):
    """Sequential message passing across feature-map slices.

    Slices perpendicular to the travel direction are updated in order:
    the first slice is kept, then slice_{k+1} += ReLU(conv(slice_k'))
    with one shared kernel. The kernel spans kernel_width positions along
    the slice and 1 along the travel axis, so shape is preserved.
    """

    def __init__(self, channels: int, direction: str, kernel_width: int = 9):
        super().__init__()
        if direction not in ("right", "left", "down", "up"):
            raise ValueError(f"unknown direction {direction!r}")
        if kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd")
        self.direction = direction
        self.kernel_width = kernel_width
        if direction in ("right", "left"):  # slices are columns
            kshape, pad = (kernel_width, 1), (kernel_width // 2, 0)
        else:  # slices are rows
            kshape, pad = (1, kernel_width), (0, kernel_width // 2)
        self.conv = nn.Conv2d(channels, channels, kshape, padding=pad)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dim = 3 if self.direction in ("right", "left") else 2
        n = x.shape[dim]
        if n == 1:
            return x
        indices = range(n) if self.direction in ("right", "down") else range(n - 1, -1, -1)
        slices = list(torch.unbind(x, dim=dim))
        out: list[torch.Tensor | None] = [None] * n
        prev = None
        for k in indices:
            cur = slices[k].unsqueeze(dim)
            if prev is not None:
                cur = cur + F.relu(self.conv(prev))
            out[k] = cur
            prev = cur
        return torch.cat(out, dim=dim)


def scnn_propagate(x: torch.Tensor, module: SlicePropagation) -> torch.Tensor:
    return module(x)


# ---------------------------------------------------------------------------
# backbones


def conv_bn_relu(
    cin: int, cout: int, k: int = 3, stride: int = 1, dilation: int = 1,
    track_stats: bool = True,
) -> nn.Sequential:
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout, track_running_stats=track_stats),
        nn.ReLU(),
    )


class BasicBlock(nn.Module):
    """Two 3x3 conv residual block with optional stride or dilation."""

    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1,
                 track_stats: bool = True):
        super().__init__()
        pad = dilation
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=pad, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout, track_running_stats=track_stats)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=pad, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, track_running_stats=track_stats)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout, track_running_stats=track_stats),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class ResNet18Trunk(nn.Module):
    """18-layer residual trunk exposing the per-stage maps C2..C5.

    With dilate_last=True the final stage trades its stride for dilation
    rate 2, so C5 comes out at stride 16 instead of 32.
    """

    def __init__(self, dilate_last: bool = False, track_stats: bool = True):
        super().__init__()
        ts = track_stats
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64, track_running_stats=ts),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = nn.Sequential(BasicBlock(64, 64, track_stats=ts),
                                    BasicBlock(64, 64, track_stats=ts))
        self.layer2 = nn.Sequential(BasicBlock(64, 128, stride=2, track_stats=ts),
                                    BasicBlock(128, 128, track_stats=ts))
        self.layer3 = nn.Sequential(BasicBlock(128, 256, stride=2, track_stats=ts),
                                    BasicBlock(256, 256, track_stats=ts))
        if dilate_last:
            self.layer4 = nn.Sequential(
                BasicBlock(256, 512, stride=1, dilation=2, track_stats=ts),
                BasicBlock(512, 512, dilation=2, track_stats=ts),
            )
            self.c5_stride = 16
        else:
            self.layer4 = nn.Sequential(BasicBlock(256, 512, stride=2, track_stats=ts),
                                        BasicBlock(512, 512, track_stats=ts))
            self.c5_stride = 32

    def forward(self, x):
        x = self.stem(x)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c2, c3, c4, c5


class TinyTrunk(nn.Module):
    """Small 5-stage CNN with the same stride/channel interface as the
    residual trunk; used for fast desk-scale training runs."""

    CHANNELS = (16, 24, 32, 48, 64)

    def __init__(self, dilate_last: bool = False, track_stats: bool = True):
        super().__init__()
        ch = self.CHANNELS
        ts = track_stats
        self.stage1 = conv_bn_relu(3, ch[0], stride=2, track_stats=ts)
        self.stage2 = nn.Sequential(conv_bn_relu(ch[0], ch[1], stride=2, track_stats=ts),
                                    conv_bn_relu(ch[1], ch[1], track_stats=ts))
        self.stage3 = nn.Sequential(conv_bn_relu(ch[1], ch[2], stride=2, track_stats=ts),
                                    conv_bn_relu(ch[2], ch[2], track_stats=ts))
        self.stage4 = nn.Sequential(conv_bn_relu(ch[2], ch[3], stride=2, track_stats=ts),
                                    conv_bn_relu(ch[3], ch[3], track_stats=ts))
        if dilate_last:
            self.stage5 = nn.Sequential(
                conv_bn_relu(ch[3], ch[4], stride=1, dilation=2, track_stats=ts),
                conv_bn_relu(ch[4], ch[4], dilation=2, track_stats=ts),
            )
            self.c5_stride = 16
        else:
            self.stage5 = nn.Sequential(conv_bn_relu(ch[3], ch[4], stride=2, track_stats=ts),
                                        conv_bn_relu(ch[4], ch[4], track_stats=ts))
            self.c5_stride = 32

    def forward(self, x):
        x = self.stage1(x)
        c2 = self.stage2(x)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c2, c3, c4, c5


def _trunk_channels(variant: str) -> tuple[int, int, int, int]:
    if variant == "resnet18":
        return (64, 128, 256, 512)
    if variant == "tiny":
        ch = TinyTrunk.CHANNELS
        return (ch[1], ch[2], ch[3], ch[4])
    raise ValueError(f"unknown backbone variant {variant!r}")


def _make_trunk(variant: str, dilate_last: bool, track_stats: bool = True) -> nn.Module:
    if variant == "resnet18":
        return ResNet18Trunk(dilate_last=dilate_last, track_stats=track_stats)
    if variant == "tiny":
        return TinyTrunk(dilate_last=dilate_last, track_stats=track_stats)
    raise ValueError(f"unknown backbone variant {variant!r}")


class DetectorBackbone(nn.Module):
    """Stride-16 single-level feature extractor for the table detector.

    Residual trunk with the last stage dilated instead of strided,
    followed by a 1x1 reduction to 64 channels.
    """

    OUT_CHANNELS = 64
    STRIDE = 16

    def __init__(self, variant: str = "resnet18"):
        super().__init__()
        self.variant = variant
        self.trunk = _make_trunk(variant, dilate_last=True)
        c5 = _trunk_channels(variant)[3]
        self.reduce = nn.Conv2d(c5, self.OUT_CHANNELS, 1)

    def forward(self, images: torch.Tensor) -> FeatureMap:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected (B, 3, H, W) input")
        if min(images.shape[2], images.shape[3]) < 32:
            raise ValueError(f"image sides must be >= 32, got {tuple(images.shape[2:])}")
        _, _, _, c5 = self.trunk(images)
        return FeatureMap(self.reduce(c5), stride=self.STRIDE)


class TSRBackbone(nn.Module):
    """Feature-pyramid fusion over the residual trunk; exposes the
    stride-4 level only, at 64 channels.

    Normalization uses batch statistics at inference too
    (track_running_stats=False): the recognizer trains on single images,
    where accumulated running stats drift from what training optimizes
    and visibly degrade mask thresholds at evaluation time.
    """

    OUT_CHANNELS = 64
    STRIDE = 4

    def __init__(self, variant: str = "resnet18"):
        super().__init__()
        self.variant = variant
        self.trunk = _make_trunk(variant, dilate_last=False, track_stats=False)
        chans = _trunk_channels(variant)
        c = self.OUT_CHANNELS
        self.lateral = nn.ModuleList([nn.Conv2d(ci, c, 1) for ci in chans])
        self.out_conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, images: torch.Tensor) -> FeatureMap:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected (B, 3, H, W) input")
        if min(images.shape[2], images.shape[3]) < 32:
            raise ValueError(f"image sides must be >= 32, got {tuple(images.shape[2:])}")
        c2, c3, c4, c5 = self.trunk(images)
        p5 = self.lateral[3](c5)
        p4 = self.lateral[2](c4) + F.interpolate(p5, size=c4.shape[2:], mode="nearest")
        p3 = self.lateral[1](c3) + F.interpolate(p4, size=c3.shape[2:], mode="nearest")
        p2 = self.lateral[0](c2) + F.interpolate(p3, size=c2.shape[2:], mode="nearest")
        return FeatureMap(self.out_conv(p2), stride=self.STRIDE)


def init_head_weights(module: nn.Module, std: float = 0.01) -> None:
    """Gaussian(0, std) init for conv/linear weights of newly added heads."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, mean=0.0, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, module: nn.Module, header: dict) -> None:
    """Single-archive checkpoint: config header plus named weight tensors."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "header": dict(header),
        "state": module.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    return payload["header"], payload["state"]
