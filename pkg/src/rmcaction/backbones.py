"""Residual video backbones: pure-2D, pure-3D, and the mixed variant
whose shallow stages convolve per frame while the final stage convolves
across frames.

All three kinds share one spatial schedule (stem /2, pool /2, then /2 at
each of the last three stages), so the fourth stage sits at stride 16
and the fifth at stride 32. Temporal extents follow the kind: the 3D
backbone halves time at stages three through five; the mixed backbone
keeps time untouched through its 2D stages and then divides it by 8
inside the final 3D stage (temporal stride 2 in each of its blocks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .nn import BatchNorm, Conv2d, Conv3d, Linear, Module
from .tensor import Tensor

KINDS = ("r2d", "r3d", "rmc")
DEPTHS = (34, 50)
STAGE_NAMES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")
BASE_INNER = (64, 128, 256, 512)
REPEATS = {34: (3, 4, 6, 3), 50: (3, 4, 6, 3)}
BLOCK_KIND = {34: "basic", 50: "bottleneck"}
STEM_WIDTH = 64


def scale_width(width: int, multiplier: float) -> int:
    """Scale a channel count, rounding up to a multiple of 4."""
    return max(4, int(math.ceil(width * multiplier / 4.0)) * 4)


def final_stage_temporal_strides(repeats: int) -> Tuple[int, ...]:
    """Per-block temporal strides of the mixed backbone's 3D stage.

    The stage divides time by 8 internally. Front-loading the stride
    (4, 2, 1, ...) runs the costly 3x3x3 kernels at the lowest temporal
    resolution, which is what keeps the mixed backbone's total
    multiply-accumulate count below the pure-3D one.
    """
    strides = [4, 2] + [1] * (repeats - 2)
    return tuple(strides[:repeats])


@dataclass(frozen=True)
class StageSpec:
    """One stage of the schedule table.

    ``temporal_strides`` lists the per-block temporal stride (3D stages
    only); its product is the stage's total temporal downsampling. The
    spatial stride applies to the first block.
    """

    dim: str                    # "2d" | "3d"
    block: str                  # "basic" | "bottleneck"
    inner_width: int
    out_width: int
    repeats: int
    spatial_stride: int         # stride of the stage's first block
    temporal_strides: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.block == "basic" and self.out_width != self.inner_width:
            raise ValueError("basic blocks keep out_width == inner_width")
        if self.block == "bottleneck" and self.out_width != 4 * self.inner_width:
            raise ValueError("bottleneck blocks expand out_width to 4 x inner_width")
        if self.temporal_strides and len(self.temporal_strides) != self.repeats:
            raise ValueError("temporal_strides must list one stride per block")

    @property
    def temporal_stride(self) -> int:
        """First-block temporal stride (1 for 2D stages)."""
        return self.temporal_strides[0] if self.temporal_strides else 1

    def block_temporal_stride(self, i: int) -> int:
        return self.temporal_strides[i] if self.temporal_strides else 1


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "rmc"
    depth: int = 50
    width_multiplier: float = 1.0
    input_size: int = 112
    clip_len: int = 8
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported backbone kind {self.kind!r} (choose from {KINDS})")
        if self.depth not in DEPTHS:
            raise ValueError(f"unsupported depth {self.depth} (choose from {DEPTHS})")

    @property
    def stem_width(self) -> int:
        return scale_width(STEM_WIDTH, self.width_multiplier)

    def stage_specs(self) -> List[StageSpec]:
        block = BLOCK_KIND[self.depth]
        expansion = 1 if block == "basic" else 4
        specs = []
        for i, (base, reps) in enumerate(zip(BASE_INNER, REPEATS[self.depth])):
            inner = scale_width(base, self.width_multiplier)
            sstride = 1 if i == 0 else 2
            if self.kind == "r2d":
                dim, tstrides = "2d", ()
            elif self.kind == "r3d":
                dim = "3d"
                tstrides = (1,) * reps if i == 0 else (2,) + (1,) * (reps - 1)
            else:  # mixed: 2d until the last stage, then 3d dividing time by 8
                if i < 3:
                    dim, tstrides = "2d", ()
                else:
                    dim, tstrides = "3d", final_stage_temporal_strides(reps)
            specs.append(StageSpec(dim, block, inner, inner * expansion, reps,
                                   sstride, tstrides))
        return specs

    @property
    def conv4_width(self) -> int:
        return self.stage_specs()[2].out_width

    @property
    def conv5_width(self) -> int:
        return self.stage_specs()[3].out_width


class ResidualBlock(Module):
    """relu(F(x) + shortcut(x)) with a 2D or 3D residual branch.

    The shortcut is the identity when input and output agree in shape,
    otherwise a stride-matched 1x1 (or 1x1x1) projection with batchnorm.
    """

    def __init__(self, dim: str, block: str, c_in: int, inner: int, c_out: int,
                 spatial_stride: int, temporal_stride: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.dim = dim
        self.block = block
        if dim == "2d":
            conv, k3, k1 = Conv2d, 3, 1
            stride = spatial_stride
            one = 1
        else:
            conv, k3, k1 = Conv3d, (3, 3, 3), (1, 1, 1)
            stride = (temporal_stride, spatial_stride, spatial_stride)
            one = (1, 1, 1)
        pad3 = 1 if dim == "2d" else (1, 1, 1)

        if block == "basic":
            self.conv1 = conv(c_in, inner, k3, stride=stride, padding=pad3, bias=False, rng=rng)
            self.bn1 = BatchNorm(inner)
            self.conv2 = conv(inner, c_out, k3, stride=one, padding=pad3, bias=False, rng=rng)
            self.bn2 = BatchNorm(c_out)
            self.conv3 = None
        else:
            self.conv1 = conv(c_in, inner, k1, stride=one, bias=False, rng=rng)
            self.bn1 = BatchNorm(inner)
            self.conv2 = conv(inner, inner, k3, stride=stride, padding=pad3, bias=False, rng=rng)
            self.bn2 = BatchNorm(inner)
            self.conv3 = conv(inner, c_out, k1, stride=one, bias=False, rng=rng)
            self.bn3 = BatchNorm(c_out)

        strided = spatial_stride != 1 or temporal_stride != 1
        if c_in != c_out or strided:
            self.proj = conv(c_in, c_out, k1, stride=stride, bias=False, rng=rng)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        if self.proj is not None:
            identity = self.proj_bn(self.proj(x))
        else:
            identity = x
            if x.shape[1] != (self.bn2 if self.conv3 is None else self.bn3).gamma.shape[0]:
                raise ValueError(
                    f"residual block: identity shortcut requested but input has "
                    f"{x.shape[1]} channels and the branch emits a different width")
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        if self.conv3 is not None:
            out = out.relu()
            out = self.bn3(self.conv3(out))
        return (out + identity).relu()


class Stage(Module):
    def __init__(self, spec: StageSpec, c_in: int, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        blocks = []
        for i in range(spec.repeats):
            first = i == 0
            blocks.append(ResidualBlock(
                spec.dim, spec.block,
                c_in if first else spec.out_width,
                spec.inner_width, spec.out_width,
                spec.spatial_stride if first else 1,
                spec.block_temporal_stride(i), rng=rng))
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Stem2d(Module):
    """Per-frame 7x7/2 convolution plus 3x3/2 max pooling."""

    def __init__(self, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(3, c_out, 7, stride=2, padding=3, bias=False, rng=rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x)).relu()
        return F.maxpool2d(x, 3, 2, 1)


class Stem3d(Module):
    """3x7x7 convolution with stride 1x2x2, then a spatial-only pool."""

    def __init__(self, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv3d(3, c_out, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3),
                           bias=False, rng=rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x)).relu()
        return F.maxpool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))


@dataclass
class FeatureTaps:
    """Intermediate outputs of a backbone forward pass.

    ``conv4_out`` is a per-frame 2D map (folded [N*L, C, h, w]) for the
    2D-stage kinds and a spatiotemporal map for the pure-3D kind.
    ``logits`` is present only when the backbone carries a classifier.
    """

    conv4_out: Tensor
    conv5_out: Tensor
    logits: Optional[Tensor] = None
    stage_shapes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        specs = cfg.stage_specs()
        if cfg.kind == "r3d":
            self.stem = Stem3d(cfg.stem_width, rng)
        else:
            self.stem = Stem2d(cfg.stem_width, rng)
        c_in = cfg.stem_width
        self.conv2_x = Stage(specs[0], c_in, rng)
        self.conv3_x = Stage(specs[1], specs[0].out_width, rng)
        self.conv4_x = Stage(specs[2], specs[1].out_width, rng)
        self.conv5_x = Stage(specs[3], specs[2].out_width, rng)
        if cfg.num_classes is not None:
            self.fc = Linear(specs[3].out_width, cfg.num_classes, rng=rng)
        else:
            self.fc = None

    def _validate_input(self, clip: Tensor) -> None:
        cfg = self.cfg
        if clip.ndim != 5 or clip.shape[1] != 3:
            raise ValueError(f"backbone expects [N, 3, L, S, S] clips, got {clip.shape}")
        _, _, l, h, w = clip.shape
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 16")
        if cfg.kind in ("r3d", "rmc") and l % 8:
            raise ValueError(f"clip length {l} must be divisible by 8 for a 3D final stage")

    def forward(self, clip: Tensor) -> FeatureTaps:
        self._validate_input(clip)
        n, _, l, s, _ = clip.shape
        shapes: Dict[str, Tuple[int, ...]] = {}
        kind = self.cfg.kind

        if kind == "r3d":
            x = self.stem(clip)
            shapes["stem"] = x.shape
            x = self.conv2_x(x); shapes["conv2_x"] = x.shape
            x = self.conv3_x(x); shapes["conv3_x"] = x.shape
            conv4 = self.conv4_x(x); shapes["conv4_x"] = conv4.shape
            conv5 = self.conv5_x(conv4); shapes["conv5_x"] = conv5.shape
            pooled_src = conv5
        else:
            frames = clip.moveaxis(2, 1).reshape((n * l, 3, s, s))
            x = self.stem(frames)
            shapes["stem"] = x.shape
            x = self.conv2_x(x); shapes["conv2_x"] = x.shape
            x = self.conv3_x(x); shapes["conv3_x"] = x.shape
            conv4 = self.conv4_x(x); shapes["conv4_x"] = conv4.shape
            if kind == "rmc":
                _, c4, h4, w4 = conv4.shape
                volume = conv4.reshape((n, l, c4, h4, w4)).moveaxis(1, 2)
                conv5 = self.conv5_x(volume)
                pooled_src = conv5
            else:
                conv5 = self.conv5_x(conv4)
                _, c5, h5, w5 = conv5.shape
                pooled_src = conv5.reshape((n, l, c5, h5, w5)).moveaxis(1, 2)
            shapes["conv5_x"] = conv5.shape

        logits = None
        if self.fc is not None:
            logits = self.fc(F.global_spatiotemporal_avgpool(pooled_src))
            shapes["fc"] = logits.shape
        return FeatureTaps(conv4, conv5, logits, shapes)

    def classify(self, clip: Tensor) -> Tensor:
        if self.fc is None:
            raise ValueError("backbone was built without a classifier head")
        return self.forward(clip).logits


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(cfg, seed)


def classify_clip(model: Backbone, clip: Tensor) -> Tensor:
    return model.classify(clip)


# ----------------------------------------------------------------------
# analytic accounting


def _conv_macs(positions: int, c_in: int, kvol: int, c_out: int) -> int:
    return positions * c_in * kvol * c_out


def flop_count(cfg: BackboneConfig) -> int:
    """Multiply-accumulate count of one clip's forward pass (batch 1).

    Counts convolution and linear MACs only; pooling, batchnorm, and
    additions are ignored, mirroring the usual convention.
    """
    s = cfg.input_size
    l = cfg.clip_len
    macs = 0
    h = s // 2
    if cfg.kind == "r3d":
        macs += _conv_macs(l * h * h, 3, 3 * 49, cfg.stem_width)
    else:
        macs += _conv_macs(l * h * h, 3, 49, cfg.stem_width)
    h //= 2  # stem pool

    c_in = cfg.stem_width
    t = l
    for spec in cfg.stage_specs():
        kvol3 = 27 if spec.dim == "3d" else 9
        for i in range(spec.repeats):
            first = i == 0
            sstride = spec.spatial_stride if first else 1
            tstride = spec.block_temporal_stride(i)
            h_out = h // sstride
            t_out = t // tstride
            blk_in = c_in if first else spec.out_width
            pos_in = t * h * h        # frame count times spatial cells
            pos_out = t_out * h_out * h_out
            if spec.block == "basic":
                macs += _conv_macs(pos_out, blk_in, kvol3, spec.inner_width)
                macs += _conv_macs(pos_out, spec.inner_width, kvol3, spec.out_width)
            else:
                macs += _conv_macs(pos_in, blk_in, 1, spec.inner_width)
                macs += _conv_macs(pos_out, spec.inner_width, kvol3, spec.inner_width)
                macs += _conv_macs(pos_out, spec.inner_width, 1, spec.out_width)
            if blk_in != spec.out_width or sstride != 1 or tstride != 1:
                macs += _conv_macs(pos_out, blk_in, 1, spec.out_width)
            h, t = h_out, t_out
        c_in = spec.out_width

    if cfg.num_classes is not None:
        macs += c_in * cfg.num_classes
    return macs


def model_summary(model: Backbone, batch: int = 1) -> str:
    """One line per stage: output shape and parameter count."""
    from .tensor import no_grad

    cfg = model.cfg
    was_training = model.training
    model.eval()
    clip = Tensor(np.zeros((batch, 3, cfg.clip_len, cfg.input_size, cfg.input_size),
                           dtype=np.float32))
    with no_grad():
        taps = model.forward(clip)
    model.train(was_training)

    counts = {"stem": 0, "conv2_x": 0, "conv3_x": 0, "conv4_x": 0, "conv5_x": 0, "fc": 0}
    for name, p in model.named_parameters():
        counts[name.split(".", 1)[0]] += p.size
    lines = [f"{cfg.kind}-{cfg.depth} width x{cfg.width_multiplier:g} "
             f"input {cfg.input_size} clip {cfg.clip_len}"]
    for stage in ("stem", "conv2_x", "conv3_x", "conv4_x", "conv5_x", "fc"):
        if stage not in taps.stage_shapes:
            continue
        shape = "x".join(str(d) for d in taps.stage_shapes[stage])
        lines.append(f"{stage:<10} out={shape:<20} params={counts[stage]}")
    lines.append(f"total params={sum(counts.values())}")
    return "\n".join(lines)
