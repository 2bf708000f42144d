"""Bridge from per-frame 2D features to clip-level action classification:
crop-pool the selected box's features, classify the stacked crops with a
3D stage, and optionally refine each frame's box with a small regression
block.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import functional as F
from .backbones import Stage, StageSpec, scale_width
from .boxes import clip_boxes, decode_boxes, encode_boxes
from .nn import Linear, Module
from .tensor import Tensor, _result, smooth_l1


def crop_pool(tap: Tensor, boxes: np.ndarray, out_size: int, stride: float,
              clip_len: int) -> Tensor:
    """Bilinearly sample a PxP grid of features inside each frame's box.

    ``tap`` is the folded per-frame map [N*L, C, Hf, Wf]; ``boxes`` holds
    one image-coordinate box per frame [N*L, 4]. Boxes map to feature
    coordinates by dividing by ``stride``; each of the P x P output cells
    samples at its center (half-cell offset, no corner alignment), with
    bilinear weights over the four surrounding feature cells and
    border-clamped indices. The result stacks frames back into clips:
    [N, C, L, P, P]. Gradients flow to the features only; boxes are
    treated as constants.
    """
    nl, c, hf, wf = tap.shape
    if nl % clip_len:
        raise ValueError(f"crop_pool: {nl} frames do not fold into clips of length {clip_len}")
    n = nl // clip_len
    p = out_size
    b = np.asarray(boxes, dtype=np.float64) / stride

    cell_w = (b[:, 2] - b[:, 0]) / p
    cell_h = (b[:, 3] - b[:, 1]) / p
    grid = np.arange(p, dtype=np.float64) + 0.5
    # sample centers in feature coordinates, then into pixel-center space
    us = b[:, 0, None] + grid[None, :] * cell_w[:, None] - 0.5   # [NL, P] x
    vs = b[:, 1, None] + grid[None, :] * cell_h[:, None] - 0.5   # [NL, P] y

    def corners(coord, limit):
        lo = np.floor(coord).astype(np.int64)
        frac = coord - lo
        lo0 = np.clip(lo, 0, limit - 1)
        lo1 = np.clip(lo + 1, 0, limit - 1)
        return lo0, lo1, frac

    j0, j1, fx = corners(us, wf)
    i0, i1, fy = corners(vs, hf)

    feat = np.moveaxis(tap.data, 1, 3)                   # [NL, Hf, Wf, C]
    fidx = np.arange(nl)[:, None, None]
    wy0 = (1.0 - fy)[:, :, None]
    wy1 = fy[:, :, None]
    wx0 = (1.0 - fx)[:, None, :]
    wx1 = fx[:, None, :]
    w00 = (wy0 * wx0)[..., None]
    w01 = (wy0 * wx1)[..., None]
    w10 = (wy1 * wx0)[..., None]
    w11 = (wy1 * wx1)[..., None]

    iy0 = i0[:, :, None]
    iy1 = i1[:, :, None]
    jx0 = j0[:, None, :]
    jx1 = j1[:, None, :]
    out = (w00 * feat[fidx, iy0, jx0] + w01 * feat[fidx, iy0, jx1] +
           w10 * feat[fidx, iy1, jx0] + w11 * feat[fidx, iy1, jx1])
    out = out.astype(tap.dtype)                          # [NL, P, P, C]
    stacked = np.ascontiguousarray(
        out.reshape(n, clip_len, p, p, c).transpose(0, 4, 1, 2, 3))

    def vjp(g):
        gframes = g.reshape(n, c, clip_len, p, p).transpose(0, 2, 3, 4, 1).reshape(nl, p, p, c)
        gfeat = np.zeros((nl, hf, wf, c), dtype=g.dtype)
        np.add.at(gfeat, (fidx, iy0, jx0), gframes * w00)
        np.add.at(gfeat, (fidx, iy0, jx1), gframes * w01)
        np.add.at(gfeat, (fidx, iy1, jx0), gframes * w10)
        np.add.at(gfeat, (fidx, iy1, jx1), gframes * w11)
        return np.moveaxis(gfeat, 3, 1)

    return _result(stacked, [(tap, vjp)])


class ActionHead(Module):
    """3D final stage over stacked crops plus the clip classifier.

    Crops keep their spatial extent (stride 1) while every block halves
    time, so each frame contributes to some temporal window and the
    output reaches L/8.
    """

    def __init__(self, c_in: int, width_multiplier: float, act_num: int,
                 depth_repeats: int = 3, block: str = "bottleneck",
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        inner = scale_width(512, width_multiplier)
        out = inner if block == "basic" else 4 * inner
        tstrides = tuple(2 if i < 3 else 1 for i in range(depth_repeats))
        spec = StageSpec("3d", block, inner, out, depth_repeats,
                         spatial_stride=1, temporal_strides=tstrides)
        self.stage = Stage(spec, c_in, rng)
        self.fc = Linear(out, act_num, rng=rng)

    def forward(self, crops: Tensor) -> Tensor:
        """[N, C, L, P, P] -> logits [N, act_num]."""
        if crops.shape[2] % 8:
            raise ValueError(f"action head needs clip length divisible by 8, got {crops.shape[2]}")
        volume = self.stage(crops)
        return self.fc(F.global_spatiotemporal_avgpool(volume))


class RegressionBlock(Module):
    """Two fully connected layers refining each frame's box.

    The frame's crop (C*P*P values) is flattened, passed through a
    1024-wide hidden layer and projected to the 4 transform parameters
    relative to that frame's proposal box.
    """

    HIDDEN = 1024

    def __init__(self, c_tap: int, crop_size: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_features = c_tap * crop_size * crop_size
        self.fc1 = Linear(self.in_features, self.HIDDEN, rng=rng)
        self.fc2 = Linear(self.HIDDEN, 4, rng=rng)

    def forward(self, crops: Tensor) -> Tensor:
        """[N, C, L, P, P] -> per-frame deltas [N*L, 4] in clip order."""
        n, c, l, p, _ = crops.shape
        per_frame = crops.moveaxis(2, 1).reshape((n * l, c * p * p))
        return self.fc2(self.fc1(per_frame).relu())


def loss_act_cls(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy of clip logits against clip labels."""
    return F.softmax_cross_entropy(logits, labels)


def loss_roi_reg(pred_deltas: Tensor, proposals: np.ndarray, gts: np.ndarray,
                 weight: float) -> Tensor:
    """weight * mean over frames of sum_j smooth_l1(pred_j - target_j).

    Targets are the transforms carrying each frame's proposal box onto
    its ground truth.
    """
    targets = encode_boxes(np.asarray(gts, np.float64),
                           np.asarray(proposals, np.float64)).astype(pred_deltas.dtype)
    residual = pred_deltas - Tensor(targets)
    return smooth_l1(residual).sum(axis=1).mean() * weight


def refine_boxes(proposals: np.ndarray, deltas: np.ndarray,
                 frame_bounds: Tuple[float, float]) -> np.ndarray:
    """Apply predicted deltas to proposals and clip to the frame."""
    fw, fh = frame_bounds
    return clip_boxes(decode_boxes(np.asarray(deltas, np.float64),
                                   np.asarray(proposals, np.float64)), fw, fh)


def refine_box(proposal, delta, frame_bounds: Tuple[float, float]):
    """Single-box version of :func:`refine_boxes`."""
    from .boxes import Box, BoxDelta

    p = proposal.as_array() if isinstance(proposal, Box) else np.asarray(proposal)
    d = delta.as_array() if isinstance(delta, BoxDelta) else np.asarray(delta)
    out = refine_boxes(p[None, :], d[None, :], frame_bounds)[0]
    return Box(float(out[0]), float(out[1]), float(out[2]), float(out[3]))
