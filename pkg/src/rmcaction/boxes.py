"""Axis-aligned frame-coordinate boxes and their 4-parameter transforms.

Box math runs in float64 throughout: coordinates are tiny data compared
to feature maps, and the extra precision keeps encode/decode round trips
and IoU comparisons exact enough to test without tolerance games.

A delta (t_xc, t_yc, t_h, t_w) moves a reference box's center by a
fraction of its size and rescales it log-linearly:

    t_xc = (gx - rx) / rw      t_yc = (gy - ry) / rh
    t_w  = ln(gw / rw)         t_h  = ln(gh / rh)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# log-size deltas are clamped before exponentiation so a wild prediction
# decodes to a huge finite box (then clipped) instead of overflowing
MAX_LOG_SCALE = 20.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def is_degenerate(self) -> bool:
        return not (self.x1 < self.x2 and self.y1 < self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class BoxDelta:
    t_xc: float
    t_yc: float
    t_h: float
    t_w: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t_xc, self.t_yc, self.t_h, self.t_w], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def iou_many(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """IoU of each row of ``boxes`` [K,4] against one box ``ref`` [4]."""
    ix = np.maximum(0.0, np.minimum(boxes[:, 2], ref[2]) - np.maximum(boxes[:, 0], ref[0]))
    iy = np.maximum(0.0, np.minimum(boxes[:, 3], ref[3]) - np.maximum(boxes[:, 1], ref[1]))
    inter = ix * iy
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    ref_area = (ref[2] - ref[0]) * (ref[3] - ref[1])
    union = area + ref_area - inter
    out = np.zeros(len(boxes), dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _centers(arr: np.ndarray):
    w = arr[..., 2] - arr[..., 0]
    h = arr[..., 3] - arr[..., 1]
    cx = arr[..., 0] + 0.5 * w
    cy = arr[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_boxes(gt: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Deltas mapping reference boxes onto targets, rowwise on [*,4]."""
    gx, gy, gw, gh = _centers(np.asarray(gt, dtype=np.float64))
    rx, ry, rw, rh = _centers(np.asarray(ref, dtype=np.float64))
    t_xc = (gx - rx) / rw
    t_yc = (gy - ry) / rh
    t_h = np.log(gh / rh)
    t_w = np.log(gw / rw)
    return np.stack([t_xc, t_yc, t_h, t_w], axis=-1)


def decode_boxes(deltas: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    d = np.asarray(deltas, dtype=np.float64)
    rx, ry, rw, rh = _centers(np.asarray(ref, dtype=np.float64))
    gx = rx + d[..., 0] * rw
    gy = ry + d[..., 1] * rh
    gh = rh * np.exp(np.clip(d[..., 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    gw = rw * np.exp(np.clip(d[..., 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.stack([gx - 0.5 * gw, gy - 0.5 * gh, gx + 0.5 * gw, gy + 0.5 * gh], axis=-1)


def encode_box(gt: Box, ref: Box) -> BoxDelta:
    if ref.is_degenerate():
        raise ValueError(f"encode_box: degenerate reference box {ref}")
    t = encode_boxes(gt.as_array(), ref.as_array())
    return BoxDelta(float(t[0]), float(t[1]), float(t[2]), float(t[3]))


def decode_box(delta: BoxDelta, ref: Box) -> Box:
    b = decode_boxes(delta.as_array(), ref.as_array())
    return Box(float(b[0]), float(b[1]), float(b[2]), float(b[3]))


def clip_boxes(boxes: np.ndarray, frame_w: float, frame_h: float) -> np.ndarray:
    """Intersect boxes with the frame rectangle [0,W] x [0,H]."""
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[..., 0] = np.clip(out[..., 0], 0.0, frame_w)
    out[..., 1] = np.clip(out[..., 1], 0.0, frame_h)
    out[..., 2] = np.clip(out[..., 2], 0.0, frame_w)
    out[..., 3] = np.clip(out[..., 3], 0.0, frame_h)
    return out


def snap_min_extent(boxes: np.ndarray, frame_w: float, frame_h: float,
                    min_size: float = 1.0) -> np.ndarray:
    """Grow boxes thinner than ``min_size`` to that size, kept in frame."""
    out = np.asarray(boxes, dtype=np.float64).copy()
    w = out[..., 2] - out[..., 0]
    h = out[..., 3] - out[..., 1]
    thin_w = w < min_size
    thin_h = h < min_size
    if np.any(thin_w):
        cx = np.clip(out[..., 0] + 0.5 * w, min_size / 2, frame_w - min_size / 2)
        out[..., 0] = np.where(thin_w, cx - min_size / 2, out[..., 0])
        out[..., 2] = np.where(thin_w, cx + min_size / 2, out[..., 2])
    if np.any(thin_h):
        cy = np.clip(out[..., 1] + 0.5 * h, min_size / 2, frame_h - min_size / 2)
        out[..., 1] = np.where(thin_h, cy - min_size / 2, out[..., 1])
        out[..., 3] = np.where(thin_h, cy + min_size / 2, out[..., 3])
    return out
