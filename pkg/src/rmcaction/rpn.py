"""Single-target region proposal: anchors, ground-truth assignment, the
proposal head, its two losses, and top-proposal selection.

Exactly one target exists per frame, so there is no non-maximum
suppression: the pipeline consumes the single highest-scoring anchor,
decoded and clipped to the frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .boxes import Box, clip_boxes, decode_boxes, encode_boxes, iou_many, snap_min_extent
from .nn import Conv2d, Module
from .tensor import Tensor, smooth_l1, take

# anchor side lengths in pixels and height/width ratios
ANCHOR_PRESETS = {
    "body": ((16.0, 32.0, 64.0), (0.5, 1.0, 2.0)),
    "micro": ((8.0, 16.0, 24.0), (0.5, 1.0, 2.0)),
}


@dataclass(frozen=True)
class AnchorSet:
    """Anchors tiled over a feature grid, ordered (row, col, scale x ratio).

    Anchor k sits at cell (k // (W*A) ... ) with index layout
    ``k = (row * feat_w + col) * A + a`` where ``a`` runs over scales
    (outer) then ratios (inner).
    """

    boxes: np.ndarray          # [K, 4] float64, unclipped
    feat_h: int
    feat_w: int
    stride: float
    scales: Tuple[float, ...]
    ratios: Tuple[float, ...]

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(feat_h: int, feat_w: int, stride: float,
                     scales: Sequence[float], ratios: Sequence[float]) -> AnchorSet:
    """Tile scale/ratio anchor boxes over the feature grid.

    Cell (row, col) centers its anchors at ((col+0.5)*stride,
    (row+0.5)*stride). A scale ``s`` with ratio ``r`` (height/width)
    produces a box of height s*sqrt(r) and width s/sqrt(r). Boxes are not
    clipped here; boundary handling belongs to assignment.
    """
    if stride <= 0:
        raise ValueError(f"generate_anchors: stride must be positive, got {stride}")
    shapes = []
    for s in scales:
        for r in ratios:
            root = np.sqrt(r)
            shapes.append((s * root, s / root))  # (h, w)
    shapes = np.asarray(shapes, dtype=np.float64)

    cols, rows = np.meshgrid(np.arange(feat_w), np.arange(feat_h))
    cx = (cols.reshape(-1, 1) + 0.5) * stride
    cy = (rows.reshape(-1, 1) + 0.5) * stride
    h = shapes[:, 0].reshape(1, -1)
    w = shapes[:, 1].reshape(1, -1)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return AnchorSet(boxes.reshape(-1, 4), feat_h, feat_w, float(stride),
                     tuple(float(s) for s in scales), tuple(float(r) for r in ratios))


@dataclass
class AnchorAssignment:
    """Per-anchor training labels for one frame.

    ``labels``: 1 positive, 0 negative, -1 ignore. ``targets`` holds the
    encode deltas for the positive anchors, aligned with ``pos_indices``.
    """

    labels: np.ndarray                 # [K] int8
    pos_indices: np.ndarray            # [P] int64
    neg_indices: np.ndarray            # [Q] int64
    targets: np.ndarray                # [P, 4] float64

    @property
    def n_reg(self) -> int:
        return len(self.pos_indices)

    @property
    def n_cls(self) -> int:
        return len(self.pos_indices) + len(self.neg_indices)


def assign_anchors(
    anchors: AnchorSet,
    gt,
    pos_iou: float,
    neg_iou: float,
    max_samples: int,
    frame_bounds: Tuple[float, float],
    rng: Optional[np.random.Generator] = None,
) -> AnchorAssignment:
    """Label anchors against the frame's single ground-truth box.

    Anchors crossing the frame boundary are ignored. Among the rest,
    IoU >= pos_iou is positive, IoU < neg_iou is negative, and the
    highest-IoU anchor is forced positive regardless of threshold.
    Negatives are subsampled to at most ``max_samples - positives``
    (deterministic for a given ``rng`` state). A degenerate ground truth
    ignores the whole frame.
    """
    k = len(anchors)
    labels = np.full(k, -1, dtype=np.int8)
    gt_arr = gt.as_array() if isinstance(gt, Box) else np.asarray(gt, dtype=np.float64)
    empty = AnchorAssignment(labels, np.empty(0, np.int64), np.empty(0, np.int64),
                             np.empty((0, 4), np.float64))
    if not (gt_arr[0] < gt_arr[2] and gt_arr[1] < gt_arr[3]):
        return empty

    fw, fh = frame_bounds
    b = anchors.boxes
    inside = (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= fw) & (b[:, 3] <= fh)
    if not inside.any():
        return empty

    ious = iou_many(b, gt_arr)
    ious_in = np.where(inside, ious, -1.0)
    labels[inside & (ious >= pos_iou)] = 1
    labels[inside & (ious < neg_iou)] = 0
    labels[np.argmax(ious_in)] = 1  # first index on ties

    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    budget = max(0, max_samples - len(pos))
    if len(neg) > budget:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = rng.choice(len(neg), size=budget, replace=False)
        dropped = np.setdiff1d(np.arange(len(neg)), keep)
        labels[neg[dropped]] = -1
        neg = np.sort(neg[keep])

    targets = encode_boxes(gt_arr[None, :], b[pos])
    return AnchorAssignment(labels, pos, neg, targets)


class RPNHead(Module):
    """Shared 3x3 convolution feeding objectness and delta 1x1 siblings."""

    def __init__(self, c_in: int, per_cell: int, c_mid: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        c_mid = c_mid or c_in
        self.per_cell = per_cell
        self.shared = Conv2d(c_in, c_mid, 3, stride=1, padding=1, bias=True, rng=rng)
        self.cls = Conv2d(c_mid, 2 * per_cell, 1, bias=True, rng=rng)
        self.reg = Conv2d(c_mid, 4 * per_cell, 1, bias=True, rng=rng)

    def forward(self, tap: Tensor) -> Tuple[Tensor, Tensor]:
        """[NL, C, Hf, Wf] -> objectness [NL, A, Hf, Wf, 2], deltas [NL, A, Hf, Wf, 4]."""
        nl, _, hf, wf = tap.shape
        a = self.per_cell
        hidden = self.shared(tap).relu()
        obj = self.cls(hidden).reshape((nl, a, 2, hf, wf)).moveaxis(2, 4)
        deltas = self.reg(hidden).reshape((nl, a, 4, hf, wf)).moveaxis(2, 4)
        return obj, deltas


def flatten_to_anchor_order(head_out: Tensor) -> Tensor:
    """[NL, A, Hf, Wf, D] -> [NL * K, D] matching anchor index order."""
    nl, a, hf, wf, d = head_out.shape
    return head_out.moveaxis(1, 3).reshape((nl * hf * wf * a, d))


def loss_rpn_cls(obj_rows: Tensor, assignments: List[AnchorAssignment],
                 anchors_per_frame: int) -> Tensor:
    """Softmax cross-entropy over {background, target} for valid anchors.

    ``obj_rows`` is the anchor-ordered [NL*K, 2] objectness; valid anchors
    of all frames pool into one average (batch-level N_cls).
    """
    rows, labels = [], []
    for f, asg in enumerate(assignments):
        base = f * anchors_per_frame
        rows.append(base + asg.pos_indices)
        labels.append(np.ones(len(asg.pos_indices), dtype=np.int64))
        rows.append(base + asg.neg_indices)
        labels.append(np.zeros(len(asg.neg_indices), dtype=np.int64))
    idx = np.concatenate(rows)
    lab = np.concatenate(labels)
    if len(idx) == 0:
        return Tensor(np.zeros((), dtype=obj_rows.dtype))
    return F.softmax_cross_entropy(take(obj_rows, idx), lab)


def loss_rpn_reg(delta_rows: Tensor, assignments: List[AnchorAssignment],
                 anchors_per_frame: int, weight: float) -> Tensor:
    """weight * mean over positive anchors of sum_j smooth_l1(pred_j - target_j)."""
    rows, targets = [], []
    for f, asg in enumerate(assignments):
        rows.append(f * anchors_per_frame + asg.pos_indices)
        targets.append(asg.targets)
    idx = np.concatenate(rows)
    if len(idx) == 0:
        return Tensor(np.zeros((), dtype=delta_rows.dtype))
    t = np.concatenate(targets).astype(delta_rows.dtype)
    residual = take(delta_rows, idx) - Tensor(t)
    return smooth_l1(residual).sum(axis=1).mean() * weight


def select_top_proposals(
    obj: np.ndarray,
    deltas: np.ndarray,
    anchors: AnchorSet,
    frame_bounds: Tuple[float, float],
) -> Tuple[np.ndarray, np.ndarray]:
    """Pick each frame's best valid anchor and decode it into a proposal.

    ``obj`` [NL, A, Hf, Wf, 2] and ``deltas`` [NL, A, Hf, Wf, 4] are raw
    head outputs (numpy). Returns (boxes [NL, 4] float64, scores [NL]).
    Selection scans the valid (fully in-frame) anchors, matching the
    training rule that never supervises boundary-crossing anchors and so
    leaves their scores meaningless; if none is in frame, all anchors
    compete. The argmax of the target-class softmax score breaks ties at
    the lowest anchor index; decoded boxes are clipped to the frame and
    snapped to at least one pixel of extent.
    """
    nl = obj.shape[0]
    k = len(anchors)
    fw, fh = frame_bounds
    obj_rows = np.moveaxis(obj, 1, 3).reshape(nl, k, 2)
    delta_rows = np.moveaxis(deltas, 1, 3).reshape(nl, k, 4)
    scores = F.softmax(obj_rows.astype(np.float64), axis=2)[:, :, 1]
    b = anchors.boxes
    inside = (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= fw) & (b[:, 3] <= fh)
    if inside.any():
        masked = np.where(inside[None, :], scores, -1.0)
    else:
        masked = scores
    best = masked.argmax(axis=1)
    rows = np.arange(nl)
    decoded = decode_boxes(delta_rows[rows, best].astype(np.float64), anchors.boxes[best])
    clipped = clip_boxes(decoded, fw, fh)
    return snap_min_extent(clipped, fw, fh), scores[rows, best]


def write_proposals(path, boxes: np.ndarray, scores: np.ndarray) -> None:
    """Dump one line per frame: frame_index, score, x1, y1, x2, y2."""
    with open(path, "w") as fh:
        for i, (b, s) in enumerate(zip(boxes, scores)):
            fh.write(f"{i} {s:.6f} {b[0]:.3f} {b[1]:.3f} {b[2]:.3f} {b[3]:.3f}\n")


def read_proposals(path) -> Tuple[np.ndarray, np.ndarray]:
    boxes, scores = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            scores.append(float(parts[1]))
            boxes.append([float(v) for v in parts[2:6]])
    return np.asarray(boxes, dtype=np.float64), np.asarray(scores, dtype=np.float64)
