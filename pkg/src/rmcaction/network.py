"""The coupled detection + action network.

Shared per-frame 2D stages feed two consumers: a proposal head that
localizes the single target in every frame, and a 3D action stage that
classifies the motion of features cropped at the winning proposal. The
optional refinement block predicts a per-frame correction on top of the
proposal from the same crops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .action import ActionHead, RegressionBlock, crop_pool, loss_act_cls, loss_roi_reg, refine_boxes
from .backbones import BLOCK_KIND, BackboneConfig, Stage, Stem2d, scale_width
from .nn import BatchNorm, Conv2d, Module
from .rpn import (ANCHOR_PRESETS, AnchorSet, RPNHead, assign_anchors,
                  flatten_to_anchor_order, generate_anchors, loss_rpn_cls,
                  loss_rpn_reg, select_top_proposals)
from .tensor import Tensor, no_grad

TAP_STRIDE = 16
TAP_BASE_WIDTH = 512


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs of the coupled network."""

    input_size: int = 112
    clip_len: int = 8
    width_multiplier: float = 0.125
    depth: int = 50
    act_num: int = 6
    crop_size: int = 4
    anchor_preset: str = "body"
    improved: bool = False
    fullframe_crop: bool = False     # ablation: ignore proposals when cropping

    @property
    def tap_width(self) -> int:
        return scale_width(TAP_BASE_WIDTH, self.width_multiplier)

    @property
    def anchors_geometry(self):
        try:
            return ANCHOR_PRESETS[self.anchor_preset]
        except KeyError:
            raise ValueError(f"unknown anchor preset {self.anchor_preset!r} "
                             f"(choose from {sorted(ANCHOR_PRESETS)})") from None

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig("rmc", self.depth, self.width_multiplier,
                              self.input_size, self.clip_len, None)


@dataclass
class ForwardOutputs:
    """Inference products for one batch of clips."""

    proposals: np.ndarray            # [N*L, 4] selected boxes, image coords
    scores: np.ndarray               # [N*L] proposal confidences
    boxes: np.ndarray                # [N*L, 4] final boxes (refined when improved)
    logits: np.ndarray               # [N, act_num]
    labels: np.ndarray               # [N] argmax predictions


class TargetActionNetwork(Module):
    """Shared 2D trunk + proposal head + cropped 3D action classifier."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bb = cfg.backbone_config()
        specs = bb.stage_specs()

        self.stem = Stem2d(bb.stem_width, rng)
        self.conv2_x = Stage(specs[0], bb.stem_width, rng)
        self.conv3_x = Stage(specs[1], specs[0].out_width, rng)
        self.conv4_x = Stage(specs[2], specs[1].out_width, rng)
        self.tap_conv = Conv2d(specs[2].out_width, cfg.tap_width, 1, bias=False, rng=rng)
        self.tap_bn = BatchNorm(cfg.tap_width)

        scales, ratios = cfg.anchors_geometry
        self.rpn = RPNHead(cfg.tap_width, len(scales) * len(ratios), rng=rng)
        self.action = ActionHead(cfg.tap_width, cfg.width_multiplier, cfg.act_num,
                                 depth_repeats=specs[3].repeats,
                                 block=BLOCK_KIND[cfg.depth], rng=rng)
        self.refine = RegressionBlock(cfg.tap_width, cfg.crop_size, rng=rng) \
            if cfg.improved else None
        self._anchor_cache: Dict[Tuple[int, int], AnchorSet] = {}

    # ------------------------------------------------------------------

    def anchors_for(self, feat_h: int, feat_w: int) -> AnchorSet:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            scales, ratios = self.cfg.anchors_geometry
            self._anchor_cache[key] = generate_anchors(feat_h, feat_w, TAP_STRIDE,
                                                       scales, ratios)
        return self._anchor_cache[key]

    def forward_tap(self, clips: Tensor) -> Tensor:
        """[N, 3, L, S, S] -> shared conv4 tap [N*L, C_tap, S/16, S/16]."""
        if clips.ndim != 5 or clips.shape[1] != 3:
            raise ValueError(f"expected [N, 3, L, S, S] clips, got {clips.shape}")
        n, _, l, s, s2 = clips.shape
        if s % TAP_STRIDE or s2 % TAP_STRIDE:
            raise ValueError(f"spatial size {s}x{s2} must be divisible by {TAP_STRIDE}")
        if l % 8:
            raise ValueError(f"clip length {l} must be divisible by 8")
        frames = clips.moveaxis(2, 1).reshape((n * l, 3, s, s2))
        x = self.stem(frames)
        x = self.conv2_x(x)
        x = self.conv3_x(x)
        x = self.conv4_x(x)
        return self.tap_bn(self.tap_conv(x)).relu()

    def crop_boxes_from(self, proposals: np.ndarray, n_frames: int) -> np.ndarray:
        if self.cfg.fullframe_crop:
            s = float(self.cfg.input_size)
            return np.tile(np.array([0.0, 0.0, s, s]), (n_frames, 1))
        return proposals

    # ------------------------------------------------------------------

    def forward_train(self, clips: Tensor, gt_boxes: np.ndarray, labels: np.ndarray,
                      train_cfg, rng: np.random.Generator):
        """One training forward pass.

        Returns (loss parts dict name -> scalar Tensor, stats dict).
        ``gt_boxes`` is [N, L, 4] image-coordinate ground truth; loss
        weighting and anchor-assignment thresholds come from
        ``train_cfg`` (a TrainConfig).
        """
        n, _, l, s, _ = clips.shape
        tap = self.forward_tap(clips)
        _, _, hf, wf = tap.shape
        anchors = self.anchors_for(hf, wf)
        obj, deltas = self.rpn(tap)

        flat_gt = np.asarray(gt_boxes, np.float64).reshape(n * l, 4)
        assignments = [
            assign_anchors(anchors, flat_gt[f], train_cfg.pos_iou, train_cfg.neg_iou,
                           train_cfg.max_anchor_samples, (s, s), rng)
            for f in range(n * l)
        ]

        obj_rows = flatten_to_anchor_order(obj)
        parts: Dict[str, Tensor] = {}
        parts["rpn_cls"] = loss_rpn_cls(obj_rows, assignments, len(anchors))
        if train_cfg.lambda1 > 0:
            delta_rows = flatten_to_anchor_order(deltas)
            parts["rpn_reg"] = loss_rpn_reg(delta_rows, assignments, len(anchors),
                                            train_cfg.lambda1)

        proposals, scores = select_top_proposals(obj.data, deltas.data, anchors, (s, s))
        crops = crop_pool(tap, self.crop_boxes_from(proposals, n * l),
                          self.cfg.crop_size, TAP_STRIDE, l)
        logits = self.action(crops)
        parts["act_cls"] = loss_act_cls(logits, labels)
        if self.refine is not None and train_cfg.lambda2 > 0:
            pred = self.refine(crops)
            parts["roi_reg"] = loss_roi_reg(pred, proposals, flat_gt, train_cfg.lambda2)

        batch_acc = float((logits.data.argmax(axis=1) == np.asarray(labels)).mean())
        stats = {"proposals": proposals, "scores": scores, "batch_acc": batch_acc}
        return parts, stats

    def forward_infer(self, clips: Tensor) -> ForwardOutputs:
        """Inference pass: proposals, final boxes, and clip predictions."""
        n, _, l, s, _ = clips.shape
        with no_grad():
            tap = self.forward_tap(clips)
            _, _, hf, wf = tap.shape
            anchors = self.anchors_for(hf, wf)
            obj, deltas = self.rpn(tap)
            proposals, scores = select_top_proposals(obj.data, deltas.data, anchors, (s, s))
            crops = crop_pool(tap, self.crop_boxes_from(proposals, n * l),
                              self.cfg.crop_size, TAP_STRIDE, l)
            logits = self.action(crops)
            if self.refine is not None:
                pred = self.refine(crops)
                boxes = refine_boxes(proposals, pred.data, (s, s))
            else:
                boxes = proposals
        return ForwardOutputs(proposals, scores, boxes, logits.data.copy(),
                              logits.data.argmax(axis=1))


def build_network(cfg: NetworkConfig, seed: int = 0) -> TargetActionNetwork:
    return TargetActionNetwork(cfg, seed)
