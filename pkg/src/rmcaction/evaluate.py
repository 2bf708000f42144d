"""Evaluation: detection average precision, action accuracy, mean IoU,
and forward-pass throughput."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .boxes import iou_many
from .network import TargetActionNetwork
from .synthclips import ClipRecord
from .tensor import Tensor


@dataclass
class EvalReport:
    ap: float
    accuracy: float
    mean_iou: float
    clips_per_sec: float
    frames_per_sec: float
    n_clips: int
    n_frames: int
    iou_threshold: float
    pr_points: List[Tuple[float, float]] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        lines = [
            f"ap={self.ap:.6f}",
            f"accuracy={self.accuracy:.6f}",
            f"mean_iou={self.mean_iou:.6f}",
            f"clips_per_sec={self.clips_per_sec:.3f}",
            f"frames_per_sec={self.frames_per_sec:.3f}",
            f"n_clips={self.n_clips}",
            f"n_frames={self.n_frames}",
            f"iou_threshold={self.iou_threshold:.3f}",
        ]
        return "\n".join(lines) + "\n"


def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int,
                      return_curve: bool = False):
    """Area under the precision-recall curve (every-point interpolation).

    Detections are ranked by descending score (ties by input order);
    precision is interpolated to its running maximum from the right, and
    the area is summed over recall increments.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    env = precision.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    if return_curve:
        return ap, list(zip(recall.tolist(), precision.tolist()))
    return ap


def evaluate(model: TargetActionNetwork, records: Sequence[ClipRecord],
             iou_threshold: float = 0.5, batch_clips: int = 4) -> EvalReport:
    """Score a model on labeled clips.

    Accuracy is the fraction of clips whose argmax logit matches the
    label. Detection uses one box per frame (the refined box when the
    model carries a refinement block); a frame counts as a true positive
    when its box overlaps the ground truth with IoU >= threshold, and AP
    sweeps the proposal score over all frames.
    """
    if not records:
        raise ValueError("empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    scores: List[float] = []
    tps: List[bool] = []
    ious: List[float] = []
    wall = 0.0
    n_frames = 0
    for start in range(0, len(records), batch_clips):
        chunk = records[start:start + batch_clips]
        clips = np.stack([r.frames for r in chunk])
        t0 = time.perf_counter()
        out = model.forward_infer(Tensor(clips))
        wall += time.perf_counter() - t0
        labels = np.array([r.label for r in chunk])
        correct += int((out.labels == labels).sum())
        gts = np.concatenate([r.boxes for r in chunk])      # [B*L, 4]
        for f in range(len(gts)):
            iou = float(iou_many(out.boxes[f:f + 1], gts[f])[0])
            ious.append(iou)
            tps.append(iou >= iou_threshold)
            scores.append(float(out.scores[f]))
        n_frames += len(gts)

    ap, curve = average_precision(np.array(scores), np.array(tps), n_frames,
                                  return_curve=True)
    model.train(was_training)
    return EvalReport(
        ap=float(ap),
        accuracy=correct / len(records),
        mean_iou=float(np.mean(ious)),
        clips_per_sec=len(records) / wall if wall > 0 else float("inf"),
        frames_per_sec=n_frames / wall if wall > 0 else float("inf"),
        n_clips=len(records),
        n_frames=n_frames,
        iou_threshold=iou_threshold,
        pr_points=curve,
    )


def bench_fps(model: TargetActionNetwork, clip_shape: Tuple[int, int, int, int, int],
              repetitions: int = 10, warmup: int = 2, seed: int = 0) -> Dict[str, float]:
    """Median throughput of the full inference pass on a random clip batch.

    Returns frames/sec and clips/sec medians over the repetitions;
    warm-up runs are excluded.
    """
    n, c, l, s, s2 = clip_shape
    rng = np.random.default_rng(seed)
    clips = Tensor(rng.uniform(0, 1, clip_shape).astype(np.float32))
    was_training = model.training
    model.eval()
    for _ in range(warmup):
        model.forward_infer(clips)
    fps = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.forward_infer(clips)
        dt = time.perf_counter() - t0
        fps.append(n * l / dt)
    model.train(was_training)
    fps.sort()
    median = fps[len(fps) // 2] if len(fps) % 2 else 0.5 * (fps[len(fps) // 2 - 1] + fps[len(fps) // 2])
    return {
        "frames_per_sec": median,
        "clips_per_sec": median / l,
        "repetitions": float(repetitions),
    }
