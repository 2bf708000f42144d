"""Training loop: loss composition, deterministic SGD, and curve logging."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .network import TargetActionNetwork
from .optim import SGD
from .synthclips import ClipRecord
from .tensor import Tensor

LOSS_ORDER = ("rpn_cls", "rpn_reg", "act_cls", "roi_reg")


@dataclass
class TrainConfig:
    lambda1: float = 3.0
    lambda2: float = 1.0
    improved: bool = False
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 500
    batch_clips: int = 5
    seed: int = 0
    anchor_preset: str = "body"
    eval_iou: float = 0.5
    log_every: int = 5
    lr_decay_iter: Optional[int] = None
    lr_decay_factor: float = 0.1
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    max_anchor_samples: int = 256

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_clips < 1:
            raise ValueError("batch_clips must be at least 1")


@dataclass
class LogPoint:
    iteration: int
    parts: Dict[str, float]
    err_rate: float


class DivergenceError(RuntimeError):
    """A loss part became non-finite during training."""

    def __init__(self, iteration: int, part: str, value: float):
        super().__init__(f"training diverged at iteration {iteration}: "
                         f"loss part {part!r} is {value}")
        self.iteration = iteration
        self.part = part


def total_loss(parts: Dict[str, Tensor]) -> Tensor:
    """Sum the loss parts in a fixed order (rpn_cls, rpn_reg, act_cls, roi_reg)."""
    total = None
    for name in LOSS_ORDER:
        if name not in parts:
            continue
        total = parts[name] if total is None else total + parts[name]
    if total is None:
        raise ValueError("no loss parts to sum")
    return total


def _stack_batch(records: Sequence[ClipRecord], idx: np.ndarray):
    clips = np.stack([records[i].frames for i in idx])        # [B, 3, L, S, S]
    boxes = np.stack([records[i].boxes for i in idx])         # [B, L, 4]
    labels = np.array([records[i].label for i in idx], dtype=np.int64)
    return clips, boxes, labels


def train(
    model: TargetActionNetwork,
    records: Sequence[ClipRecord],
    cfg: TrainConfig,
    log_fn: Optional[Callable[[str], None]] = None,
) -> List[LogPoint]:
    """Run deterministic SGD over the clip records.

    Batches are drawn from a seeded per-epoch shuffle; anchor-assignment
    subsampling consumes the same generator, so a seed fully determines
    the final weights. Returns the logged curve points.
    """
    if not records:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    model.train(True)

    curves: List[LogPoint] = []
    window_parts: Dict[str, List[float]] = {}
    window_err: List[float] = []
    order = rng.permutation(len(records))
    cursor = 0

    for it in range(1, cfg.iterations + 1):
        if cfg.lr_decay_iter is not None and it == cfg.lr_decay_iter:
            opt.lr *= cfg.lr_decay_factor
        take_n = min(cfg.batch_clips, len(records))
        if cursor + take_n > len(order):
            order = rng.permutation(len(records))
            cursor = 0
        idx = order[cursor:cursor + take_n]
        cursor += take_n

        clips, boxes, labels = _stack_batch(records, idx)
        parts, stats = model.forward_train(Tensor(clips), boxes, labels, cfg, rng)

        part_values = {}
        for name in LOSS_ORDER:
            if name in parts:
                v = parts[name].item()
                part_values[name] = v
                if not np.isfinite(v):
                    raise DivergenceError(it, name, v)

        loss = total_loss(parts)
        opt.zero_grad()
        loss.backward()
        opt.step()

        for name, v in part_values.items():
            window_parts.setdefault(name, []).append(v)
        window_err.append(1.0 - stats["batch_acc"])

        if it % cfg.log_every == 0 or it == cfg.iterations:
            mean_parts = {k: float(np.mean(v)) for k, v in window_parts.items()}
            err = float(np.mean(window_err))
            curves.append(LogPoint(it, mean_parts, err))
            if log_fn is not None:
                txt = " ".join(f"{k}={mean_parts[k]:.4f}" for k in LOSS_ORDER
                               if k in mean_parts)
                log_fn(f"iter={it} {txt} err={err:.3f}")
            window_parts = {}
            window_err = []
    return curves


def write_curves(path, curves: Sequence[LogPoint]) -> None:
    """One line per log point: iter, loss parts in order, err (missing parts '-')."""
    with open(path, "w") as fh:
        fh.write("# iter loss_rpn_cls loss_rpn_reg loss_act_cls loss_roi_reg err_rate\n")
        for p in curves:
            cols = [str(p.iteration)]
            for name in LOSS_ORDER:
                cols.append(f"{p.parts[name]:.6f}" if name in p.parts else "-")
            cols.append(f"{p.err_rate:.6f}")
            fh.write(" ".join(cols) + "\n")


def read_curves(path) -> List[LogPoint]:
    curves = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            cols = line.split()
            parts = {}
            for name, raw in zip(LOSS_ORDER, cols[1:5]):
                if raw != "-":
                    parts[name] = float(raw)
            curves.append(LogPoint(int(cols[0]), parts, float(cols[5])))
    return curves
