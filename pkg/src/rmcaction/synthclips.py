"""Synthetic clips: one colored target sprite performing a labeled
parametric motion over a textured background, plus optional distractor
sprites performing motions from the same catalog.

The class signal lives in the motion, not in any single frame: every
pattern starts at zero displacement, so a single frame cannot reveal
which trajectory the sprite is on. Ground-truth boxes are computed from
the rendered mask, so they bound the painted sprite exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

CLIP_MAGIC = b"RMC1"
CLIP_VERSION = 1

PATTERN_NAMES = (
    "horizontal_oscillation",
    "vertical_oscillation",
    "circular_orbit",
    "expand_contract",
    "diagonal_bounce",
    "stationary_jitter",
    "horizontal_oscillation_fast",
    "vertical_oscillation_fast",
    "circular_orbit_reverse",
    "expand_contract_fast",
)


class ClipFormatError(Exception):
    """Base class for clip file problems."""


class ClipMagicError(ClipFormatError):
    pass


class ClipVersionError(ClipFormatError):
    pass


class ClipTruncatedError(ClipFormatError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    size: int = 112
    clip_len: int = 8
    act_num: int = 6
    distractors: int = 1
    noise_level: float = 0.05
    background: str = "gradient"      # "gradient" | "plain"
    amplitude: float = 14.0
    jitter: float = 3.0
    sprite_min: float = 16.0
    sprite_max: float = 28.0

    def __post_init__(self):
        if not (1 <= self.act_num <= len(PATTERN_NAMES)):
            raise ValueError(f"act_num must be in [1, {len(PATTERN_NAMES)}], got {self.act_num}")
        if self.size < 16 or self.clip_len < 1:
            raise ValueError(f"degenerate clip geometry: size {self.size}, length {self.clip_len}")


@dataclass
class ClipRecord:
    frames: np.ndarray        # [3, L, S, S] float32 in [0, 1]
    boxes: np.ndarray         # [L, 4] float64, x1 y1 x2 y2
    label: int
    clip_id: int
    split: str                # "train" | "test"
    act_num: int

    @property
    def clip_len(self) -> int:
        return self.frames.shape[1]

    @property
    def size(self) -> int:
        return self.frames.shape[2]


def trajectory_path(pattern: int, clip_len: int, amplitude: float, jitter: float,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Displacements (dx, dy) and size scale per frame for one pattern.

    All patterns pass through zero displacement at t = 0.
    """
    t = np.arange(clip_len, dtype=np.float64)
    theta = 2.0 * np.pi * t / clip_len
    a = amplitude
    dx = np.zeros(clip_len)
    dy = np.zeros(clip_len)
    scale = np.ones(clip_len)
    # jitter draws are consumed by every pattern so that a seed produces
    # the same scene regardless of the trajectory chosen
    jx = rng.uniform(-jitter, jitter, clip_len) if jitter > 0 else np.zeros(clip_len)
    jy = rng.uniform(-jitter, jitter, clip_len) if jitter > 0 else np.zeros(clip_len)

    # every moving pattern also modulates the sprite size a little, phase
    # locked to its trajectory and starting at scale 1 (so the first frame
    # is identical across patterns): a crop that tracks the target still
    # sees its class through the in-box dynamics, the way a deforming
    # real-world actor would appear inside its tight box
    sin1 = np.sin(theta)
    sin2 = np.sin(2.0 * theta)
    phase = np.abs(2.0 * ((t / clip_len + 0.25) % 1.0) - 1.0)
    tri0 = 2.0 * phase - 1.0  # triangular, zero at t=0, range [-1, 1]

    name = PATTERN_NAMES[pattern]
    if name == "horizontal_oscillation":
        dx = a * sin1
        scale = 1.0 + 0.12 * sin1
    elif name == "vertical_oscillation":
        dy = a * sin1
        scale = 1.0 - 0.12 * sin1
    elif name == "circular_orbit":
        dx = a * sin1
        dy = a * (1.0 - np.cos(theta))
        scale = 1.0 + 0.12 * sin2
    elif name == "expand_contract":
        scale = 1.0 + 0.45 * sin1
    elif name == "diagonal_bounce":
        dx = a * tri0
        dy = dx
        scale = 1.0 + 0.24 * tri0
    elif name == "stationary_jitter":
        dx = jx
        dy = jy
        dx[0] = dy[0] = 0.0
    elif name == "horizontal_oscillation_fast":
        dx = a * sin2
        scale = 1.0 + 0.12 * sin2
    elif name == "vertical_oscillation_fast":
        dy = a * sin2
        scale = 1.0 - 0.12 * sin2
    elif name == "circular_orbit_reverse":
        dx = -a * sin1
        dy = a * (1.0 - np.cos(theta))
        scale = 1.0 - 0.12 * sin2
    elif name == "expand_contract_fast":
        scale = 1.0 + 0.45 * sin2
    else:  # pragma: no cover
        raise ValueError(f"unknown pattern {pattern}")
    return dx, dy, scale


def _paint_sprite(frame: np.ndarray, shape: str, cx: float, cy: float,
                  half_w: float, half_h: float, color: np.ndarray) -> Optional[np.ndarray]:
    """Paint one sprite; returns its tight box [x1,y1,x2,y2] or None."""
    s = frame.shape[1]
    ys, xs = np.mgrid[0:s, 0:s]
    if shape == "disc":
        r = min(half_w, half_h)
        mask = ((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) <= r * r
    else:
        mask = (np.abs(xs + 0.5 - cx) <= half_w) & (np.abs(ys + 0.5 - cy) <= half_h)
    if not mask.any():
        return None
    frame[:, mask] = color[:, None]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def _sample_sprite(rng: np.random.Generator, cfg: ClipConfig, band: int):
    """Geometry and color of one sprite; band picks the dominant channel.

    Geometry comes from a tiny quantized menu (two shapes, three sizes)
    and colors are fixed per band: with only dozens of training clips,
    any richer appearance variety turns into a memorizable clip identity
    and the classifier keys on looks instead of motion.
    """
    shape = "disc" if rng.uniform() < 0.5 else "rect"
    side = [cfg.sprite_min, (cfg.sprite_min + cfg.sprite_max) / 2,
            cfg.sprite_max][rng.integers(3)]
    half_w = half_h = side / 2
    color = np.full(3, 0.1)
    color[band] = 0.9
    return shape, half_w, half_h, color.astype(np.float64)


MAX_SCALE = 1.45  # largest size modulation any catalog pattern applies


def _place_center(rng: np.random.Generator, cfg: ClipConfig,
                  half_w: float, half_h: float) -> Tuple[float, float]:
    """Sample a center that keeps the sprite in frame for EVERY catalog
    pattern (worst-case travel), so placement is trajectory-independent."""
    s = cfg.size
    travel = cfg.amplitude + cfg.jitter
    mx = travel + half_w * MAX_SCALE + 1
    my = travel + half_h * MAX_SCALE + 1
    if 2 * mx >= s or 2 * my >= s:
        raise ValueError(
            f"sprite too large for frame: needs {2 * mx:.0f}x{2 * my:.0f} "
            f"of travel in a {s}x{s} frame")
    cx = rng.uniform(mx, s - mx)
    cy = rng.uniform(my, s - my)
    return cx, cy


# three canonical background textures; a clip picks one of them, so
# backgrounds repeat across clips and cannot identify an individual clip
_BACKGROUND_WAVES = (
    ((1.0, 0.4, 0.0), (0.3, 1.2, 2.1)),
    ((0.5, 1.5, 1.0), (4.0, 1.0, 5.2)),
    ((1.8, 0.9, 0.4), (2.5, 3.6, 0.7)),
)


def _background(rng: np.random.Generator, cfg: ClipConfig) -> np.ndarray:
    s = cfg.size
    choice = int(rng.integers(len(_BACKGROUND_WAVES)))  # drawn even for plain
    if cfg.background == "plain":
        return np.full((3, s, s), 0.3, dtype=np.float64)
    if cfg.background != "gradient":
        raise ValueError(f"unknown background kind {cfg.background!r}")
    ys, xs = np.mgrid[0:s, 0:s]
    u, v = xs / s, ys / s
    freqs, phases = _BACKGROUND_WAVES[choice]
    bg = np.empty((3, s, s), dtype=np.float64)
    for c in range(3):
        bg[c] = 0.3 + 0.15 * np.sin(2 * np.pi * freqs[c] * (u + 0.6 * v) + phases[c])
    return bg


def render_clip(seed: int, cfg: ClipConfig, pattern: int,
                clip_id: int = 0, split: str = "train") -> ClipRecord:
    """Render one deterministic clip for a pattern id.

    The target sprite (dominant red band) follows the pattern's
    trajectory; each distractor (green/blue band) follows a random
    catalog pattern and starts at most 0.3 IoU away from the target.
    """
    if not (0 <= pattern < cfg.act_num):
        raise ValueError(f"pattern {pattern} out of range for act_num {cfg.act_num}")
    rng = np.random.default_rng(seed)
    s, l = cfg.size, cfg.clip_len

    bg = _background(rng, cfg)
    shape, half_w, half_h, color = _sample_sprite(rng, cfg, band=0)
    dx, dy, scale = trajectory_path(pattern, l, cfg.amplitude, cfg.jitter, rng)
    cx, cy = _place_center(rng, cfg, half_w, half_h)

    others = []
    target_box0 = None
    for d in range(cfg.distractors):
        dshape, dhw, dhh, dcolor = _sample_sprite(rng, cfg, band=1 + (d % 2))
        dpat = int(rng.integers(cfg.act_num))
        ddx, ddy, dscale = trajectory_path(dpat, l, cfg.amplitude, cfg.jitter, rng)
        for attempt in range(100):
            dcx, dcy = _place_center(rng, cfg, dhw, dhh)
            if target_box0 is None:
                probe = np.zeros((3, s, s))
                target_box0 = _paint_sprite(probe, shape, cx + dx[0], cy + dy[0],
                                            half_w * scale[0], half_h * scale[0], color)
            probe = np.zeros((3, s, s))
            dbox0 = _paint_sprite(probe, dshape, dcx + ddx[0], dcy + ddy[0],
                                  dhw * dscale[0], dhh * dscale[0], dcolor)
            if dbox0 is None or _iou(target_box0, dbox0) <= 0.3:
                break
        else:
            raise ValueError("could not place distractor away from the target")
        others.append((dshape, dhw, dhh, dcolor, dcx, dcy, ddx, ddy, dscale))

    frames = np.empty((3, l, s, s), dtype=np.float64)
    boxes = np.empty((l, 4), dtype=np.float64)
    for t in range(l):
        frame = bg.copy()
        for (dshape, dhw, dhh, dcolor, dcx, dcy, ddx, ddy, dscale) in others:
            _paint_sprite(frame, dshape, dcx + ddx[t], dcy + ddy[t],
                          dhw * dscale[t], dhh * dscale[t], dcolor)
        box = _paint_sprite(frame, shape, cx + dx[t], cy + dy[t],
                            half_w * scale[t], half_h * scale[t], color)
        if box is None:
            raise ValueError(f"target sprite left the frame at t={t}")
        frames[:, t] = frame
        boxes[t] = box

    if cfg.noise_level > 0:
        frames += rng.uniform(-cfg.noise_level, cfg.noise_level, frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return ClipRecord(frames.astype(np.float32), boxes, pattern, clip_id, split, cfg.act_num)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ----------------------------------------------------------------------
# clip files: magic "RMC1", little-endian throughout


def write_clip(record: ClipRecord, path) -> None:
    """Serialize a clip; the write is atomic (temp file + rename)."""
    frames = np.ascontiguousarray(record.frames, dtype="<f4")
    c, l, s, _ = frames.shape
    header = CLIP_MAGIC + struct.pack(
        "<8I", CLIP_VERSION, l, s, c, record.act_num, record.label, record.clip_id,
        0 if record.split == "train" else 1)
    boxes = np.ascontiguousarray(record.boxes, dtype="<f4")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(boxes.tobytes())
        fh.write(frames.tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ClipTruncatedError(f"clip file truncated while reading {what} "
                                 f"(wanted {n} bytes, got {len(data)})")
    return data


def read_clip(path) -> ClipRecord:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CLIP_MAGIC:
            raise ClipMagicError(f"bad clip magic {magic!r}, expected {CLIP_MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CLIP_VERSION:
            raise ClipVersionError(f"unsupported clip version {version}, "
                                   f"expected {CLIP_VERSION}")
        l, s, c, act_num, label, clip_id, split_flag = struct.unpack(
            "<7I", _read_exact(fh, 28, "header fields"))
        boxes = np.frombuffer(_read_exact(fh, 16 * l, "boxes"), dtype="<f4")
        frames = np.frombuffer(_read_exact(fh, 4 * c * l * s * s, "frames"), dtype="<f4")
        extra = fh.read(1)
        if extra:
            raise ClipTruncatedError("trailing bytes after clip payload")
    return ClipRecord(frames.reshape(c, l, s, s).copy(),
                      boxes.reshape(l, 4).astype(np.float64),
                      int(label), int(clip_id),
                      "train" if split_flag == 0 else "test", int(act_num))


# ----------------------------------------------------------------------
# datasets


def clip_seed(master_seed: int, split: str, index: int) -> int:
    base = master_seed * 1_000_003
    return base + index + (500_000 if split == "test" else 0)


def make_dataset(seed: int, n_train: int, n_test: int, cfg: ClipConfig,
                 out_dir) -> str:
    """Render a balanced train/test dataset and write its manifest.

    Labels are assigned round robin inside each split (per-class counts
    differ by at most one). Returns the manifest path; manifest lines
    are "filename split label".
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test clip")
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    clip_id = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            label = i % cfg.act_num
            record = render_clip(clip_seed(seed, split, i), cfg, label,
                                 clip_id=clip_id, split=split)
            name = f"{split}_{i:04d}.rmc1"
            write_clip(record, os.path.join(out_dir, name))
            lines.append(f"{name} {split} {label}")
            clip_id += 1
    manifest = os.path.join(out_dir, "manifest.txt")
    tmp = manifest + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest)
    return manifest


def load_manifest(manifest_path) -> List[Tuple[str, str, int]]:
    """Parse manifest lines into (absolute clip path, split, label)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    with open(manifest_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"malformed manifest line: {line.rstrip()!r}")
            name, split, label = parts
            entries.append((os.path.join(base, name), split, int(label)))
    return entries


def load_records(manifest_path, split: Optional[str] = None) -> List[ClipRecord]:
    records = []
    for path, sp, label in load_manifest(manifest_path):
        if split is not None and sp != split:
            continue
        rec = read_clip(path)
        if rec.label != label:
            raise ValueError(f"manifest label {label} disagrees with {path} ({rec.label})")
        records.append(rec)
    return records
