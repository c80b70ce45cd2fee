"""Frame sampling, face cropping and clip-level augmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data_io import read_tensor
from .errors import ContractError, DomainError, FormatError

CLIP_FRAMES = 32
CLIP_SIZE = 112


@dataclass(frozen=True)
class FaceBox:
    """Pixel box [x0, x1) x [y0, y1) in the coordinates of one frame."""

    frame_index: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.frame_index < 0:
            raise DomainError("frame_index must be non-negative")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise DomainError(f"degenerate box {self}")

    def clamped(self, height: int, width: int) -> tuple[int, int, int, int]:
        x0, x1 = max(0, self.x0), min(width, self.x1)
        y0, y1 = max(0, self.y0), min(height, self.y1)
        if x1 <= x0 or y1 <= y0:
            raise DomainError(f"box {self} lies outside a {height}x{width} frame")
        return x0, y0, x1, y1


@dataclass(frozen=True)
class AugmentPolicy:
    brightness_max_gain: float = 1.5
    hflip_prob: float = 0.5
    # "rotation 20% range" read as 0.2 of a half turn
    rotation_max_deg: float = 36.0
    seed: int = 0

    def __post_init__(self):
        if self.brightness_max_gain < 1:
            raise DomainError("brightness_max_gain must be >= 1")
        if not 0 <= self.hflip_prob <= 1:
            raise DomainError("hflip_prob must be in [0, 1]")
        if self.rotation_max_deg < 0:
            raise DomainError("rotation_max_deg must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the clip-level transform."""

    gain: float = 1.0
    flip: bool = False
    angle_deg: float = 0.0


def check_clip(clip, frames: int | None = CLIP_FRAMES, size: int | None = CLIP_SIZE) -> np.ndarray:
    a = np.asarray(clip)
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ContractError(f"clip must be [T, H, W, 3], got {a.shape}")
    if frames is not None and a.shape[0] != frames:
        raise ContractError(f"clip must have {frames} frames, got {a.shape[0]}")
    if size is not None and a.shape[1:3] != (size, size):
        raise ContractError(f"clip frames must be {size}x{size}, got {a.shape[1]}x{a.shape[2]}")
    return a


def sample_frame_indices(n_total: int, k: int = CLIP_FRAMES) -> list[int]:
    """k evenly spread indices, floor(i * (n_total - 1) / (k - 1)), endpoints included.

    Shorter videos get repeated frames from the same formula.
    """
    if n_total < 1:
        raise DomainError("video has no frames")
    if k < 1:
        raise DomainError("k must be positive")
    if k == 1:
        return [0]
    return [(i * (n_total - 1)) // (k - 1) for i in range(k)]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, wr = axis_weights(img.shape[0], out_h)
    c0, c1, wc = axis_weights(img.shape[1], out_w)
    rows = img[r0] * (1 - wr)[:, None, None] + img[r1] * wr[:, None, None]
    return rows[:, c0] * (1 - wc)[None, :, None] + rows[:, c1] * wc[None, :, None]


def crop_and_resize(frame, box: FaceBox, size: int = CLIP_SIZE) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ContractError(f"frame must be [H, W, 3], got {frame.shape}")
    x0, y0, x1, y1 = box.clamped(frame.shape[0], frame.shape[1])
    out = resize_bilinear(frame[y0:y1, x0:x1], size, size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def draw_params(policy: AugmentPolicy, clip_id: int = 0) -> AugmentParams:
    """Single seeded draw for a clip; the seed is ``policy.seed XOR clip_id``."""
    rng = np.random.default_rng((policy.seed ^ int(clip_id)) & (2**64 - 1))
    gain = float(rng.uniform(1.0, policy.brightness_max_gain))
    flip = bool(rng.random() < policy.hflip_prob)
    angle = float(rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg))
    return AugmentParams(gain, flip, angle)


def _rotation_sampler(h: int, w: int, angle_deg: float):
    """Bilinear sampling taps for rotating an h x w image about its centre."""
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate output coordinates back by -theta
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    taps = []
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        taps.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), np.where(inside, wgt, 0.0)))
    return taps


def rotate(frame: np.ndarray, angle_deg: float, taps=None) -> np.ndarray:
    """Rotate about the centre, positive angles clockwise on screen; uncovered pixels become 0."""
    if taps is None:
        taps = _rotation_sampler(frame.shape[0], frame.shape[1], angle_deg)
    out = np.zeros(frame.shape, dtype=np.float64)
    for yi, xi, wgt in taps:
        out += frame[yi, xi] * wgt[..., None]
    return out


def apply_augmentation(clip, params: AugmentParams,
                       on_frame: Callable[[int, AugmentParams], None] | None = None) -> np.ndarray:
    """Apply brightness gain, horizontal flip and rotation to every frame, clipped to [0, 1]."""
    clip = np.asarray(clip)
    frames = []
    taps = None
    if params.angle_deg != 0.0:
        taps = _rotation_sampler(clip.shape[1], clip.shape[2], params.angle_deg)
    for t in range(clip.shape[0]):
        if on_frame is not None:
            on_frame(t, params)
        f = clip[t].astype(np.float64)
        if params.gain != 1.0:
            f = f * params.gain
        if params.flip:
            f = f[:, ::-1, :]
        if taps is not None:
            f = rotate(f, params.angle_deg, taps)
        frames.append(np.clip(f, 0.0, 1.0))
    return np.stack(frames).astype(clip.dtype if np.issubdtype(clip.dtype, np.floating) else np.float32)


def augment(clip, policy: AugmentPolicy, clip_id: int = 0,
            on_frame: Callable[[int, AugmentParams], None] | None = None) -> np.ndarray:
    """Draw one transform for the clip and apply it identically to all frames."""
    clip = check_clip(clip, frames=None, size=None)
    return apply_augmentation(clip, draw_params(policy, clip_id), on_frame)


# loading -----------------------------------------------------------------------------


def load_boxes(path) -> dict[int, FaceBox]:
    """Read a ``frame_index,x0,y0,x1,y1`` CSV into a frame -> box mapping."""
    boxes = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame_index", "x0", "y0", "x1", "y1"]:
            raise FormatError(f"{path}: expected header frame_index,x0,y0,x1,y1")
        for row in reader:
            if not row:
                continue
            try:
                fi, x0, y0, x1, y1 = (int(round(float(v))) for v in row)
                boxes[fi] = FaceBox(fi, x0, y0, x1, y1)
            except (ValueError, DomainError) as exc:
                raise FormatError(f"{path}: line {reader.line_num}: {exc}") from None
    return boxes


def load_frames(path) -> np.ndarray:
    """Frames [N, H, W, 3] in [0, 1] from a PNG directory or a raw tensor file."""
    path = Path(path)
    if path.is_dir():
        from PIL import Image

        files = sorted(path.glob("*.png"))
        if not files:
            raise FormatError(f"{path}: no PNG frames")
        return np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files])
    arr = read_tensor(path)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise FormatError(f"{path}: expected a [N, H, W, 3] tensor, got {arr.shape}")
    return arr


def box_for(boxes: dict[int, FaceBox], index: int) -> FaceBox | None:
    """Box of the frame, else of the nearest frame that has one (earlier wins ties)."""
    if not boxes:
        return None
    if index in boxes:
        return boxes[index]
    nearest = min(boxes, key=lambda k: (abs(k - index), k))
    return boxes[nearest]


def build_clip(frames: np.ndarray, boxes: dict[int, FaceBox] | None = None, k: int = CLIP_FRAMES,
               size: int = CLIP_SIZE) -> np.ndarray:
    """Sample k frames, crop each to its face box (whole frame without boxes), resize to size."""
    frames = np.asarray(frames)
    out = []
    for idx in sample_frame_indices(frames.shape[0], k):
        frame = frames[idx]
        box = box_for(boxes or {}, idx) or FaceBox(idx, 0, 0, frame.shape[1], frame.shape[0])
        out.append(crop_and_resize(frame, box, size))
    return np.stack(out)


def clip_from_record(record, base_dir, k: int = CLIP_FRAMES, size: int = CLIP_SIZE) -> np.ndarray:
    """Build the clip for a manifest record; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    frames = load_frames(base / record.frames_path)
    boxes = load_boxes(base / record.boxes_path) if record.boxes_path else None
    return build_clip(frames, boxes, k, size)


def load_split(records, base_dir, split: str, k: int = CLIP_FRAMES,
               size: int = CLIP_SIZE) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Clips [N, k, size, size, 3], scaled targets [N, 7] and ids for one split."""
    chosen = [r for r in records if r.split == split]
    if not chosen:
        return np.zeros((0, k, size, size, 3), np.float32), np.zeros((0, 7)), []
    clips = np.stack([clip_from_record(r, base_dir, k, size) for r in chosen])
    targets = np.stack([r.targets for r in chosen])
    return clips, targets, [r.video_id for r in chosen]
