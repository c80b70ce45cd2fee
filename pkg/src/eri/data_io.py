"""Manifests, label scaling, raw tensor files and the synthetic dataset generator."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import NUM_EMOTIONS
from .errors import DomainError, FormatError

EMOTION_COLUMNS = tuple(f"e{i}" for i in range(1, NUM_EMOTIONS + 1))
MANIFEST_HEADER = ("video_id", "frames_path", "boxes_path") + EMOTION_COLUMNS + ("split",)
SPLITS = ("train", "val", "test")
LABEL_MIN, LABEL_MAX = 1.0, 100.0


# labels ------------------------------------------------------------------------


def scale_labels(raw: Sequence[float]) -> np.ndarray:
    """Map raw 1..100 intensities to [0.01, 1.0] by dividing by 100."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != NUM_EMOTIONS:
        raise DomainError(f"expected {NUM_EMOTIONS} labels, got {raw.shape[-1]}")
    if np.any(~np.isfinite(raw)) or np.any(raw < LABEL_MIN) or np.any(raw > LABEL_MAX):
        raise DomainError(f"raw labels must lie in [{LABEL_MIN:g}, {LABEL_MAX:g}], got {raw.tolist()}")
    return raw / 100.0


def unscale_labels(scaled) -> np.ndarray:
    return np.asarray(scaled, dtype=np.float64) * 100.0


# manifest ------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    frames_path: str
    boxes_path: str | None
    raw_labels: tuple[float, ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DomainError(f"split must be one of {SPLITS}, got {self.split!r}")
        labels = tuple(float(v) for v in self.raw_labels)
        if len(labels) != NUM_EMOTIONS:
            raise DomainError(f"expected {NUM_EMOTIONS} labels")
        for col, v in zip(EMOTION_COLUMNS, labels):
            if not LABEL_MIN <= v <= LABEL_MAX:
                raise DomainError(f"{col}={v:g} outside [{LABEL_MIN:g}, {LABEL_MAX:g}]")
        object.__setattr__(self, "raw_labels", labels)

    @property
    def targets(self) -> np.ndarray:
        return scale_labels(self.raw_labels)


def parse_manifest(text: str) -> list[ManifestRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("manifest is empty (no header)") from None
    if tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise FormatError(f"line 1: expected header {','.join(MANIFEST_HEADER)}")
    records, seen = [], set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError(f"line {line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        vid, frames, boxes, *labels, split = (c.strip() for c in row)
        try:
            values = [float(v) for v in labels]
        except ValueError:
            raise FormatError(f"line {line}: non-numeric label") from None
        try:
            rec = ManifestRecord(vid, frames, boxes or None, tuple(values), split)
        except DomainError as exc:
            raise FormatError(f"line {line}: {exc}") from None
        if vid in seen:
            raise FormatError(f"line {line}: duplicate video_id {vid!r}")
        seen.add(vid)
        records.append(rec)
    return records


def load_manifest(path) -> list[ManifestRecord]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def format_manifest(records: Sequence[ManifestRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in records:
        w.writerow([r.video_id, r.frames_path, r.boxes_path or "", *(f"{v:.17g}" for v in r.raw_labels), r.split])
    return out.getvalue()


def save_manifest(records: Sequence[ManifestRecord], path) -> None:
    Path(path).write_text(format_manifest(records), encoding="utf-8")


# raw tensor files --------------------------------------------------------------------

TENSOR_MAGIC = b"ERIT"
TENSOR_VERSION = 1


def encode_tensor(t) -> bytes:
    a = np.asarray(t)
    if not np.all(np.isfinite(a)):
        raise DomainError("tensor files hold finite values only")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FormatError("tensor file is truncated")
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    end = 12 + 8 * rank
    if len(buf) < end:
        raise FormatError("tensor file is truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    n = int(np.prod(shape)) if rank else 1
    if len(buf) != end + 4 * n:
        raise FormatError(f"tensor payload holds {len(buf) - end} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=end).astype(np.float32).reshape(shape)


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# synthetic data ------------------------------------------------------------------------

# One colour per emotion plus a neutral fill, far apart so noisy pixels still
# classify to the nearest key.
KEY_COLORS = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 255, 255),
)
NEUTRAL_COLOR = (128, 128, 128)


@dataclass(frozen=True)
class SyntheticSpec:
    """Seeded stand-in dataset with labels planted in pixel statistics.

    The face area is split into seven vertical bands. In band j the fraction of
    pixels painted with emotion j's key colour is ``label_j / 100`` (rounded to
    whole pixels); the rest of the band is a neutral colour. The painted run
    shifts cyclically from frame to frame, its size stays fixed. The face sits
    at a per-frame random offset inside a larger noisy frame and its box is
    written alongside.
    """

    n_clips: int = 16
    frames_per_video: int = 40
    image_size: int = 112
    seed: int = 0
    n_val: int = 0
    n_test: int = 0
    pixel_noise: int = 6

    def __post_init__(self):
        if self.n_clips < 1 or self.frames_per_video < 1 or self.image_size < NUM_EMOTIONS:
            raise DomainError("n_clips, frames_per_video must be positive and image_size >= 7")
        if self.n_val + self.n_test >= self.n_clips:
            raise DomainError("train split would be empty")

    @property
    def margin(self) -> int:
        return self.image_size // 4

    @property
    def frame_size(self) -> int:
        return self.image_size + 2 * self.margin

    def split_of(self, index: int) -> str:
        n_train = self.n_clips - self.n_val - self.n_test
        if index < n_train:
            return "train"
        return "val" if index < n_train + self.n_val else "test"


def band_edges(size: int) -> list[int]:
    return [(j * size) // NUM_EMOTIONS for j in range(NUM_EMOTIONS + 1)]


def painted_count(label: int, band_area: int) -> int:
    """Pixels of the key colour for an integer label in 1..100."""
    return (int(label) * band_area + 50) // 100


def render_face(labels: Sequence[int], size: int, shift: int, rng: np.random.Generator, pixel_noise: int) -> np.ndarray:
    """uint8 [size, size, 3] face patch for integer labels in 1..100."""
    face = np.zeros((size, size, 3), dtype=np.int64)
    edges = band_edges(size)
    for j, lab in enumerate(labels):
        lo, hi = edges[j], edges[j + 1]
        area = size * (hi - lo)
        mask = np.zeros(area, dtype=bool)
        mask[: painted_count(lab, area)] = True
        mask = np.roll(mask, shift % area).reshape(size, hi - lo)
        face[:, lo:hi] = np.where(mask[..., None], KEY_COLORS[j], NEUTRAL_COLOR)
    if pixel_noise:
        face += rng.integers(-pixel_noise, pixel_noise + 1, size=face.shape)
    return np.clip(face, 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[ManifestRecord]:
    """Write PNG frames, per-video box CSVs and ``manifest.csv`` under ``out_dir``."""
    from PIL import Image

    out = Path(out_dir)
    try:
        (out / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    S, F = spec.image_size, spec.frame_size
    for i in range(spec.n_clips):
        rng = np.random.default_rng([spec.seed, i])
        labels = rng.integers(1, 101, size=NUM_EMOTIONS)
        vid = f"clip{i:04d}"
        vdir = out / "videos" / vid
        vdir.mkdir(parents=True, exist_ok=True)
        box_rows = ["frame_index,x0,y0,x1,y1"]
        for t in range(spec.frames_per_video):
            frame = rng.integers(0, 256, size=(F, F, 3)).astype(np.uint8)
            ox, oy = (int(v) for v in rng.integers(0, 2 * spec.margin + 1, size=2))
            frame[oy : oy + S, ox : ox + S] = render_face(labels, S, t * S, rng, spec.pixel_noise)
            Image.fromarray(frame).save(vdir / f"frame_{t:05d}.png", optimize=False)
            box_rows.append(f"{t},{ox},{oy},{ox + S},{oy + S}")
        (vdir / "boxes.csv").write_text("\n".join(box_rows) + "\n", encoding="utf-8")
        records.append(
            ManifestRecord(
                video_id=vid,
                frames_path=f"videos/{vid}",
                boxes_path=f"videos/{vid}/boxes.csv",
                raw_labels=tuple(float(v) for v in labels),
                split=spec.split_of(i),
            )
        )
    save_manifest(records, out / "manifest.csv")
    return records
