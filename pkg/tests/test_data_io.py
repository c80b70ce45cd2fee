import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eri.data_io import (
    SyntheticSpec,
    decode_tensor,
    encode_tensor,
    format_manifest,
    generate_synthetic,
    load_manifest,
    parse_manifest,
    read_tensor,
    save_manifest,
    scale_labels,
    unscale_labels,
    write_tensor,
)
from eri.errors import DomainError, FormatError

FIXTURES = Path(__file__).parent / "fixtures"
HEADER = "video_id,frames_path,boxes_path,e1,e2,e3,e4,e5,e6,e7,split\n"

# Hand-written layout of a 2x3 float32 tensor holding 0..5:
# magic, version 1, rank 2, extents 2 and 3 (u64), then six little-endian floats.
GOLDEN_HEX = (
    "45524954" "01000000" "02000000"
    "0200000000000000" "0300000000000000"
    "00000000" "0000803f" "00000040" "00004040" "00008040" "0000a040"
)


def test_scale_examples():
    assert scale_labels([1, 100, 50, 25, 75, 10, 90]).tolist() == [0.01, 1.0, 0.5, 0.25, 0.75, 0.1, 0.9]
    with pytest.raises(DomainError):
        scale_labels([0, 1, 1, 1, 1, 1, 1])
    with pytest.raises(DomainError):
        scale_labels([101, 1, 1, 1, 1, 1, 1])


@settings(max_examples=100)
@given(st.lists(st.floats(1, 100), min_size=7, max_size=7))
def test_scaling_inverts(raw):
    assert np.allclose(unscale_labels(scale_labels(raw)), raw, atol=1e-9)


def test_manifest_fixture_values():
    recs = load_manifest(FIXTURES / "manifest3.csv")
    assert [r.video_id for r in recs] == ["a001", "a002", "a003"]
    assert recs[0].raw_labels == (1.0, 50.0, 100.0, 25.5, 3.0, 99.0, 42.0)
    assert recs[0].boxes_path == "videos/a001/boxes.csv" and recs[1].boxes_path is None
    assert [r.split for r in recs] == ["train", "val", "test"]
    assert recs[2].targets.tolist() == [1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 0.0725]


def test_manifest_round_trip_is_idempotent(tmp_path):
    recs = load_manifest(FIXTURES / "manifest3.csv")
    save_manifest(recs, tmp_path / "m.csv")
    again = load_manifest(tmp_path / "m.csv")
    assert again == recs
    assert format_manifest(again) == (tmp_path / "m.csv").read_text()


def test_manifest_empty_body_and_errors():
    assert parse_manifest(HEADER) == []
    with pytest.raises(FormatError, match="line 2"):
        parse_manifest(HEADER + "v,f,b,0,1,1,1,1,1,1,train\n")
    with pytest.raises(FormatError, match="line 3.*duplicate"):
        parse_manifest(HEADER + "v,f,b,1,1,1,1,1,1,1,train\nv,f,b,1,1,1,1,1,1,1,val\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_manifest(HEADER + "v,f,b,1,1,1\n")
    with pytest.raises(FormatError):
        parse_manifest("id,path\n")


def test_tensor_golden_bytes():
    expected = bytes.fromhex(GOLDEN_HEX)
    assert encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3)) == expected
    assert (FIXTURES / "tensor_2x3.erit").read_bytes() == expected
    assert read_tensor(FIXTURES / "tensor_2x3.erit").tolist() == [[0, 1, 2], [3, 4, 5]]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(arr):
    back = decode_tensor(encode_tensor(arr))
    assert back.shape == arr.shape and back.tobytes() == arr.astype("<f4").tobytes()


def test_tensor_corruption(tmp_path):
    blob = encode_tensor(np.ones((3, 4), np.float32))
    for cut in (3, 11, 20, len(blob) - 1):
        with pytest.raises(FormatError):
            decode_tensor(blob[:cut])
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_tensor(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(DomainError):
        write_tensor(tmp_path / "t.erit", np.array([np.nan]))


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generator_is_deterministic_and_counts(tmp_path):
    spec = SyntheticSpec(n_clips=16, frames_per_video=3, image_size=28, seed=7)
    recs = generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert len(load_manifest(tmp_path / "a" / "manifest.csv")) == 16
    assert len(list((tmp_path / "a" / "videos").iterdir())) == 16
    assert len(recs) == 16 and {r.split for r in recs} == {"train"}
    other = SyntheticSpec(n_clips=16, frames_per_video=3, image_size=28, seed=8)
    generate_synthetic(other, tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_generator_splits(tmp_path):
    recs = generate_synthetic(SyntheticSpec(n_clips=6, frames_per_video=1, image_size=14, n_val=2, n_test=1),
                              tmp_path)
    assert [r.split for r in recs] == ["train"] * 3 + ["val"] * 2 + ["test"]


# independent decoder --------------------------------------------------------------
# Written from the documented protocol only: seven equal vertical bands; in band j
# the pixels nearest to emotion j's key colour encode label_j / 100 of the band area.

PALETTE = {
    0: (255, 0, 0), 1: (0, 255, 0), 2: (0, 0, 255), 3: (255, 255, 0),
    4: (255, 0, 255), 5: (0, 255, 255), 6: (255, 255, 255), "neutral": (128, 128, 128),
}


def decode_clip(video_dir: Path) -> list[float]:
    from PIL import Image

    with open(video_dir / "boxes.csv", newline="") as fh:
        boxes = {int(r["frame_index"]): r for r in csv.DictReader(fh)}
    keys = list(PALETTE)
    colours = np.array([PALETTE[k] for k in keys], dtype=np.int64)
    fractions = []
    for t, png in enumerate(sorted(video_dir.glob("frame_*.png"))):
        b = boxes[t]
        x0, y0, x1, y1 = (int(b[k]) for k in ("x0", "y0", "x1", "y1"))
        face = np.asarray(Image.open(png), dtype=np.int64)[y0:y1, x0:x1]
        dist = ((face[:, :, None, :] - colours[None, None]) ** 2).sum(-1)
        nearest = np.array(keys, dtype=object)[dist.argmin(-1)]
        size = face.shape[1]
        row = []
        for j in range(7):
            band = nearest[:, j * size // 7 : (j + 1) * size // 7]
            row.append(float(np.sum(band == j)) / band.size)
        fractions.append(row)
    f = np.array(fractions)
    assert np.ptp(f, axis=0).max() == 0.0  # the painted amount never changes within a clip
    return f[0].tolist()


def test_planted_signal_decodes_within_quantisation(tmp_path):
    spec = SyntheticSpec(n_clips=5, frames_per_video=3, image_size=112, seed=3)
    recs = generate_synthetic(spec, tmp_path)
    band_area = 112 * (112 // 7)
    bound = 1 / (2 * band_area)
    assert bound <= 1 / 255
    for rec in recs:
        decoded = decode_clip(tmp_path / rec.frames_path)
        err = np.abs(np.array(decoded) - rec.targets)
        assert err.max() <= bound + 1e-12, (rec.video_id, decoded, rec.targets)
