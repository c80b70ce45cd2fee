import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eri.errors import ContractError, DomainError, FormatError
from eri.preprocessing import (
    AugmentParams,
    AugmentPolicy,
    FaceBox,
    apply_augmentation,
    augment,
    box_for,
    build_clip,
    check_clip,
    crop_and_resize,
    draw_params,
    load_boxes,
    resize_bilinear,
    rotate,
    sample_frame_indices,
)

NO_OP = AugmentPolicy(brightness_max_gain=1.0, hflip_prob=0.0, rotation_max_deg=0.0, seed=3)


def index_oracle(n, k):
    if k == 1:
        return [0]
    return [int(i * (n - 1) / (k - 1) + 1e-9) for i in range(k)]


def small_clip(seed=0, t=4, size=16):
    return np.random.default_rng(seed).uniform(size=(t, size, size, 3)).astype(np.float32)


def test_frame_indices_match_oracle_for_every_length():
    for n in range(1, 201):
        idx = sample_frame_indices(n, 32)
        assert idx == index_oracle(n, 32)
        assert idx[0] == 0 and idx[-1] == n - 1
        assert all(a <= b for a, b in zip(idx, idx[1:]))


def test_frame_indices_examples():
    assert sample_frame_indices(32) == list(range(32))
    assert sample_frame_indices(1) == [0] * 32
    assert sample_frame_indices(63)[:4] == [0, 2, 4, 6]
    with pytest.raises(DomainError):
        sample_frame_indices(0)


def test_half_size_resize_equals_box_average():
    img = np.random.default_rng(4).uniform(size=(224, 224, 3))
    box = img.reshape(112, 2, 112, 2, 3).mean(axis=(1, 3))
    assert np.max(np.abs(resize_bilinear(img, 112, 112) - box)) < 1e-12


def test_crop_and_resize_uses_box_region():
    frame = np.zeros((40, 40, 3))
    frame[10:30, 5:25] = 0.7
    out = crop_and_resize(frame, FaceBox(0, 5, 10, 25, 30), size=8)
    assert out.shape == (8, 8, 3) and np.allclose(out, 0.7)


def test_box_is_clamped_to_frame():
    frame = np.ones((10, 10, 3)) * 0.25
    out = crop_and_resize(frame, FaceBox(0, -5, -5, 5, 5), size=4)
    assert np.allclose(out, 0.25)
    with pytest.raises(DomainError):
        FaceBox(0, 20, 20, 30, 30).clamped(10, 10)


def test_no_op_policy_is_identity():
    clip = small_clip()
    assert np.array_equal(augment(clip, NO_OP, clip_id=9), clip)


def test_double_flip_is_involution():
    clip = small_clip(1)
    flip = AugmentParams(flip=True)
    assert np.array_equal(apply_augmentation(apply_augmentation(clip, flip), flip), clip)


def test_gain_on_constant_clip_clips_at_one():
    clip = np.full((4, 8, 8, 3), 0.8, dtype=np.float32)
    out = apply_augmentation(clip, AugmentParams(gain=1.5))
    assert np.all(out == 1.0)


def test_quarter_turn_matches_rot90():
    img = np.random.default_rng(2).uniform(size=(9, 9, 3))
    assert np.allclose(rotate(img, 90.0), np.rot90(img, k=-1, axes=(0, 1)), atol=1e-9)


def test_same_transform_on_every_frame():
    seen = []
    policy = AugmentPolicy(seed=11)
    augment(small_clip(2, t=32), policy, clip_id=4, on_frame=lambda t, p: seen.append((t, p)))
    assert [t for t, _ in seen] == list(range(32))
    assert len({p for _, p in seen}) == 1
    assert seen[0][1] == draw_params(policy, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 10_000))
def test_outputs_stay_in_unit_range(seed, clip_id):
    out = augment(small_clip(seed % 97), AugmentPolicy(seed=seed), clip_id=clip_id)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augmentation_is_deterministic_and_varies_with_seed():
    clip = small_clip(3)
    a = augment(clip, AugmentPolicy(seed=5), clip_id=1)
    assert np.array_equal(a, augment(clip, AugmentPolicy(seed=5), clip_id=1))
    outs = [augment(clip, AugmentPolicy(seed=s), clip_id=1) for s in range(100)]
    assert any(not np.array_equal(outs[0], o) for o in outs[1:])


def test_draw_params_ranges():
    policy = AugmentPolicy(seed=2)
    for cid in range(200):
        p = draw_params(policy, cid)
        assert 1.0 <= p.gain <= 1.5 and -36.0 <= p.angle_deg <= 36.0


def test_policy_validation():
    with pytest.raises(DomainError):
        AugmentPolicy(brightness_max_gain=0.5)
    with pytest.raises(DomainError):
        AugmentPolicy(hflip_prob=1.5)


def test_check_clip_shape_contract():
    check_clip(np.zeros((32, 112, 112, 3)))
    with pytest.raises(ContractError):
        check_clip(np.zeros((31, 112, 112, 3)))
    with pytest.raises(ContractError):
        check_clip(np.zeros((32, 112, 112)))


def test_nearest_box_fallback_prefers_earlier_on_ties():
    boxes = {2: FaceBox(2, 0, 0, 4, 4), 6: FaceBox(6, 1, 1, 5, 5)}
    assert box_for(boxes, 4).frame_index == 2
    assert box_for(boxes, 5).frame_index == 6
    assert box_for({}, 3) is None


def test_build_clip_shape_and_missing_boxes():
    frames = np.random.default_rng(0).uniform(size=(10, 20, 20, 3))
    clip = build_clip(frames, None, k=4, size=10)
    assert clip.shape == (4, 10, 10, 3)
    assert np.allclose(clip[0], resize_bilinear(frames[0], 10, 10))


def test_load_boxes_rejects_bad_rows(tmp_path):
    p = tmp_path / "boxes.csv"
    p.write_text("frame_index,x0,y0,x1,y1\n0,0,0,4,4\n1,5,5,2,2\n")
    with pytest.raises(FormatError, match="line 3"):
        load_boxes(p)
    p.write_text("a,b\n")
    with pytest.raises(FormatError):
        load_boxes(p)
