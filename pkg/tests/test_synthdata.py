import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from motion_analogy._validation import ClipIOError, ValidationError
from motion_analogy.synthdata import (BODY_SHAPES, PRESETS, SPRITE_CLASSES, KeypointSet, MotionScript,
                                      SpriteSpec, VideoClip, demo_pair, generate_sprite_video, load_clip,
                                      load_dataset, make_dataset, make_script, save_clip, save_dataset,
                                      surface_point)


def _spec(label="turtle", size=64):
    return SpriteSpec.from_class(label, size=size)


def test_idle_frames_identical():
    spec = _spec()
    clip = generate_sprite_video(spec, MotionScript.idle(spec, 6), seed=3)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames[1:])


def test_root_translation_shifts_keypoints():
    spec = _spec("stickman")
    d = 1.5
    n = 5
    trans = np.stack([np.arange(n) * d, np.zeros(n)], axis=1)
    script = MotionScript(n, trans, np.zeros((n, spec.n_bones)))
    clip = generate_sprite_video(spec, script, seed=None, render=False)
    p0 = clip.keypoints[0].positions.astype(np.float64)
    for i, kp in enumerate(clip.keypoints):
        expected = p0 + np.array([2.0 * i * d / spec.size, 0.0])
        np.testing.assert_allclose(kp.positions, expected, atol=1e-6)


def _fd_frame(spec, script, frame, bone, fraction, h=1e-3):
    """Columns: derivative of the surface point w.r.t. (along-px, across-px)."""
    length = spec.limb_lengths[spec.bones[bone].length_index]
    cols = []
    for d_frac, d_across in ((h / length, 0.0), (0.0, h)):
        plus = surface_point(spec, script, frame, bone, fraction + d_frac, d_across)
        minus = surface_point(spec, script, frame, bone, fraction - d_frac, -d_across)
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("theta", [0.3, -0.8, 1.4])
def test_limb_rotation_jacobian_matches_finite_differences(theta):
    spec = _spec("turtle")
    bone, kp_index = 5, 4  # front_leg_near carries keypoint 4 at its tip
    angles = np.zeros((2, spec.n_bones))
    angles[1, bone] = theta
    script = MotionScript(2, np.zeros((2, 2)), angles)
    clip = generate_sprite_video(spec, script, seed=None, render=False)
    jac = clip.keypoints[1].jacobians[kp_index].astype(np.float64)

    rest = _fd_frame(spec, script, 0, bone, 1.0)
    posed = _fd_frame(spec, script, 1, bone, 1.0)
    fd = posed @ np.linalg.inv(rest)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    np.testing.assert_allclose(jac, rot, atol=1e-6)
    assert np.linalg.norm(jac - fd) / np.linalg.norm(fd) < 0.05


def test_generation_is_deterministic():
    spec = _spec("giraffe")
    script = make_script("run", spec, 10, seed=4)
    a = generate_sprite_video(spec, script, seed=7)
    b = generate_sprite_video(spec, script, seed=7)
    assert np.array_equal(a.frames, b.frames)
    assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a.keypoints, b.keypoints))


def test_script_bone_count_mismatch_names_field():
    spec = _spec("turtle")
    script = MotionScript(3, np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValidationError, match="joint_angles"):
        generate_sprite_video(spec, script)


@pytest.mark.parametrize("kwargs, field", [
    (dict(body_shape="blob"), "body_shape"),
    (dict(size=60), "size"),
    (dict(limb_lengths=(1.0, -2.0, 1.0)), "limb_lengths"),
    (dict(palette=()), "palette"),
])
def test_spec_validation(kwargs, field):
    base = dict(body_shape="glyph", limb_lengths=(16.0, 10.0, 8.0), palette=((0.1, 0.2, 0.3),))
    base.update(kwargs)
    with pytest.raises(ValidationError, match=field):
        SpriteSpec(**base)


def test_script_validation():
    with pytest.raises(ValidationError, match="joint_angles"):
        MotionScript(2, np.zeros((2, 2)), np.array([[0.0, np.nan], [0.0, 0.0]]))
    with pytest.raises(ValidationError, match="frames"):
        MotionScript(0, np.zeros((0, 2)), np.zeros((0, 3)))


def test_keypointset_invariants():
    with pytest.raises(ValidationError, match="singular"):
        KeypointSet(np.zeros((2, 2)), np.zeros((2, 2, 2))).validate()
    with pytest.raises(ValidationError, match=r"\[-1, 1\]"):
        KeypointSet(np.full((1, 2), 1.5), np.eye(2)[None]).validate()


def test_make_dataset_deterministic_and_bounds():
    a = make_dataset(1, seed=11)
    b = make_dataset(1, seed=11)
    assert np.array_equal(a[0].frames, b[0].frames)
    with pytest.raises(ValidationError):
        make_dataset(0)


def test_make_dataset_mixture():
    clips = make_dataset(100, seed=0, render=False)
    shapes = {c.metadata["body_shape"] for c in clips}
    assert len(shapes) >= 2
    assert {c.metadata["preset"] for c in clips} <= set(PRESETS)
    assert all(c.label in SPRITE_CLASSES for c in clips)


def test_keypoint_validity_over_random_generations():
    rng = np.random.default_rng(0)
    labels = sorted(SPRITE_CLASSES)
    count = 0
    while count < 1000:
        label = labels[count % len(labels)]
        preset = PRESETS[int(rng.integers(len(PRESETS)))]
        sub = int(rng.integers(2**31))
        spec = SpriteSpec.from_class(label, rng=np.random.default_rng(sub))
        try:
            clip = generate_sprite_video(spec, make_script(preset, spec, 2, seed=sub), seed=sub, render=False)
        except ValidationError as exc:
            assert "leaves the frame" in str(exc)
            continue
        for kp in clip.keypoints:
            kp.validate()
            assert kp.K == 10
        count += 1


@settings(max_examples=25, deadline=None)
@given(label=st.sampled_from(sorted(SPRITE_CLASSES)), preset=st.sampled_from(PRESETS),
       seed=st.integers(0, 10_000))
def test_presets_are_pure_functions(label, preset, seed):
    spec = SpriteSpec.from_class(label)
    a = make_script(preset, spec, 6, seed)
    b = make_script(preset, spec, 6, seed)
    assert np.array_equal(a.joint_angles, b.joint_angles)
    assert np.array_equal(a.root_translation, b.root_translation)
    assert np.all(np.isfinite(a.joint_angles))


def test_every_body_shape_renders():
    for label, info in SPRITE_CLASSES.items():
        spec = SpriteSpec.from_class(label)
        clip = generate_sprite_video(spec, make_script("walk", spec, 3, seed=1), seed=1)
        assert clip.frames.shape == (3, 64, 64, 3)
        assert info["body_shape"] in BODY_SHAPES


def test_clip_round_trip(tmp_path):
    source, _ = demo_pair()
    save_clip(source, tmp_path / "c")
    loaded = load_clip(tmp_path / "c")
    assert np.array_equal(loaded.frames, source.frames)
    assert loaded.label == source.label
    for a, b in zip(loaded.keypoints, source.keypoints):
        assert np.max(np.abs(a.positions - b.positions)) <= 1e-6
        assert np.max(np.abs(a.jacobians - b.jacobians)) <= 1e-6


def test_clip_without_keypoints(tmp_path):
    clip = VideoClip(np.full((2, 8, 8, 3), 0.5, np.float32), fps=4.0)
    save_clip(clip, tmp_path / "c")
    loaded = load_clip(tmp_path / "c")
    assert loaded.keypoints is None
    assert loaded.fps == 4.0


def test_mixed_frame_sizes_rejected(tmp_path):
    clip = VideoClip(np.zeros((3, 16, 16, 3), np.float32))
    save_clip(clip, tmp_path / "c")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "c" / "frames" / "00002.png")
    with pytest.raises(ClipIOError, match="00002.png"):
        load_clip(tmp_path / "c")


def test_missing_frames_and_bad_metadata(tmp_path):
    with pytest.raises(ClipIOError, match="frames"):
        load_clip(tmp_path / "nothing")
    source, _ = demo_pair()
    save_clip(source, tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    meta["keypoints"]["positions"] = meta["keypoints"]["positions"][:3]
    (tmp_path / "c" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ClipIOError, match="keypoint"):
        load_clip(tmp_path / "c")


def test_dataset_round_trip(tmp_path):
    clips = make_dataset(3, seed=5)
    save_dataset(clips, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert [c.label for c in back] == [c.label for c in clips]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(back, clips))


def test_demo_pair_is_turtle_and_jumping_rhino():
    source, driving = demo_pair()
    assert (source.label, driving.label) == ("turtle", "rhino")
    assert driving.metadata["preset"] == "jump"
    assert len(source) == len(driving) == 10
