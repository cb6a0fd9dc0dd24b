import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from motion_analogy._validation import ValidationError
from motion_analogy.codec import LatentCodec
from motion_analogy.diffusion import VideoDenoiser
from motion_analogy.finetune import FinetuneConfig
from motion_analogy.flow import LatentFlowNet
from motion_analogy.synthdata import VideoClip, demo_pair, load_clip
from motion_analogy.transfer import (RUN_OUTPUTS, TransferConfig, TransferModels, histogram_match, run_pair,
                                     single_frame_transfer, source_latent_clip, transfer, write_run)

# -- histogram matching oracles --------------------------------------------------

images = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
                elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_histogram_match_sorted_values_equal_reference(data):
    img = data.draw(images)
    ref = data.draw(arrays(np.float64, img.shape, elements=st.floats(0, 1, allow_nan=False)))
    out = histogram_match(img, ref)
    for ch in range(3):
        np.testing.assert_array_equal(np.sort(out[..., ch].ravel()), np.sort(ref[..., ch].ravel()))


@settings(max_examples=100, deadline=None)
@given(images)
def test_histogram_match_self_is_identity(img):
    np.testing.assert_array_equal(histogram_match(img, img), img)


def test_histogram_match_constant_reference():
    img = np.random.default_rng(0).uniform(size=(5, 5, 3))
    ref = np.broadcast_to([0.1, 0.5, 0.9], (5, 5, 3))
    np.testing.assert_array_equal(histogram_match(img, ref), ref)


def test_histogram_match_preserves_order():
    img = np.array([[[0.3], [0.1], [0.2]]])
    ref = np.array([[[5.0], [7.0], [6.0]]])
    np.testing.assert_array_equal(histogram_match(img, ref)[..., 0], [[7.0, 5.0, 6.0]])
    with pytest.raises(ValidationError):
        histogram_match(img, ref[:, :2])


# -- pipeline with tiny untrained models -----------------------------------------

@pytest.fixture(scope="module")
def pair():
    return demo_pair()


@pytest.fixture(scope="module")
def models(pair):
    source, driving = pair
    codec = LatentCodec(width=16, iterations=1, batch_size=2).fit([source, driving])
    lat = [codec.encode_clip(source), codec.encode_clip(driving)]
    base = VideoDenoiser(width=32, iterations=1, batch_size=1).fit(lat)
    return TransferModels(codec, LatentFlowNet(width=16, seed=0), base)


FAST = TransferConfig(t_inv=900, steps=4)


def test_output_length_and_shapes(pair, models):
    source, driving = pair
    res = transfer(source, driving, models, FAST)
    assert len(res) == len(driving)
    assert res.output.frames.shape == driving.frames.shape
    assert len(res.adapted_keypoints) == len(res.flows) == len(driving)
    assert res.warped_noisy.shape == (len(driving), 8, 8, 4)
    assert res.metadata["single_frame"] is False


def test_shorter_driving_clip(pair, models):
    source, driving = pair
    short = VideoClip(driving.frames[:4], fps=driving.fps, keypoints=driving.keypoints[:4], label=driving.label)
    assert len(transfer(source, short, models, FAST)) == 4


def test_deterministic_for_fixed_seed(pair, models):
    source, driving = pair
    a = transfer(source, driving, models, FAST)
    b = transfer(source, driving, models, FAST)
    np.testing.assert_array_equal(a.output.frames, b.output.frames)
    c = transfer(source, driving, models, TransferConfig(t_inv=900, steps=4, seed=1))
    assert not np.array_equal(a.warped_noisy, c.warped_noisy)


def test_gamma_zero_removes_extra_noise(pair, models):
    source, driving = pair
    a = transfer(source, driving, models, TransferConfig(t_inv=900, steps=4, gamma=0.0, seed=0))
    b = transfer(source, driving, models, TransferConfig(t_inv=900, steps=4, gamma=0.0, seed=7))
    np.testing.assert_array_equal(a.warped_noisy, b.warped_noisy)


def test_histogram_matching_toggle(pair, models):
    source, driving = pair
    on = transfer(source, driving, models, FAST)
    off = transfer(source, driving, models, TransferConfig(t_inv=900, steps=4, histogram_matching=False))
    np.testing.assert_array_equal(off.output.frames, off.raw_frames)
    np.testing.assert_array_equal(on.raw_frames, off.raw_frames)
    ref = models.codec.inverse_transform(models.codec.transform(source.frames[0]))[0]
    np.testing.assert_allclose(np.sort(on.output.frames[0, ..., 1].ravel()), np.sort(ref[..., 1].ravel()),
                               atol=1e-6)


def test_single_frame_mode_is_flagged(pair, models):
    source, driving = pair
    res = single_frame_transfer((source.frames[0], source.keypoints[0], "turtle"), driving, models, FAST)
    assert res.metadata["single_frame"] is True
    lat = source_latent_clip(models.codec, source, single_frame=True, frames=7)
    assert len(lat) == 7
    assert all(np.array_equal(z, lat.latents[0]) for z in lat.latents)


def test_invalid_config_and_inputs(pair, models):
    source, driving = pair
    with pytest.raises(ValidationError, match="t_inv"):
        transfer(source, driving, models, TransferConfig(t_inv=1000))
    with pytest.raises(ValidationError, match="steps"):
        transfer(source, driving, models, TransferConfig(t_inv=10, steps=20))
    with pytest.raises(ValidationError):
        transfer(source, driving.frames, models, FAST)
    with pytest.raises(ValidationError, match="label"):
        transfer((source.frames[0], source.keypoints[0]), driving, models, FAST)


def test_run_pair_and_output_directory(pair, models, tmp_path):
    source, driving = pair
    res, adapter = run_pair(source, driving, models.codec, models.lofnet, models.base,
                            FinetuneConfig(iterations=2), FAST)
    assert adapter.rank == 4
    assert res.metadata["finetune"]["t_range_warp"] == [850, 1000]
    run = write_run(res, driving, tmp_path / "run", config={"transfer": {"steps": 4}}, metrics={"x": 1.0})
    assert sorted(p.name for p in run.iterdir()) == sorted(RUN_OUTPUTS)
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["run"]["resolved_config"] == {"transfer": {"steps": 4}}
    assert set(manifest["run"]["model_hashes"]) == {"base", "codec", "lofnet", "adapter"}
    back = load_clip(run, sidecar="manifest.json")
    assert len(back) == len(driving)
    np.testing.assert_allclose(back.frames, res.output.frames, atol=1 / 255 + 1e-6)
