import numpy as np
import pytest
import torch

from motion_analogy._validation import CheckpointError, ValidationError
from motion_analogy.codec import LatentClip
from motion_analogy.diffusion import Attention, VideoDenoiser, denoise_loss, to_clip_tensor
from motion_analogy.finetune import (AblationVariant, DisentangledFinetuner, FinetuneConfig, LoRAAdapter,
                                     LoRALinear, WarpedClip, attach_lora, build_warped_clip, finetune,
                                     finetune_ablation_variant, lora_parameters, variant_config)
from motion_analogy.flow import LatentFlowNet
from motion_analogy.synthdata import demo_pair


@pytest.fixture(scope="module")
def base():
    rng = np.random.default_rng(0)
    clips = [LatentClip(rng.normal(size=(10, 8, 8, 4)), 64, label=lbl) for lbl in ("turtle", "rhino")]
    den = VideoDenoiser(width=32, iterations=3, batch_size=1, seed=0).fit(clips)
    # give the zero-initialised output layer some weight so base outputs are non-trivial
    with torch.no_grad():
        torch.nn.init.normal_(den.model_.unet.conv_out.weight, std=0.05)
    return den


@pytest.fixture(scope="module")
def clips():
    rng = np.random.default_rng(1)
    src = LatentClip(rng.normal(size=(10, 8, 8, 4)), 64, label="turtle")
    return src, WarpedClip(rng.normal(size=(10, 8, 8, 4)))


def _forward(model, base, seed=0):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(1, 10, 4, 8, 8, generator=gen)
    with torch.no_grad():
        return model(z, torch.tensor([500]), base.condition("turtle"))


def test_adapted_equals_base_at_init(base):
    adapted = attach_lora(base.model_, rank=4, alpha=4.0)
    assert torch.equal(_forward(adapted, base), _forward(base.model_, base))


def test_lora_shapes_and_targets(base):
    adapted = attach_lora(base.model_, rank=4)
    wrapped = [m for m in adapted.modules() if isinstance(m, LoRALinear)]
    n_attn = sum(isinstance(m, Attention) for m in adapted.modules())
    assert len(wrapped) == 4 * n_attn
    layer = LoRALinear(torch.nn.Linear(64, 64), rank=4)
    assert layer.lora_A.shape == (4, 64) and layer.lora_B.shape == (64, 4)
    with pytest.raises(ValidationError, match="rank"):
        LoRALinear(torch.nn.Linear(3, 64), rank=4)
    with pytest.raises(ValidationError):
        attach_lora(base.model_, rank=0)


def test_one_step_changes_only_lora(base):
    adapted = attach_lora(base.model_, rank=4)
    before = {n: p.detach().clone() for n, p in adapted.named_parameters()}
    params = lora_parameters(adapted)
    opt = torch.optim.Adam(params.values(), lr=1e-2)
    z0 = torch.randn(1, 10, 4, 8, 8)
    loss = denoise_loss(adapted, z0, base.condition("turtle"), 0, 1000, base.schedule,
                        torch.Generator().manual_seed(0))
    loss.backward()
    opt.step()
    for name, p in adapted.named_parameters():
        changed = not torch.equal(before[name], p)
        assert changed == (name in params and "lora_B" in name) or (name in params and changed)
        if name not in params:
            assert not changed


def test_full_run_contract(base, clips):
    src, warped = clips
    fingerprint = base.fingerprint()
    tuner = DisentangledFinetuner(base, iterations=250, seed=3).fit(src, warped, "turtle")
    assert base.fingerprint() == fingerprint
    draws = tuner.warp_t_draws_
    assert len(draws) == 250
    assert all(850 <= t < 1000 for t in draws)
    assert len(tuner.loss_log_) == 250


def test_zero_iterations_is_identity(base, clips):
    src, warped = clips
    adapter = finetune(base, src, warped, "turtle", FinetuneConfig(iterations=0))
    assert torch.equal(_forward(adapter.apply_to(base), base), _forward(base.model_, base))


def test_first_loss_equals_base_loss(base, clips):
    src, warped = clips
    tuner = DisentangledFinetuner(base, iterations=1, seed=5).fit(src, warped, "turtle")
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        c = base.condition("turtle")
        d_s = denoise_loss(base.model_, to_clip_tensor(src.latents), c, 0, 1000, base.schedule, gen)
        d_w = denoise_loss(base.model_, to_clip_tensor(warped.latents), c, 850, 1000, base.schedule, gen)
    entry = tuner.loss_log_[0]
    assert entry["D_s"] == d_s.item()
    assert entry["D_w"] == d_w.item()
    assert entry["D_loss"] == pytest.approx(entry["D_s"] + entry["D_w"], rel=1e-6)


def test_without_warp_branch_never_reads_warped(base, clips):
    src, _ = clips
    warped = WarpedClip(np.zeros((10, 8, 8, 4)))
    cfg = variant_config("none", FinetuneConfig(iterations=3))
    finetune(base, src, warped, "turtle", cfg)
    assert warped.access_count == 0
    finetune_ablation_variant(base, src, warped, "turtle", FinetuneConfig(iterations=2), use_warp_branch=False)
    assert warped.access_count == 0


def test_override_range(base, clips):
    src, warped = clips
    tuner = DisentangledFinetuner(base, iterations=40, t_range_warp=(400, 1000)).fit(src, warped, "turtle")
    assert all(400 <= t < 1000 for t in tuner.warp_t_draws_)
    assert min(tuner.warp_t_draws_) < 850


def test_ablation_enum():
    assert [v.value for v in AblationVariant] == ["full-range", "400-1000", "800-1000", "none"]
    assert variant_config("full-range").t_range_warp == (0, 1000)
    assert variant_config("800-1000").t_range_warp == (800, 1000)
    assert variant_config("none").use_warp_branch is False
    assert FinetuneConfig.glyph().t_range_warp == (900, 1000)
    with pytest.raises(ValidationError, match="variant"):
        variant_config("0-500")


def test_config_validation(base, clips):
    src, warped = clips
    with pytest.raises(ValidationError, match="t_range_warp"):
        finetune(base, src, warped, "turtle", FinetuneConfig(t_range_warp=(900, 1200)))
    with pytest.raises(ValidationError, match="geometry"):
        finetune(base, src, WarpedClip(np.zeros((10, 4, 4, 4))), "turtle", FinetuneConfig(iterations=1))


def test_adapter_checkpoint(base, clips, tmp_path):
    src, warped = clips
    adapter = finetune(base, src, warped, "turtle", FinetuneConfig(iterations=3))
    path = adapter.save(tmp_path / "a.pt")
    back = LoRAAdapter.load(path, base)
    assert back.rank == 4 and back.config_hash == adapter.config_hash
    assert torch.equal(_forward(back.apply_to(base), base), _forward(adapter.apply_to(base), base))
    other = VideoDenoiser(width=32, iterations=1, seed=9).fit([src])
    with pytest.raises(CheckpointError):
        LoRAAdapter.load(path, other)


def test_warped_clip_counts_and_identity():
    source, driving = demo_pair()
    net = LatentFlowNet(seed=0)
    z0 = np.random.default_rng(2).normal(size=(8, 8, 4)).astype(np.float32)
    out = build_warped_clip(z0, source.keypoints[0], driving.keypoints, net)
    assert len(out) == len(driving) == 10
    still = build_warped_clip(z0, source.keypoints[0], [driving.keypoints[0]] * 6, net)
    assert len(still) == 6
    # zero relative motion makes every candidate map the identity on the source keypoints
    for frame in still.latents:
        np.testing.assert_allclose(frame, z0, atol=1e-5)
