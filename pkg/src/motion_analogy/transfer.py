"""Inference: carry a driving clip's motion onto a source sprite.

The source's first latent is DDIM-inverted (replicated over the driving
clip's frame slots), warped per frame by the keypoint-driven flow, perturbed
with a little extra noise, denoised by the fine-tuned model, decoded and
colour-corrected against the decoded source frame.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from ._validation import ValidationError, check_frames
from .codec import LatentClip, LatentCodec
from .diffusion import VideoDenoiser, ddim_invert, ddim_sample, from_clip_tensor, to_clip_tensor
from .finetune import LoRAAdapter, build_warped_clip, finetune, FinetuneConfig
from .flow import DenseFlow, LatentFlowNet, adapt_keypoints, stack_keypoints, warp_tensor
from .synthdata import KeypointSet, VideoClip, save_clip

logger = logging.getLogger(__name__)

RUN_OUTPUTS = ("frames", "manifest.json", "output.gif", "grid.png", "metrics.json")


@dataclass
class TransferConfig:
    t_inv: int = 980
    steps: int = 50
    gamma: float = 0.1
    seed: int = 0
    histogram_matching: bool = True
    single_frame: bool = False

    def validate(self, T):
        if not 0 < self.t_inv < T:
            raise ValidationError(f"t_inv={self.t_inv} must lie in (0, {T})")
        if not 0 < self.steps <= self.t_inv:
            raise ValidationError(f"steps={self.steps} must lie in [1, t_inv]")
        if not self.gamma >= 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        return self


@dataclass
class TransferModels:
    codec: LatentCodec
    lofnet: LatentFlowNet
    base: VideoDenoiser
    adapter: Optional[LoRAAdapter] = None

    def hashes(self):
        out = {"base": self.base.fingerprint(),
               "codec": _module_hash(self.codec.model_),
               "lofnet": _module_hash(self.lofnet.model_)}
        if self.adapter is not None:
            out["adapter"] = self.adapter.config_hash
        return out


def _module_hash(module):
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


@dataclass
class TransferResult:
    """Output clip plus the intermediates that produced it."""

    output: VideoClip
    adapted_keypoints: list
    flows: list
    warped_noisy: np.ndarray
    raw_frames: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.output)


def histogram_match(img, ref):
    """Per-channel rank remapping of ``img`` onto the empirical distribution of ``ref``.

    The i-th smallest value of each channel is replaced by the i-th smallest
    value of the same channel of ``ref``, so the output's sorted channel values
    equal ``ref``'s exactly.
    """
    img = np.asarray(img)
    ref = np.asarray(ref)
    if img.shape != ref.shape:
        raise ValidationError(f"histogram_match needs equal shapes, got {img.shape} and {ref.shape}")
    if img.ndim != 3:
        raise ValidationError(f"expected (H, W, C) images, got shape {img.shape}")
    out = np.empty(img.shape, dtype=np.result_type(img.dtype, ref.dtype))
    flat_out = out.reshape(-1, img.shape[-1])
    flat_img = img.reshape(-1, img.shape[-1])
    flat_ref = ref.reshape(-1, ref.shape[-1])
    for ch in range(img.shape[-1]):
        order = np.argsort(flat_img[:, ch], kind="stable")
        flat_out[order, ch] = np.sort(flat_ref[:, ch])
    return out


def _source_frame(source):
    if isinstance(source, VideoClip):
        if not source.keypoints:
            raise ValidationError("source clip carries no keypoints")
        return source.frames[0], source.keypoints[0], source.label
    frame, kp = source[0], source[1]
    label = source[2] if len(source) > 2 else None
    if not isinstance(kp, KeypointSet):
        raise ValidationError("single-frame sources are given as (frame, KeypointSet[, label])")
    return check_frames(frame, "source frame")[0], kp, label


def _check_driving(driving):
    if not isinstance(driving, VideoClip):
        raise ValidationError("driving must be a VideoClip")
    if not driving.keypoints:
        raise ValidationError("driving clip carries no keypoints")
    return driving


def transfer(source, driving, models: TransferModels, cfg: Optional[TransferConfig] = None,
             label=None) -> TransferResult:
    """Render ``source`` performing ``driving``'s motion.

    ``source`` is a VideoClip (its frame 0 and keypoints are used) or a
    ``(frame, KeypointSet[, label])`` tuple. ``label`` overrides the source's
    class label used for conditioning.
    """
    cfg = cfg or TransferConfig()
    base = models.base
    cfg.validate(base.T)
    driving = _check_driving(driving)
    frame0, kp_src, src_label = _source_frame(source)
    label = label if label is not None else src_label
    if label is None:
        raise ValidationError("a class label is needed for conditioning")
    codec, lofnet = models.codec, models.lofnet
    if frame0.shape[0] != codec.size:
        raise ValidationError(f"source frames are {frame0.shape[0]}px but the codec expects {codec.size}px")
    if codec.latent_size != lofnet.grid_size or tuple(base.grid_) != (lofnet.grid_size,) * 2:
        raise ValidationError("codec, flow network and denoiser disagree on the latent grid")
    if kp_src.K != lofnet.n_keypoints or driving.keypoints[0].K != lofnet.n_keypoints:
        raise ValidationError(f"flow network expects K={lofnet.n_keypoints} keypoints")

    n = len(driving)
    model = models.adapter.apply_to(base) if models.adapter is not None else base.model_
    schedule = base.schedule
    z0 = codec.transform(frame0)[0]
    c = base.condition(label)

    with torch.no_grad():
        z_rep = to_clip_tensor(np.repeat(z0[None], n, axis=0))
        z_inv = ddim_invert(z_rep, c, model, schedule, cfg.steps, cfg.t_inv)[0]  # (F, C, h, w)

        adapted = adapt_keypoints(kp_src, driving.keypoints)
        pos_s, jac_s = stack_keypoints([kp_src] * n)
        pos_a, jac_a = stack_keypoints(adapted)
        z_ref = torch.from_numpy(z0).permute(2, 0, 1)[None].expand(n, -1, -1, -1)
        flow, _ = lofnet.flow_tensor(z_ref, pos_s, jac_s, pos_a, jac_a)
        warped = warp_tensor(z_inv, flow)

        gen = torch.Generator().manual_seed(cfg.seed)
        noise = torch.randn(warped.shape, generator=gen)
        sigma = cfg.gamma * float(np.sqrt(1.0 - schedule.alpha_bars[cfg.t_inv]))
        z_start = (warped + sigma * noise)[None]
        z_out = ddim_sample(z_start, c, model, schedule, cfg.steps, cfg.t_inv)

    latents = from_clip_tensor(z_out)[0]
    raw = codec.inverse_transform(latents)
    if cfg.histogram_matching:
        reference = codec.inverse_transform(z0[None])[0]
        frames = np.stack([histogram_match(f, reference) for f in raw])
    else:
        frames = raw.copy()
    output = VideoClip(frames, fps=driving.fps, keypoints=adapted, label=label)
    metadata = {"config": asdict(cfg), "label": label, "frames": n,
                "single_frame": bool(cfg.single_frame), "model_hashes": models.hashes()}
    return TransferResult(output, adapted, [DenseFlow(f) for f in flow.numpy()],
                          from_clip_tensor(z_start)[0], raw, metadata)


def single_frame_transfer(source_frame, driving, models: TransferModels,
                          cfg: Optional[TransferConfig] = None, label=None) -> TransferResult:
    """:func:`transfer` from one (frame, KeypointSet[, label]) source; flagged in metadata."""
    cfg = TransferConfig(**{**asdict(cfg or TransferConfig()), "single_frame": True})
    if isinstance(source_frame, VideoClip):
        source_frame = (source_frame.frames[0], source_frame.keypoints[0], source_frame.label)
    return transfer(source_frame, driving, models, cfg, label)


def source_latent_clip(codec: LatentCodec, source: VideoClip, single_frame=False, frames=None):
    """Latents used by the fine-tuning source branch.

    In single-frame mode the first latent is replicated ``frames`` times.
    """
    if single_frame:
        z0 = codec.transform(source.frames[0])
        n = frames or len(source)
        kps = [source.keypoints[0]] * n if source.keypoints else None
        return LatentClip(np.repeat(z0, n, axis=0), source.size, kps, source.label)
    return codec.encode_clip(source)


def run_pair(source: VideoClip, driving: VideoClip, codec, lofnet, base,
             ft_cfg: Optional[FinetuneConfig] = None, cfg: Optional[TransferConfig] = None):
    """Fine-tune on one (source, driving) pair, then transfer. Returns (result, adapter)."""
    ft_cfg = ft_cfg or FinetuneConfig()
    cfg = cfg or TransferConfig()
    label = ft_cfg.label or source.label
    src_lat = source_latent_clip(codec, source, cfg.single_frame, len(driving))
    warped = None
    if ft_cfg.use_warp_branch:
        warped = build_warped_clip(src_lat.latents[0], source.keypoints[0], driving.keypoints, lofnet)
    adapter = finetune(base, src_lat, warped, label, ft_cfg)
    models = TransferModels(codec, lofnet, base, adapter)
    run = single_frame_transfer if cfg.single_frame else transfer
    result = run(source, driving, models, cfg, label)
    result.metadata["finetune"] = {k: list(v) if isinstance(v, tuple) else v
                                   for k, v in asdict(ft_cfg).items()}
    return result, adapter


def _to_uint8(frames):
    return np.round(np.clip(frames, 0, 1) * 255.0).astype(np.uint8)


def frame_grid(driving: VideoClip, output: VideoClip):
    """Two-row image: driving frames on top, output frames below."""
    top = np.concatenate(list(_to_uint8(driving.frames)), axis=1)
    bottom = np.concatenate(list(_to_uint8(output.frames)), axis=1)
    if top.shape != bottom.shape:
        raise ValidationError("driving and output clips differ in frame count or size")
    return np.concatenate([top, bottom], axis=0)


def write_run(result: TransferResult, driving: VideoClip, run_dir, config=None, metrics=None):
    """Write frames/, manifest.json, output.gif, grid.png and metrics.json under ``run_dir``.

    ``manifest.json`` is the clip sidecar (readable by ``load_clip(..., sidecar="manifest.json")``)
    extended with the run configuration, seeds and model hashes.
    """
    run_dir = Path(run_dir)
    manifest = {"run": {**result.metadata, "resolved_config": config or {}}}
    save_clip(result.output, run_dir, sidecar="manifest.json", extra=manifest)
    frames = [Image.fromarray(f) for f in _to_uint8(result.output.frames)]
    frames[0].save(run_dir / "output.gif", save_all=True, append_images=frames[1:],
                   duration=int(round(1000 / result.output.fps)), loop=0)
    Image.fromarray(frame_grid(driving, result.output)).save(run_dir / "grid.png")
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(metrics or {}, fh, indent=1, sort_keys=True)
    return run_dir
