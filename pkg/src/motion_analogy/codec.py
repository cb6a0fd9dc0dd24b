"""Convolutional autoencoder mapping RGB frames to 4-channel latents at 1/8 resolution."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn
from torch.nn import functional as F

from ._validation import (CheckpointError, ValidationError, check_fitted, check_frames,
                          check_latent_grid, check_positive_int)
from .synthdata import VideoClip

logger = logging.getLogger(__name__)

DOWNSAMPLE = 8
LATENT_CHANNELS = 4
CHECKPOINT_VERSION = 2


@dataclass
class LatentClip:
    """Per-frame latent grids of one clip, shape (F, h, w, 4)."""

    latents: np.ndarray
    source_size: int
    keypoints: list = None
    label: str = None

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float32)
        side = self.source_size // DOWNSAMPLE
        if self.source_size % DOWNSAMPLE:
            raise ValidationError(f"source_size must be a multiple of {DOWNSAMPLE}")
        check_latent_grid(self.latents, "latents", grid=(side, side), channels=LATENT_CHANNELS)
        if self.latents.ndim != 4:
            raise ValidationError("LatentClip.latents must be (F, h, w, 4)")
        if self.keypoints is not None and len(self.keypoints) != len(self.latents):
            raise ValidationError("keypoints must have one entry per latent frame")

    def __len__(self):
        return len(self.latents)

    @property
    def grid(self):
        return self.latents.shape[1:3]


class _ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.a = nn.Conv2d(width, width, 3, 1, 1)
        self.b = nn.Conv2d(width, width, 3, 1, 1)

    def forward(self, x):
        return x + self.b(F.silu(self.a(F.silu(x))))


class _Autoencoder(nn.Module):
    """Strided-conv encoder; the decoder works at latent resolution and unfolds
    each cell into an 8x8 patch (pixel shuffle), then refines at full resolution."""

    def __init__(self, width=64, refine=16):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w // 2, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(w, w, 4, 2, 1),
            _ResBlock(w), _ResBlock(w), nn.SiLU(),
            nn.Conv2d(w, LATENT_CHANNELS, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, w, 3, 1, 1),
            _ResBlock(w), _ResBlock(w), _ResBlock(w), nn.SiLU(),
            nn.Conv2d(w, refine * DOWNSAMPLE ** 2, 1), nn.PixelShuffle(DOWNSAMPLE), nn.SiLU(),
            nn.Conv2d(refine, refine, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(refine, 3, 3, 1, 1),
        )

    def forward(self, x):
        z = self.encoder(x)
        return self.decoder(z), z


def _collect_frames(data):
    if isinstance(data, VideoClip):
        return data.frames
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], VideoClip):
        return np.concatenate([clip.frames for clip in data])
    return np.asarray(data, dtype=np.float32)


def psnr(x, y):
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


class LatentCodec(BaseEstimator, TransformerMixin):
    """Frame <-> latent autoencoder with a fixed x8 downsampling and 4 latent channels.

    ``transform`` encodes frames (N, H, W, 3) into latents (N, H/8, W/8, 4);
    ``inverse_transform`` decodes and clamps to [0, 1]. Training minimises
    pixel MSE plus a weak penalty that keeps the batch latent second moment
    near one, so downstream diffusion sees roughly unit-scale latents. The
    learning rate follows a one-cycle schedule peaking at ``lr``, with
    gradient-norm clipping at ``clip_norm``.
    """

    def __init__(self, size=64, width=64, iterations=6000, batch_size=32, lr=2e-3,
                 scale_weight=1e-2, clip_norm=1.0, holdout=0.1, seed=0):
        self.size = size
        self.width = width
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.scale_weight = scale_weight
        self.clip_norm = clip_norm
        self.holdout = holdout
        self.seed = seed

    @property
    def latent_size(self):
        return self.size // DOWNSAMPLE

    def _check_config(self):
        check_positive_int(self.size, "size")
        if self.size % DOWNSAMPLE:
            raise ValidationError(f"frame size must be a multiple of {DOWNSAMPLE}, got {self.size}")

    def _init_model(self):
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = _Autoencoder(self.width)
        self.model_.eval()
        return self.model_

    def fit(self, X, y=None):
        """Train on frames (N, H, W, 3) or a list of VideoClip."""
        self._check_config()
        frames = _collect_frames(X)
        if frames.size == 0:
            raise ValidationError("cannot train the codec on an empty dataset")
        frames = check_frames(frames, "training frames", size=self.size)
        check_positive_int(self.iterations, "iterations", minimum=0)
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(frames))
        n_hold = int(round(self.holdout * len(frames)))
        if len(frames) - n_hold < 1:
            n_hold = 0
        train = torch.from_numpy(frames[order[n_hold:]]).permute(0, 3, 1, 2).contiguous()
        held = torch.from_numpy(frames[order[:n_hold]]).permute(0, 3, 1, 2).contiguous()
        model = self._init_model()
        baseline = self._eval_mse(held) if n_hold else None
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        sched = None
        if self.iterations > 1:
            sched = torch.optim.lr_scheduler.OneCycleLR(opt, self.lr, total_steps=self.iterations)
        gen = torch.Generator().manual_seed(self.seed)
        history = []
        model.train()
        for step in range(self.iterations):
            idx = torch.randint(len(train), (min(self.batch_size, len(train)),), generator=gen)
            x = train[idx]
            recon, z = model(x)
            rec_loss = torch.mean((recon - x) ** 2)
            loss = rec_loss + self.scale_weight * (z.pow(2).mean() - 1.0) ** 2
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), self.clip_norm)
            opt.step()
            if sched is not None:
                sched.step()
            history.append(rec_loss.item())
            if step % 250 == 0:
                logger.info("codec step %d rec_mse=%.5f", step, rec_loss.item())
        model.eval()
        self.history_ = history
        self.heldout_baseline_mse_ = baseline
        self.heldout_mse_ = self._eval_mse(held) if n_hold else None
        self.heldout_frames_ = n_hold
        return self

    @torch.no_grad()
    def _eval_mse(self, x):
        total = 0.0
        for chunk in torch.split(x, 128):
            recon, _ = self.model_(chunk)
            total += float(torch.sum((recon.clamp(0, 1) - chunk) ** 2))
        return total / x.numel()

    @torch.no_grad()
    def transform(self, X):
        """Encode frames (N, H, W, 3) or (H, W, 3) into latents (N, h, w, 4)."""
        if not hasattr(self, "model_"):
            self._init_model()
        frames = check_frames(X, "frames", size=self.size)
        x = torch.from_numpy(frames).permute(0, 3, 1, 2)
        z = torch.cat([self.model_.encoder(c) for c in torch.split(x, 128)])
        return z.permute(0, 2, 3, 1).contiguous().numpy()

    @torch.no_grad()
    def inverse_transform(self, Z):
        """Decode latents (N, h, w, 4) into frames clamped to [0, 1]."""
        if not hasattr(self, "model_"):
            self._init_model()
        latents = check_latent_grid(Z, "latents", grid=(self.latent_size, self.latent_size))
        z = torch.from_numpy(latents).permute(0, 3, 1, 2)
        x = torch.cat([self.model_.decoder(c) for c in torch.split(z, 128)])
        return x.clamp(0, 1).permute(0, 2, 3, 1).contiguous().numpy()

    # tensor-level helpers used by the other stages; (N, 4, h, w) layout
    def encode_tensor(self, x):
        check_fitted(self, "model_")
        return self.model_.encoder(x)

    def decode_tensor(self, z):
        check_fitted(self, "model_")
        return self.model_.decoder(z).clamp(0, 1)

    def encode_clip(self, clip: VideoClip) -> LatentClip:
        return LatentClip(self.transform(clip.frames), clip.size, keypoints=clip.keypoints,
                          label=clip.label)

    def decode_clip(self, latent_clip: LatentClip, fps=8.0) -> VideoClip:
        return VideoClip(self.inverse_transform(latent_clip.latents), fps=fps,
                         keypoints=latent_clip.keypoints, label=latent_clip.label)

    def save(self, path):
        check_fitted(self, "model_")
        torch.save({
            "kind": "latent_codec",
            "version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "contract": {"size": self.size, "h": self.latent_size, "w": self.latent_size,
                         "channels": LATENT_CHANNELS},
            "state_dict": self.model_.state_dict(),
            "history": getattr(self, "history_", []),
            "heldout_mse": getattr(self, "heldout_mse_", None),
            "heldout_baseline_mse": getattr(self, "heldout_baseline_mse_", None),
        }, path)
        return path

    @classmethod
    def load(cls, path, size=None):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "latent_codec" or ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} latent codec checkpoint")
        contract = ckpt["contract"]
        if size is not None and contract["size"] != size:
            raise CheckpointError(
                f"{path}: codec trained for {contract['size']}px frames, requested {size}px")
        if contract["channels"] != LATENT_CHANNELS or contract["h"] * DOWNSAMPLE != contract["size"]:
            raise CheckpointError(f"{path}: codec contract {contract} violates the x8/4-channel layout")
        codec = cls(**ckpt["params"])
        codec._init_model().load_state_dict(ckpt["state_dict"])
        codec.history_ = ckpt.get("history", [])
        codec.heldout_mse_ = ckpt.get("heldout_mse")
        codec.heldout_baseline_mse_ = ckpt.get("heldout_baseline_mse")
        return codec

    def copy(self):
        return copy.deepcopy(self)


def train_codec(dataset, config=None) -> LatentCodec:
    """Fit a :class:`LatentCodec` on a list of clips; ``config`` holds estimator params."""
    if not dataset:
        raise ValidationError("cannot train the codec on an empty dataset")
    params = dict(config or {})
    params.setdefault("size", dataset[0].size)
    return LatentCodec(**params).fit(dataset)


def encode(frame, params: LatentCodec):
    """Encode one (H, W, 3) frame into an (h, w, 4) latent."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3:
        raise ValidationError(f"encode expects one (H, W, 3) frame, got shape {frame.shape}")
    return params.transform(frame)[0]


def decode(latent, params: LatentCodec):
    """Decode one (h, w, 4) latent into an (H, W, 3) frame in [0, 1]."""
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim != 3:
        raise ValidationError(f"decode expects one (h, w, 4) latent, got shape {latent.shape}")
    return params.inverse_transform(latent)[0]
