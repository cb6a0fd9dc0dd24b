"""Toy latent video diffusion: schedule, forward noising, DDIM sampling/inversion and a video UNet.

Latent clips are handled as tensors of shape (B, F, C, h, w). The clean latent
is identified with the state at timestep 0, so a DDIM trajectory runs over an
integer grid ``0 = t_0 < t_1 < ... < t_S`` in both directions.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from ._validation import CheckpointError, ValidationError, check_fitted, check_positive_int

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def validate(self):
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValidationError("betas must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ValidationError("alpha_bars must be strictly decreasing")
        return self

    @classmethod
    def from_alpha_bars(cls, alpha_bars):
        """Build a schedule from cumulative products; no monotonicity check (test schedules)."""
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        alphas = alpha_bars / np.concatenate([[1.0], alpha_bars[:-1]])
        return cls(1.0 - alphas, alphas, alpha_bars)


def make_schedule(T=1000, beta_start=1e-4, beta_end=1e-2) -> NoiseSchedule:
    """Linear beta schedule with derived alphas and cumulative alpha products.

    The default end value keeps sqrt(alpha_bar) near 0.1 across t in [850, 1000),
    so latents noised that far still carry coarse layout.
    """
    check_positive_int(T, "T", minimum=2)
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas)).validate()


def _check_t(t, schedule, name="t"):
    arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
    if np.any(arr < 0) or np.any(arr >= schedule.T):
        raise ValidationError(f"{name} must lie in [0, {schedule.T}), got {arr.tolist()}")


def _abar(schedule, t, like):
    """alpha_bar at t, broadcastable against ``like`` (batch on the leading axis)."""
    if torch.is_tensor(like):
        ab = torch.as_tensor(schedule.alpha_bars, dtype=like.dtype)[torch.as_tensor(t)]
        return ab.reshape(ab.shape + (1,) * (like.dim() - ab.dim()))
    ab = np.asarray(schedule.alpha_bars[np.asarray(t)], dtype=like.dtype if hasattr(like, "dtype") else float)
    return ab.reshape(ab.shape + (1,) * (np.ndim(like) - ab.ndim))


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is an int or one step per batch item."""
    if tuple(np.shape(eps)) != tuple(np.shape(z0)):
        raise ValidationError(f"eps shape {tuple(np.shape(eps))} differs from z0 shape {tuple(np.shape(z0))}")
    _check_t(t, schedule)
    ab = _abar(schedule, t, z0)
    if torch.is_tensor(z0):
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps


def sample_timesteps(t_min, t_max, n, generator=None):
    """Uniform integer timesteps in [t_min, t_max)."""
    if not t_min < t_max:
        raise ValidationError(f"empty timestep range [{t_min}, {t_max})")
    return torch.randint(int(t_min), int(t_max), (n,), generator=generator)


def denoise_loss(model, z0_clip, c, t_min, t_max, schedule: NoiseSchedule, generator=None,
                 return_t=False):
    """Monte-Carlo estimate of E ||eps - eps_theta(q_sample(z0, t, eps), t, c)||^2.

    ``z0_clip`` is (B, F, C, h, w); one t per batch item is drawn from
    [t_min, t_max) and eps is standard normal.
    """
    if not (0 <= t_min < t_max <= schedule.T):
        raise ValidationError(f"timestep range [{t_min}, {t_max}) must be non-empty and inside [0, {schedule.T}]")
    t = sample_timesteps(t_min, t_max, z0_clip.shape[0], generator)
    eps = torch.randn(z0_clip.shape, generator=generator, dtype=z0_clip.dtype)
    z_t = q_sample(z0_clip, t, eps, schedule)
    loss = torch.mean((eps - model(z_t, t, c)) ** 2)
    return (loss, t) if return_t else loss


def _ddim_move(z, a_from, a_to, eps):
    z0_hat = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * z0_hat + math.sqrt(1.0 - a_to) * eps


def ddim_step(z_t, t, t_prev, eps_pred, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from t down to t_prev."""
    if not t_prev < t:
        raise ValidationError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    _check_t(t, schedule)
    _check_t(t_prev, schedule, "t_prev")
    return _ddim_move(z_t, float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_prev]), eps_pred)


def ddim_inverse_step(z_t, t, t_next, eps_pred, schedule: NoiseSchedule):
    """The DDIM update run upwards from t to t_next, reusing eps predicted at t."""
    if not t_next > t:
        raise ValidationError(f"inverse step needs t_next > t, got t={t}, t_next={t_next}")
    _check_t(t, schedule)
    _check_t(t_next, schedule, "t_next")
    return _ddim_move(z_t, float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_next]), eps_pred)


def timestep_grid(t_end, steps):
    """Ascending integer grid of ``steps + 1`` points from 0 to ``t_end``."""
    check_positive_int(steps, "steps")
    if steps > t_end:
        raise ValidationError(f"steps={steps} exceeds the {t_end} available timesteps")
    grid = np.round(np.linspace(0, t_end, steps + 1)).astype(int)
    return [int(v) for v in grid]


def _batched_t(t, z):
    return torch.full((z.shape[0],), int(t), dtype=torch.long)


@torch.no_grad()
def ddim_sample(z_start, c, model, schedule: NoiseSchedule, steps=50, t_start=None, callback=None):
    """Integrate the DDIM sampler from ``t_start`` (default T-1) down to t = 0."""
    t_start = schedule.T - 1 if t_start is None else int(t_start)
    _check_t(t_start, schedule, "t_start")
    if steps > schedule.T:
        raise ValidationError(f"steps={steps} exceeds T={schedule.T}")
    grid = timestep_grid(t_start, steps)[::-1]
    z = z_start
    for t, t_prev in zip(grid[:-1], grid[1:]):
        eps = model(z, _batched_t(t, z), c)
        z = ddim_step(z, t, t_prev, eps, schedule)
        if callback is not None:
            callback(t_prev, z)
    return z


@torch.no_grad()
def ddim_invert(z0, c, model, schedule: NoiseSchedule, steps=50, t_target=980, callback=None):
    """Run the DDIM recursion upwards from the clean latent to ``t_target``."""
    _check_t(t_target, schedule, "t_target")
    grid = timestep_grid(int(t_target), steps)
    z = z0
    for t, t_next in zip(grid[:-1], grid[1:]):
        eps = model(z, _batched_t(t, z), c)
        z = ddim_inverse_step(z, t, t_next, eps, schedule)
        if callback is not None:
            callback(t_next, z)
    return z


# -- network ----------------------------------------------------------------

def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class InflatedConv(nn.Conv2d):
    """A 1x3x3 pseudo-3D convolution: a 2D kernel applied to every frame independently."""

    def forward(self, x):
        b, f = x.shape[:2]
        y = super().forward(x.reshape(b * f, *x.shape[2:]))
        return y.reshape(b, f, *y.shape[1:])


class Attention(nn.Module):
    """Multi-head attention with explicit q/k/v/out projections (the LoRA targets)."""

    def __init__(self, dim, context_dim=None, heads=4):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        n, lq, d = x.shape
        h = self.heads
        q = self.to_q(x).reshape(n, lq, h, d // h).transpose(1, 2)
        k = self.to_k(context).reshape(n, context.shape[1], h, d // h).transpose(1, 2)
        v = self.to_v(context).reshape(n, context.shape[1], h, d // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(n, lq, d))


class TransformerBlock(nn.Module):
    """Spatio-temporal self-attention, cross-attention, temporal attention and feed-forward.

    The self-attention of frame i attends to the tokens of frames 0 and i;
    the temporal layer attends across frames at each spatial location.
    """

    def __init__(self, dim, context_dim, heads=4):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, context_dim, heads=heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_temp = Attention(dim, heads=heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, f, c, h, w = x.shape
        res = x
        y = self.norm_in(x.reshape(b * f, c, h, w)).reshape(b, f, c, h * w).transpose(2, 3)
        y = self.proj_in(y)  # (b, f, hw, c)
        tokens = self.norm1(y)
        first = tokens[:, :1].expand(b, f, h * w, c)
        kv = torch.cat([first, tokens], dim=2).reshape(b * f, 2 * h * w, c)
        y = y + self.attn1(tokens.reshape(b * f, h * w, c), kv).reshape(b, f, h * w, c)
        ctx = context[:, None].expand(b, f, *context.shape[1:]).reshape(b * f, *context.shape[1:])
        y = y + self.attn2(self.norm2(y).reshape(b * f, h * w, c), ctx).reshape(b, f, h * w, c)
        yt = y.transpose(1, 2) + frame_position_embedding(f, c)[None, None]  # (b, hw, f, c)
        yt = self.attn_temp(self.norm_t(yt).reshape(b * h * w, f, c)).reshape(b, h * w, f, c)
        y = y + yt.transpose(1, 2)
        y = y + self.ff(self.norm3(y))
        y = self.proj_out(y).transpose(2, 3).reshape(b, f, c, h, w)
        return res + y


def frame_position_embedding(n_frames, dim):
    return timestep_embedding(torch.arange(n_frames), dim)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = InflatedConv(cin, cout, 3, 1, 1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = InflatedConv(cout, cout, 3, 1, 1)
        self.skip = InflatedConv(cin, cout, 1) if cin != cout else None

    @staticmethod
    def _norm(norm, x):
        b, f = x.shape[:2]
        return norm(x.reshape(b * f, *x.shape[2:])).reshape(x.shape)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self._norm(self.norm1, x)))
        h = h + self.emb(emb)[:, None, :, None, None]
        h = self.conv2(F.silu(self._norm(self.norm2, h)))
        return h + (x if self.skip is None else self.skip(x))


class VideoUNet(nn.Module):
    """Two-level conditional UNet over (B, F, C, h, w) latent clips."""

    def __init__(self, channels=4, width=64, cond_dim=64, context_tokens=4, heads=4):
        super().__init__()
        w = width
        emb_dim = 2 * w
        self.width = w
        self.context_tokens = context_tokens
        self.cond_dim = cond_dim
        self.time_mlp = nn.Sequential(nn.Linear(w, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.context_proj = nn.Linear(cond_dim, context_tokens * cond_dim)
        self.conv_in = InflatedConv(channels, w, 3, 1, 1)
        self.res_d1 = ResBlock(w, w, emb_dim)
        self.attn_d1 = TransformerBlock(w, cond_dim, heads)
        self.down = InflatedConv(w, w, 3, 2, 1)
        self.res_d2 = ResBlock(w, 2 * w, emb_dim)
        self.attn_d2 = TransformerBlock(2 * w, cond_dim, heads)
        self.res_mid = ResBlock(2 * w, 2 * w, emb_dim)
        self.res_u2 = ResBlock(4 * w, 2 * w, emb_dim)
        self.attn_u2 = TransformerBlock(2 * w, cond_dim, heads)
        self.up = InflatedConv(2 * w, w, 3, 1, 1)
        self.res_u1 = ResBlock(2 * w, w, emb_dim)
        self.attn_u1 = TransformerBlock(w, cond_dim, heads)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = InflatedConv(w, channels, 3, 1, 1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, c):
        b, f = z.shape[:2]
        emb = self.time_mlp(timestep_embedding(t, self.width))
        context = self.context_proj(c).reshape(b, self.context_tokens, self.cond_dim)
        h0 = self.conv_in(z)
        h1 = self.attn_d1(self.res_d1(h0, emb), context)
        d = self.down(h1)
        h2 = self.attn_d2(self.res_d2(d, emb), context)
        m = self.res_mid(h2, emb)
        u2 = self.attn_u2(self.res_u2(torch.cat([m, h2], dim=2), emb), context)
        up = F.interpolate(u2.reshape(b * f, *u2.shape[2:]), size=h1.shape[-2:], mode="nearest")
        up = self.up(up.reshape(b, f, *up.shape[1:]))
        u1 = self.attn_u1(self.res_u1(torch.cat([up, h1], dim=2), emb), context)
        out = F.silu(ResBlock._norm(self.norm_out, u1))
        return self.conv_out(out)


class ConditionalDenoiser(nn.Module):
    """eps_theta(z, t, c) plus the learned class-embedding table producing c."""

    def __init__(self, n_classes, channels=4, width=64, cond_dim=64, context_tokens=4, heads=4):
        super().__init__()
        self.class_embedding = nn.Embedding(n_classes, cond_dim)
        self.unet = VideoUNet(channels, width, cond_dim, context_tokens, heads)

    def forward(self, z, t, c):
        return self.unet(z, t, c)


def state_fingerprint(module):
    """Stable hash of a module's parameters and buffers."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


def to_clip_tensor(latents):
    """(F, h, w, C) or (B, F, h, w, C) numpy -> (B, F, C, h, w) tensor."""
    arr = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    if arr.dim() == 4:
        arr = arr[None]
    return arr.permute(0, 1, 4, 2, 3).contiguous()


def from_clip_tensor(z):
    """(B, F, C, h, w) tensor -> (B, F, h, w, C) numpy."""
    return z.detach().permute(0, 1, 3, 4, 2).contiguous().numpy()


class VideoDenoiser(BaseEstimator):
    """Base latent video diffusion model trained from scratch over the full timestep range.

    ``fit`` takes LatentClips (optionally with ``labels``; defaults to each
    clip's label) and trains eps-prediction on random F-frame windows.
    """

    def __init__(self, T=1000, beta_start=1e-4, beta_end=1e-2, frames=10, width=64, cond_dim=64,
                 context_tokens=4, heads=4, iterations=3000, batch_size=4, lr=5e-4, seed=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.frames = frames
        self.width = width
        self.cond_dim = cond_dim
        self.context_tokens = context_tokens
        self.heads = heads
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    @property
    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def _init_model(self, classes):
        self.classes_ = list(classes)
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = ConditionalDenoiser(len(self.classes_), 4, self.width, self.cond_dim,
                                              self.context_tokens, self.heads)
        self.model_.eval()
        return self.model_

    def class_index(self, label):
        check_fitted(self, "model_")
        if label not in self.classes_:
            raise ValidationError(f"unknown class label {label!r}; known: {self.classes_}")
        return self.classes_.index(label)

    def condition(self, label, batch=1):
        """Condition vector(s) c for ``label``: rows of the learned class table, (batch, cond_dim)."""
        idx = torch.full((batch,), self.class_index(label), dtype=torch.long)
        return self.model_.class_embedding(idx)

    def _windows(self, clips, labels, rng, n):
        zs, ys = [], []
        for _ in range(n):
            i = int(rng.integers(len(clips)))
            lat = clips[i].latents
            start = int(rng.integers(len(lat) - self.frames + 1))
            zs.append(lat[start:start + self.frames])
            ys.append(self.classes_.index(labels[i]))
        return to_clip_tensor(np.stack(zs)), torch.tensor(ys)

    def _loss(self, z0, y, generator, t_min=0, t_max=None):
        c = self.model_.class_embedding(y)
        return denoise_loss(self.model_, z0, c, t_min, t_max or self.T, self.schedule, generator)

    def fit(self, X, labels=None):
        clips = list(X)
        if not clips:
            raise ValidationError("cannot train the denoiser on an empty dataset")
        labels = [c.label for c in clips] if labels is None else list(labels)
        if len(labels) != len(clips) or any(lbl is None for lbl in labels):
            raise ValidationError("every clip needs a class label")
        for i, clip in enumerate(clips):
            if len(clip) < self.frames:
                raise ValidationError(f"clip {i} has {len(clip)} frames, need >= {self.frames}")
        self.grid_ = tuple(clips[0].grid)
        model = self._init_model(sorted(set(labels)))
        rng = np.random.default_rng(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        eval_z, eval_y = self._windows(clips, labels, np.random.default_rng(self.seed + 1), 16)

        def eval_loss():
            with torch.no_grad():
                return float(self._loss(eval_z, eval_y, torch.Generator().manual_seed(12345)))

        self.initial_loss_ = eval_loss()
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        history = []
        model.train()
        for step in range(self.iterations):
            z0, y = self._windows(clips, labels, rng, self.batch_size)
            loss = self._loss(z0, y, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
            if step % 250 == 0:
                logger.info("denoiser step %d loss=%.4f", step, loss.item())
        model.eval()
        self.history_ = history
        self.final_loss_ = eval_loss()
        return self

    def eps_model(self):
        check_fitted(self, "model_")
        return self.model_

    def _prepare(self, latents, label):
        z = latents if torch.is_tensor(latents) else to_clip_tensor(latents)
        return z, self.condition(label, z.shape[0])

    def sample(self, z_start, label, steps=50, t_start=None, model=None):
        """DDIM-sample from a (F, h, w, 4) noisy clip; returns the clean clip (F, h, w, 4)."""
        z, c = self._prepare(z_start, label)
        with torch.no_grad():
            out = ddim_sample(z, c, model or self.model_, self.schedule, steps, t_start)
        return from_clip_tensor(out)[0]

    def invert(self, z0, label, steps=50, t_target=980, model=None):
        """DDIM-invert a clean (F, h, w, 4) clip to ``t_target``."""
        z, c = self._prepare(z0, label)
        with torch.no_grad():
            out = ddim_invert(z, c, model or self.model_, self.schedule, steps, t_target)
        return from_clip_tensor(out)[0]

    def fingerprint(self):
        check_fitted(self, "model_")
        return state_fingerprint(self.model_)

    def save(self, path):
        check_fitted(self, "model_")
        torch.save({
            "kind": "denoiser", "version": CHECKPOINT_VERSION, "params": self.get_params(),
            "contract": {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                         "frames": self.frames, "grid": list(getattr(self, "grid_", (8, 8))),
                         "cond_dim": self.cond_dim},
            "classes": self.classes_, "state_dict": self.model_.state_dict(),
            "history": getattr(self, "history_", []),
            "initial_loss": getattr(self, "initial_loss_", None),
            "final_loss": getattr(self, "final_loss_", None),
        }, path)
        return path

    @classmethod
    def load(cls, path, grid=None, cond_dim=None, T=None):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "denoiser" or ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} denoiser checkpoint")
        contract = ckpt["contract"]
        if grid is not None and tuple(contract["grid"]) != tuple(grid):
            raise CheckpointError(f"{path}: denoiser latent grid {contract['grid']} != requested {tuple(grid)}")
        if cond_dim is not None and contract["cond_dim"] != cond_dim:
            raise CheckpointError(f"{path}: condition dimension {contract['cond_dim']} != {cond_dim}")
        if T is not None and contract["T"] != T:
            raise CheckpointError(f"{path}: schedule length {contract['T']} != {T}")
        den = cls(**ckpt["params"])
        den._init_model(ckpt["classes"]).load_state_dict(ckpt["state_dict"])
        den.grid_ = tuple(contract["grid"])
        den.history_ = ckpt.get("history", [])
        den.initial_loss_ = ckpt.get("initial_loss")
        den.final_loss_ = ckpt.get("final_loss")
        return den

    def copy(self):
        return copy.deepcopy(self)


def train_base(dataset, labels=None, config=None) -> VideoDenoiser:
    """Fit a :class:`VideoDenoiser` on LatentClips over the full timestep range."""
    return VideoDenoiser(**dict(config or {})).fit(dataset, labels)
