"""Two-noise-range LoRA fine-tuning of the base denoiser.

The source clip is trained across the whole timestep range while the warped
intermediate clip (the source's first latent warped along the retargeted
driving motion) is trained only at high noise. The total objective is the
unweighted sum of the two denoising losses.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from ._validation import CheckpointError, ValidationError, check_fitted, check_positive_int
from .codec import LatentClip
from .diffusion import Attention, VideoDenoiser, denoise_loss, to_clip_tensor
from .flow import DenseFlow, LatentFlowNet, adapt_keypoints, stack_keypoints, warp_tensor

logger = logging.getLogger(__name__)

LORA_TARGETS = ("to_q", "to_k", "to_v", "to_out")
CHECKPOINT_VERSION = 1


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r update B @ A scaled by alpha / r."""

    def __init__(self, base: nn.Linear, rank=4, alpha=4.0):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ValidationError(
                f"rank {rank} exceeds layer dimension {min(base.in_features, base.out_features)}")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + (x @ self.lora_A.t() @ self.lora_B.t()) * self.scaling


def attach_lora(base: nn.Module, rank=4, alpha=4.0, seed=0, targets=LORA_TARGETS):
    """Copy ``base`` and wrap every attention projection in a :class:`LoRALinear`.

    Returns the adapted module; every non-LoRA parameter is frozen and the
    original ``base`` is never touched.
    """
    check_positive_int(rank, "rank")
    adapted = copy.deepcopy(base)
    for p in adapted.parameters():
        p.requires_grad_(False)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for name, module in list(adapted.named_modules()):
            if isinstance(module, Attention):
                for target in targets:
                    setattr(module, target, LoRALinear(getattr(module, target), rank, alpha))
    adapted.eval()
    return adapted


def lora_parameters(module):
    return {name: p for name, p in module.named_parameters() if "lora_" in name}


@dataclass
class LoRAAdapter:
    """Trained low-rank deltas, keyed by parameter name, with the base they belong to."""

    rank: int
    alpha: float
    weights: dict
    base_fingerprint: str
    config_hash: str = ""
    loss_log: list = field(default_factory=list)
    warp_t_draws: list = field(default_factory=list)
    source_t_draws: list = field(default_factory=list)

    @property
    def target_layers(self):
        return sorted({name.rsplit(".", 1)[0] for name in self.weights})

    def apply_to(self, base: VideoDenoiser) -> nn.Module:
        """Adapted copy of ``base``'s network carrying these deltas."""
        if base.fingerprint() != self.base_fingerprint:
            raise CheckpointError("adapter was trained on a different base denoiser")
        adapted = attach_lora(base.model_, self.rank, self.alpha)
        params = lora_parameters(adapted)
        if set(params) != set(self.weights):
            raise CheckpointError("adapter layers do not match the base network's attention layers")
        with torch.no_grad():
            for name, value in self.weights.items():
                params[name].copy_(value)
        return adapted

    def save(self, path):
        torch.save({"kind": "lora_adapter", "version": CHECKPOINT_VERSION, "rank": self.rank,
                    "alpha": self.alpha, "targets": self.target_layers, "weights": self.weights,
                    "base_fingerprint": self.base_fingerprint, "config_hash": self.config_hash,
                    "loss_log": self.loss_log}, path)
        return path

    @classmethod
    def load(cls, path, base: Optional[VideoDenoiser] = None):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "lora_adapter" or ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} LoRA adapter")
        if base is not None and base.fingerprint() != ckpt["base_fingerprint"]:
            raise CheckpointError(f"{path}: adapter was trained on a different base denoiser")
        return cls(ckpt["rank"], ckpt["alpha"], ckpt["weights"], ckpt["base_fingerprint"],
                   ckpt["config_hash"], ckpt.get("loss_log", []))


class AblationVariant(str, enum.Enum):
    """Warp-branch settings compared in the noise-range ablation."""

    FULL_RANGE = "full-range"
    MID = "400-1000"
    HIGH = "800-1000"
    NONE = "none"

    @property
    def t_range_warp(self):
        return {"full-range": (0, 1000), "400-1000": (400, 1000), "800-1000": (800, 1000),
                "none": None}[self.value]


@dataclass
class FinetuneConfig:
    iterations: int = 250
    lr: float = 5e-4
    t_range_source: tuple = (0, 1000)
    t_range_warp: tuple = (850, 1000)
    label: Optional[str] = None
    seed: int = 0
    rank: int = 4
    alpha: float = 4.0
    batch_size: int = 1
    use_warp_branch: bool = True

    @classmethod
    def glyph(cls, **kwargs):
        """Preset for letter-like sources: the warp branch only sees t in [900, 1000)."""
        return cls(t_range_warp=(900, 1000), **kwargs)

    def validate(self, T):
        check_positive_int(self.iterations, "iterations", minimum=0)
        for name in ("t_range_source", "t_range_warp"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi <= T):
                raise ValidationError(f"{name}={(lo, hi)} must satisfy 0 <= lo < hi <= {T}")
        return self

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


class WarpedClip:
    """Latents (F, h, w, 4) of the source's first frame warped along the retargeted motion.

    Reads of ``latents`` are counted so that runs which must not use the
    warp branch can prove it.
    """

    def __init__(self, latents, adapted_keypoints=None, flows=None):
        self._latents = np.asarray(latents, dtype=np.float32)
        if self._latents.ndim != 4 or self._latents.shape[-1] != 4:
            raise ValidationError(f"warped latents must be (F, h, w, 4), got {self._latents.shape}")
        self.adapted_keypoints = adapted_keypoints
        self.flows = flows
        self.access_count = 0

    @property
    def latents(self):
        self.access_count += 1
        return self._latents

    def __len__(self):
        return len(self._latents)


def build_warped_clip(z_src_frame0, kp_src_frame0, kp_drv_seq, lofnet: LatentFlowNet) -> WarpedClip:
    """Warp the source frame-0 latent once per driving frame along the adapted keypoints."""
    z0 = np.asarray(z_src_frame0, dtype=np.float32)
    adapted = adapt_keypoints(kp_src_frame0, kp_drv_seq)
    z = torch.from_numpy(z0).permute(2, 0, 1)[None]
    pos_s, jac_s = stack_keypoints([kp_src_frame0] * len(adapted))
    pos_a, jac_a = stack_keypoints(adapted)
    with torch.no_grad():
        flow, _ = lofnet.flow_tensor(z.expand(len(adapted), *z.shape[1:]), pos_s, jac_s, pos_a, jac_a)
        warped = warp_tensor(z.expand(len(adapted), *z.shape[1:]), flow)
    flows = [DenseFlow(f) for f in flow.numpy()]
    return WarpedClip(warped.permute(0, 2, 3, 1).numpy(), adapted, flows)


class DisentangledFinetuner(BaseEstimator):
    """Fit a LoRA adapter for one (source, driving) pair on top of a frozen ``base``.

    ``fit(source, warped, label)`` runs ``iterations`` Adam steps on
    D_s + D_w where D_s denoises the source clip with t in ``t_range_source``
    and D_w denoises the warped clip with t in ``t_range_warp``. With
    ``use_warp_branch=False`` only D_s is used and the warped clip is not read.
    """

    def __init__(self, base=None, iterations=250, lr=5e-4, t_range_source=(0, 1000),
                 t_range_warp=(850, 1000), rank=4, alpha=4.0, batch_size=1, use_warp_branch=True,
                 seed=0):
        self.base = base
        self.iterations = iterations
        self.lr = lr
        self.t_range_source = t_range_source
        self.t_range_warp = t_range_warp
        self.rank = rank
        self.alpha = alpha
        self.batch_size = batch_size
        self.use_warp_branch = use_warp_branch
        self.seed = seed

    def config(self, label=None):
        return FinetuneConfig(self.iterations, self.lr, tuple(self.t_range_source),
                              tuple(self.t_range_warp), label, self.seed, self.rank, self.alpha,
                              self.batch_size, self.use_warp_branch)

    def fit(self, source, warped=None, label=None):
        base = self.base
        if not isinstance(base, VideoDenoiser):
            raise ValidationError("base must be a fitted VideoDenoiser")
        check_fitted(base, "model_")
        cfg = self.config(label).validate(base.T)
        src = source.latents if isinstance(source, LatentClip) else np.asarray(source, np.float32)
        label = label if label is not None else getattr(source, "label", None)
        if label is None:
            raise ValidationError("a class label is needed for the condition vector")
        if self.use_warp_branch:
            if warped is None:
                raise ValidationError("the warp branch is enabled but no warped clip was given")
            warp_lat = warped.latents if isinstance(warped, WarpedClip) else np.asarray(warped, np.float32)
            if warp_lat.shape[1:] != src.shape[1:]:
                raise ValidationError(
                    f"latent geometry mismatch: source {src.shape[1:]} vs warped {warp_lat.shape[1:]}")
            z_warp = to_clip_tensor(warp_lat).expand(self.batch_size, -1, -1, -1, -1)
        z_src = to_clip_tensor(src).expand(self.batch_size, -1, -1, -1, -1)

        fingerprint = base.fingerprint()
        model = attach_lora(base.model_, self.rank, self.alpha, seed=self.seed)
        params = lora_parameters(model)
        frozen = [p for n, p in model.named_parameters() if n not in params]
        opt = torch.optim.Adam(params.values(), lr=self.lr)
        with torch.no_grad():
            c = base.condition(label, self.batch_size)
        schedule = base.schedule
        gen = torch.Generator().manual_seed(self.seed)
        lo_w, hi_w = cfg.t_range_warp
        loss_log, warp_draws, source_draws = [], [], []
        model.train()
        for step in range(self.iterations):
            d_s, t_s = denoise_loss(model, z_src, c, *cfg.t_range_source, schedule, gen, return_t=True)
            source_draws.extend(t_s.tolist())
            total = d_s
            entry = {"step": step, "D_s": d_s.item()}
            if self.use_warp_branch:
                d_w, t_w = denoise_loss(model, z_warp, c, lo_w, hi_w, schedule, gen, return_t=True)
                bad = [t for t in t_w.tolist() if not lo_w <= t < hi_w]
                if bad:
                    raise AssertionError(f"warp-branch timestep {bad[0]} outside [{lo_w}, {hi_w})")
                warp_draws.extend(t_w.tolist())
                total = d_s + d_w
                entry["D_w"] = d_w.item()
            entry["D_loss"] = total.item()
            loss_log.append(entry)
            opt.zero_grad()
            total.backward()
            leaked = [p for p in frozen if p.grad is not None]
            if leaked:
                raise AssertionError(f"{len(leaked)} frozen parameters received gradients")
            opt.step()
        model.eval()
        weights = {n: p.detach().clone() for n, p in params.items()}
        self.adapter_ = LoRAAdapter(self.rank, self.alpha, weights, fingerprint, cfg.digest(),
                                    loss_log, warp_draws, source_draws)
        self.model_ = model
        self.loss_log_ = loss_log
        self.warp_t_draws_ = warp_draws
        return self


def finetune(base: VideoDenoiser, z_src_clip, warped, c, cfg: FinetuneConfig) -> LoRAAdapter:
    """Disentangled fine-tuning; ``c`` is the class label keying the condition table."""
    label = c if c is not None else cfg.label
    tuner = DisentangledFinetuner(base, cfg.iterations, cfg.lr, cfg.t_range_source, cfg.t_range_warp,
                                  cfg.rank, cfg.alpha, cfg.batch_size, cfg.use_warp_branch, cfg.seed)
    return tuner.fit(z_src_clip, warped, label).adapter_


def finetune_ablation_variant(base, z_src_clip, warped, c, cfg: FinetuneConfig,
                              t_range_warp_override=None, use_warp_branch=True) -> LoRAAdapter:
    """Fine-tune with the warp branch's range overridden, or with the branch dropped."""
    cfg = copy.copy(cfg)
    if t_range_warp_override is not None:
        cfg.t_range_warp = tuple(t_range_warp_override)
    cfg.use_warp_branch = bool(use_warp_branch)
    return finetune(base, z_src_clip, warped if use_warp_branch else None, c, cfg)


def variant_config(variant, cfg: Optional[FinetuneConfig] = None) -> FinetuneConfig:
    """FinetuneConfig for one member of the ablation enum."""
    try:
        variant = AblationVariant(variant)
    except ValueError:
        choices = ", ".join(v.value for v in AblationVariant)
        raise ValidationError(f"unknown ablation variant {variant!r}; choose from {choices}") from None
    cfg = copy.copy(cfg) if cfg is not None else FinetuneConfig()
    if variant is AblationVariant.NONE:
        cfg.use_warp_branch = False
    else:
        cfg.t_range_warp = variant.t_range_warp
        cfg.use_warp_branch = True
    return cfg
