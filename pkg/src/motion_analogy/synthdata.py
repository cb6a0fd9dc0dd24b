"""Procedural articulated sprites with oracle keypoints, plus clip directory I/O.

Sprites are small trees of capsule-shaped bones. A pose is a root translation
plus one angle offset per bone; keypoints are fixed points on bones and their
jacobians are the local rotation of the owning bone relative to its rest pose.
Keypoint coordinates use the normalized ``[-1, 1]`` convention with pixel
centres at ``2 * (i + 0.5) / size - 1``.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ._validation import ClipIOError, ValidationError, check_positive_int

BACKGROUND = (0.92, 0.92, 0.90)
BODY_SHAPES = ("quadruped", "biped", "glyph", "flag")
PRESETS = ("walk", "run", "jump", "wave", "idle")
MAX_KEYPOINTS = 10


@dataclass(frozen=True)
class Bone:
    name: str
    parent: int  # -1: attached to the root, centred on it
    anchor: float  # fraction along the parent bone
    rest_angle: float  # relative to the parent's world angle
    width: float  # relative to the reference size of 64 px
    color: int
    layer: int
    role: str
    length_index: int


# Keypoints are (bone index, fraction along bone), in a fixed order so that
# choosing K < 10 takes a prefix.
_TEMPLATES = {
    "quadruped": dict(
        lengths=(20.0, 8.0, 7.0, 10.0, 10.0, 7.0),
        bones=(
            Bone("torso", -1, 0.5, 0.0, 9.0, 0, 2, "torso", 0),
            Bone("neck", 0, 1.0, -1.0, 5.0, 0, 3, "neck", 1),
            Bone("head", 1, 1.0, 1.0, 6.0, 1, 4, "head", 2),
            Bone("front_leg_far", 0, 0.85, math.pi / 2, 4.0, 2, 0, "front_far", 3),
            Bone("hind_leg_far", 0, 0.15, math.pi / 2, 4.0, 2, 0, "hind_far", 4),
            Bone("front_leg_near", 0, 0.85, math.pi / 2, 4.0, 1, 3, "front_near", 3),
            Bone("hind_leg_near", 0, 0.15, math.pi / 2, 4.0, 1, 3, "hind_near", 4),
            Bone("tail", 0, 0.0, math.pi + 0.6, 3.0, 2, 1, "tail", 5),
        ),
        keypoints=((0, 0.5), (0, 1.0), (0, 0.0), (2, 1.0), (5, 1.0),
                   (6, 1.0), (3, 1.0), (4, 1.0), (7, 1.0), (1, 1.0)),
    ),
    "biped": dict(
        lengths=(14.0, 6.0, 10.0, 12.0),
        bones=(
            Bone("torso", -1, 0.5, -math.pi / 2, 7.0, 0, 2, "torso", 0),
            Bone("head", 0, 1.0, 0.0, 8.0, 1, 3, "head", 1),
            Bone("arm_far", 0, 0.9, math.pi - 0.3, 3.0, 2, 0, "arm_far", 2),
            Bone("leg_far", 0, 0.0, math.pi, 4.0, 2, 0, "hind_far", 3),
            Bone("leg_near", 0, 0.0, math.pi, 4.0, 1, 3, "hind_near", 3),
            Bone("arm_near", 0, 0.9, math.pi + 0.3, 3.0, 1, 4, "arm_near", 2),
        ),
        keypoints=((0, 0.5), (0, 1.0), (0, 0.0), (1, 1.0), (5, 1.0),
                   (4, 1.0), (2, 1.0), (3, 1.0), (4, 0.5), (5, 0.5)),
    ),
    "glyph": dict(
        lengths=(16.0, 10.0, 8.0),
        bones=(
            Bone("stem", -1, 0.5, -math.pi / 2, 5.0, 0, 1, "torso", 0),
            Bone("arm_left", 0, 1.0, -0.6, 5.0, 0, 2, "arm_far", 1),
            Bone("arm_right", 0, 1.0, 0.6, 5.0, 0, 2, "arm_near", 1),
            Bone("serif_left", 0, 0.0, -math.pi / 2, 4.0, 1, 0, "hind_far", 2),
            Bone("serif_right", 0, 0.0, math.pi / 2, 4.0, 1, 0, "hind_near", 2),
        ),
        keypoints=((0, 0.5), (0, 1.0), (0, 0.0), (1, 1.0), (2, 1.0),
                   (3, 1.0), (4, 1.0), (1, 0.5), (2, 0.5), (3, 0.5)),
    ),
    "flag": dict(
        lengths=(26.0, 7.0),
        bones=(
            Bone("pole", -1, 0.5, -math.pi / 2, 2.5, 1, 0, "torso", 0),
            Bone("cloth_1", 0, 1.0, math.pi / 2, 12.0, 0, 1, "cloth_1", 1),
            Bone("cloth_2", 1, 1.0, 0.0, 12.0, 0, 2, "cloth_2", 1),
            Bone("cloth_3", 2, 1.0, 0.0, 12.0, 2, 3, "cloth_3", 1),
        ),
        keypoints=((0, 0.5), (0, 1.0), (0, 0.0), (1, 1.0), (2, 1.0),
                   (3, 1.0), (1, 0.5), (2, 0.5), (3, 0.5), (0, 0.75)),
    ),
}

# Named sprite classes: the synthetic stand-in for object categories / prompts.
SPRITE_CLASSES = {
    "turtle": dict(body_shape="quadruped", scale=(1.1, 0.6, 0.9, 0.6, 0.6, 0.6),
                   palette=((0.20, 0.55, 0.25), (0.35, 0.70, 0.30), (0.12, 0.35, 0.15))),
    "giraffe": dict(body_shape="quadruped", scale=(0.9, 1.5, 0.9, 1.3, 1.3, 0.8),
                    palette=((0.90, 0.70, 0.20), (0.75, 0.50, 0.15), (0.55, 0.35, 0.10))),
    "rhino": dict(body_shape="quadruped", scale=(1.1, 0.5, 1.1, 0.8, 0.8, 0.5),
                  palette=((0.45, 0.45, 0.50), (0.60, 0.60, 0.65), (0.30, 0.30, 0.35))),
    "stickman": dict(body_shape="biped", scale=(1.0, 1.0, 1.0, 1.0),
                     palette=((0.15, 0.30, 0.80), (0.85, 0.25, 0.20), (0.10, 0.15, 0.45))),
    "letter": dict(body_shape="glyph", scale=(1.0, 1.0, 1.0),
                   palette=((0.45, 0.10, 0.55), (0.10, 0.10, 0.10))),
    "flag": dict(body_shape="flag", scale=(1.0, 1.0),
                 palette=((0.85, 0.10, 0.15), (0.35, 0.25, 0.15), (0.95, 0.55, 0.55))),
}


@dataclass(frozen=True)
class SpriteSpec:
    body_shape: str
    limb_lengths: tuple
    palette: tuple
    size: int = 64
    label: Optional[str] = None

    def __post_init__(self):
        if self.body_shape not in BODY_SHAPES:
            raise ValidationError(f"body_shape must be one of {BODY_SHAPES}, got {self.body_shape!r}")
        check_positive_int(self.size, "size")
        if self.size % 8:
            raise ValidationError(f"size must be a positive multiple of 8, got {self.size}")
        lengths = tuple(float(v) for v in self.limb_lengths)
        expected = len(_TEMPLATES[self.body_shape]["lengths"])
        if len(lengths) != expected:
            raise ValidationError(
                f"limb_lengths must have {expected} entries for {self.body_shape}, got {len(lengths)}")
        if not all(math.isfinite(v) and v > 0 for v in lengths):
            raise ValidationError("limb_lengths must all be finite and > 0")
        palette = tuple(tuple(float(c) for c in color) for color in self.palette)
        if not palette:
            raise ValidationError("palette must be non-empty")
        if any(len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color) for color in palette):
            raise ValidationError("palette entries must be RGB triples in [0, 1]")
        object.__setattr__(self, "limb_lengths", lengths)
        object.__setattr__(self, "palette", palette)

    @property
    def bones(self):
        return _TEMPLATES[self.body_shape]["bones"]

    @property
    def n_bones(self):
        return len(self.bones)

    @classmethod
    def from_class(cls, label, size=64, rng=None, jitter=0.1):
        """Build the spec of a named sprite class, optionally with size/colour jitter."""
        if label not in SPRITE_CLASSES:
            raise ValidationError(f"unknown sprite class {label!r}; known: {sorted(SPRITE_CLASSES)}")
        info = SPRITE_CLASSES[label]
        base = np.asarray(_TEMPLATES[info["body_shape"]]["lengths"]) * np.asarray(info["scale"])
        base = base * size / 64.0
        palette = np.asarray(info["palette"])
        if rng is not None and jitter > 0:
            base = base * rng.uniform(1 - jitter, 1 + jitter, size=base.shape)
            palette = np.clip(palette + rng.uniform(-jitter / 2, jitter / 2, size=palette.shape), 0, 1)
        return cls(info["body_shape"], tuple(base), tuple(map(tuple, palette)), size, label)


@dataclass
class MotionScript:
    """Per-frame root translation (pixels) and per-bone angle offsets (radians)."""

    frames: int
    root_translation: np.ndarray  # (frames, 2)
    joint_angles: np.ndarray  # (frames, n_bones)
    preset: Optional[str] = None

    def __post_init__(self):
        check_positive_int(self.frames, "frames")
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64)
        if self.root_translation.shape != (self.frames, 2):
            raise ValidationError(
                f"root_translation must have shape ({self.frames}, 2), got {self.root_translation.shape}")
        if self.joint_angles.ndim != 2 or self.joint_angles.shape[0] != self.frames:
            raise ValidationError(
                f"joint_angles must have shape ({self.frames}, n_bones), got {self.joint_angles.shape}")
        if not np.all(np.isfinite(self.root_translation)):
            raise ValidationError("root_translation must be finite")
        if not np.all(np.isfinite(self.joint_angles)):
            raise ValidationError("joint_angles must be finite")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValidationError(f"preset must be one of {PRESETS}, got {self.preset!r}")

    @classmethod
    def idle(cls, spec, frames):
        return cls(frames, np.zeros((frames, 2)), np.zeros((frames, spec.n_bones)), "idle")


@dataclass
class KeypointSet:
    """K keypoints in normalized coordinates and their 2x2 local jacobians."""

    positions: np.ndarray
    jacobians: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        self.jacobians = np.asarray(self.jacobians, dtype=np.float32)
        k = self.positions.shape[0] if self.positions.ndim == 2 else -1
        if self.positions.shape != (k, 2) or k < 1:
            raise ValidationError(f"positions must have shape (K, 2), got {self.positions.shape}")
        if self.jacobians.shape != (k, 2, 2):
            raise ValidationError(f"jacobians must have shape ({k}, 2, 2), got {self.jacobians.shape}")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.jacobians))):
            raise ValidationError("keypoints must be finite")

    @property
    def K(self):
        return self.positions.shape[0]

    def validate(self):
        """Check the range and invertibility invariants; returns self."""
        if np.any(np.abs(self.positions) > 1.0):
            raise ValidationError("keypoint positions must lie within [-1, 1]^2")
        det = np.linalg.det(self.jacobians.astype(np.float64))
        bad = np.flatnonzero(np.abs(det) <= 1e-6)
        if bad.size:
            raise ValidationError(f"jacobian of keypoint {int(bad[0])} is singular (|det| <= 1e-6)")
        return self

    def copy(self):
        return KeypointSet(self.positions.copy(), self.jacobians.copy())


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    fps: float = 8.0
    keypoints: Optional[list] = None
    label: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValidationError(f"frames must have shape (F, H, W, 3), got {self.frames.shape}")
        if self.keypoints is not None and len(self.keypoints) != len(self.frames):
            raise ValidationError(
                f"keypoints has {len(self.keypoints)} entries but the clip has {len(self.frames)} frames")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self):
        return self.frames.shape[1]


def _rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class _PosedSkeleton:
    """World-space bone segments of one pose."""

    def __init__(self, spec, root, angles):
        self.spec = spec
        bones = spec.bones
        lengths = spec.limb_lengths
        self.start = np.zeros((len(bones), 2))
        self.angle = np.zeros(len(bones))
        self.rest_angle = np.zeros(len(bones))
        self.length = np.array([lengths[b.length_index] for b in bones])
        for i, bone in enumerate(bones):
            if bone.parent < 0:
                self.angle[i] = bone.rest_angle + angles[i]
                self.rest_angle[i] = bone.rest_angle
                direction = np.array([math.cos(self.angle[i]), math.sin(self.angle[i])])
                self.start[i] = np.asarray(root) - (bone.anchor * self.length[i]) * direction
            else:
                p = bone.parent
                self.angle[i] = self.angle[p] + bone.rest_angle + angles[i]
                self.rest_angle[i] = self.rest_angle[p] + bone.rest_angle
                self.start[i] = self.point(p, bone.anchor)

    def point(self, bone, fraction, across=0.0):
        """World position of a point given in bone-local (along-fraction, across-px) coords."""
        a = self.angle[bone]
        along = fraction * self.length[bone]
        return self.start[bone] + _rotation(a) @ np.array([along, across])

    def local_rotation(self, bone):
        return _rotation(self.angle[bone] - self.rest_angle[bone])

    def end(self, bone):
        return self.point(bone, 1.0)


def _root_position(spec, script, frame, offset):
    c = spec.size / 2.0
    return np.array([c, c]) + offset + script.root_translation[frame]


def surface_point(spec, script, frame, bone, fraction, across=0.0, offset=(0.0, 0.0)):
    """Pixel position of a material point of ``bone`` in ``frame``.

    Exposed so the jacobian oracle can be checked against finite differences
    of the same geometry used for rendering.
    """
    root = _root_position(spec, script, frame, np.asarray(offset, dtype=float))
    return _PosedSkeleton(spec, root, script.joint_angles[frame]).point(bone, fraction, across)


def _render(spec, skel):
    size = spec.size
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    scale = size / 64.0
    order = sorted(range(len(spec.bones)), key=lambda i: spec.bones[i].layer)
    for i in order:
        bone = spec.bones[i]
        a, b = skel.start[i], skel.end(i)
        ab = b - a
        t = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / max(float(ab @ ab), 1e-12)
        t = np.clip(t, 0.0, 1.0)
        d = np.hypot(xs - (a[0] + t * ab[0]), ys - (a[1] + t * ab[1]))
        radius = 0.5 * bone.width * scale
        alpha = np.clip(radius - d + 0.5, 0.0, 1.0)[..., None]
        color = np.asarray(spec.palette[bone.color % len(spec.palette)])
        img = img * (1 - alpha) + color * alpha
    return quantize(img)


def quantize(img):
    """Snap an image onto the 8-bit lattice used by the on-disk format."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8) / np.float32(255.0)).astype(np.float32)


def _keypoints(spec, skel, n_keypoints):
    template = _TEMPLATES[spec.body_shape]["keypoints"][:n_keypoints]
    positions = np.array([skel.point(b, f) for b, f in template])
    positions = 2.0 * positions / spec.size - 1.0
    jacobians = np.array([skel.local_rotation(b) for b, _ in template])
    return KeypointSet(positions, jacobians)


def generate_sprite_video(spec: SpriteSpec, script: MotionScript, seed: int = 0, fps: float = 8.0,
                          n_keypoints: int = MAX_KEYPOINTS, render: bool = True) -> VideoClip:
    """Render ``script`` applied to ``spec`` with oracle keypoints at the sprite joints.

    ``seed`` jitters the resting placement of the sprite by at most 2 px
    (zero jitter when ``seed`` is None). With ``render=False`` frames are left
    as background, which is enough for keypoint-only checks.
    """
    if not isinstance(spec, SpriteSpec):
        raise ValidationError("spec must be a SpriteSpec")
    if not isinstance(script, MotionScript):
        raise ValidationError("script must be a MotionScript")
    if script.joint_angles.shape[1] != spec.n_bones:
        raise ValidationError(
            f"joint_angles has {script.joint_angles.shape[1]} columns but a {spec.body_shape} "
            f"has {spec.n_bones} bones")
    check_positive_int(n_keypoints, "n_keypoints", minimum=3)
    if n_keypoints > MAX_KEYPOINTS:
        raise ValidationError(f"n_keypoints must be <= {MAX_KEYPOINTS}, got {n_keypoints}")
    if seed is None:
        offset = np.zeros(2)
    else:
        offset = np.random.default_rng(seed).uniform(-2.0, 2.0, size=2) * spec.size / 64.0
    frames, keypoints = [], []
    for i in range(script.frames):
        root = _root_position(spec, script, i, offset)
        skel = _PosedSkeleton(spec, root, script.joint_angles[i])
        kp = _keypoints(spec, skel, n_keypoints)
        if np.any(np.abs(kp.positions) > 1.0):
            raise ValidationError(f"sprite leaves the frame at frame {i}; reduce motion amplitude")
        keypoints.append(kp.validate())
        if render:
            frames.append(_render(spec, skel))
        else:
            frames.append(np.broadcast_to(np.asarray(BACKGROUND, np.float32),
                                          (spec.size, spec.size, 3)))
    return VideoClip(np.stack(frames), fps=fps, keypoints=keypoints, label=spec.label,
                     metadata={"body_shape": spec.body_shape, "preset": script.preset, "seed": seed})


_ROLE_PHASE = {"front_near": 0.0, "hind_far": 0.0, "front_far": math.pi, "hind_near": math.pi,
               "arm_near": math.pi, "arm_far": 0.0}


def make_script(preset: str, spec: SpriteSpec, frames: int = 10, seed: int = 0) -> MotionScript:
    """Deterministic motion preset for ``spec``'s skeleton."""
    if preset not in PRESETS:
        raise ValidationError(f"preset must be one of {PRESETS}, got {preset!r}")
    check_positive_int(frames, "frames")
    if preset == "idle":
        return MotionScript.idle(spec, frames)
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.8, 1.2)
    phase0 = rng.uniform(0, 2 * math.pi)
    scale = spec.size / 64.0
    idx = np.arange(frames, dtype=float)
    roles = [b.role for b in spec.bones]
    angles = np.zeros((frames, len(roles)))
    trans = np.zeros((frames, 2))
    centred = idx - (frames - 1) / 2.0
    arc = np.sin(math.pi * idx / max(frames - 1, 1))

    if preset in ("walk", "run"):
        run = preset == "run"
        period = 5.0 if run else 8.0
        swing = (0.8 if run else 0.45) * amp
        speed = (1.5 if run else 1.0) * scale
        phi = 2 * math.pi * idx / period + phase0
        trans[:, 0] = speed * centred
        if run:
            trans[:, 1] = -1.5 * scale * np.abs(np.sin(phi))
        for j, role in enumerate(roles):
            if role in _ROLE_PHASE:
                angles[:, j] = swing * np.sin(phi + _ROLE_PHASE[role])
            elif role == "tail":
                angles[:, j] = 0.3 * amp * np.sin(phi)
            elif role.startswith("cloth"):
                k = int(role[-1])
                angles[:, j] = 0.2 * amp * np.sin(phi - k)
            elif role == "torso" and run and spec.body_shape == "quadruped":
                angles[:, j] = 0.08 * np.sin(phi)
    elif preset == "jump":
        height = 9.0 * scale * amp
        trans[:, 1] = -height * arc + 2.0 * scale
        for j, role in enumerate(roles):
            if role in ("front_near", "front_far"):
                angles[:, j] = -0.7 * arc
            elif role in ("hind_near", "hind_far"):
                angles[:, j] = 0.7 * arc if spec.body_shape == "quadruped" else 0.3 * arc
            elif role in ("arm_near", "arm_far"):
                lift = 0.35 if spec.body_shape == "glyph" else 1.2
                angles[:, j] = (lift if role == "arm_near" else -lift) * arc
            elif role == "tail":
                angles[:, j] = -0.5 * arc
            elif role == "neck":
                angles[:, j] = -0.2 * arc
            elif role.startswith("cloth"):
                angles[:, j] = 0.25 * arc
    elif preset == "wave":
        phi = 2 * math.pi * idx / 6.0 + phase0
        for j, role in enumerate(roles):
            if role in ("front_near", "arm_near"):
                angles[:, j] = -0.5 * amp - 0.5 * amp * np.sin(phi)
            elif role == "neck":
                angles[:, j] = 0.25 * amp * np.sin(phi)
            elif role.startswith("cloth"):
                k = int(role[-1])
                angles[:, j] = 0.45 * amp * np.sin(phi - 1.2 * k)
            elif role == "tail":
                angles[:, j] = 0.4 * amp * np.sin(phi)
    return MotionScript(frames, trans, angles, preset)


@dataclass
class SamplerConfig:
    """Mixture over sprite classes and motion presets used by ``make_dataset``."""

    classes: tuple = tuple(SPRITE_CLASSES)
    presets: tuple = ("walk", "run", "jump", "wave", "idle")
    preset_weights: Optional[tuple] = (0.3, 0.25, 0.2, 0.15, 0.1)
    frames: int = 10
    size: int = 64
    fps: float = 8.0
    n_keypoints: int = MAX_KEYPOINTS
    jitter: float = 0.1


_MAX_REDRAWS = 20


def make_dataset(n_videos: int, spec_distribution: Optional[SamplerConfig] = None, seed: int = 0,
                 render: bool = True) -> list:
    """Deterministic list of labelled sprite clips drawn from ``spec_distribution``."""
    check_positive_int(n_videos, "n_videos")
    cfg = spec_distribution or SamplerConfig()
    for label in cfg.classes:
        if label not in SPRITE_CLASSES:
            raise ValidationError(f"unknown sprite class {label!r}")
    weights = None
    if cfg.preset_weights is not None:
        weights = np.asarray(cfg.preset_weights, dtype=float)
        weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_videos):
        label = cfg.classes[i % len(cfg.classes)] if i < len(cfg.classes) else rng.choice(cfg.classes)
        preset = rng.choice(cfg.presets, p=weights)
        for attempt in range(_MAX_REDRAWS):
            sub = int(rng.integers(2**31))
            spec = SpriteSpec.from_class(str(label), size=cfg.size, rng=np.random.default_rng(sub),
                                         jitter=cfg.jitter)
            script = make_script(str(preset), spec, cfg.frames, seed=sub)
            try:
                clip = generate_sprite_video(spec, script, seed=sub, fps=cfg.fps,
                                             n_keypoints=cfg.n_keypoints, render=render)
            except ValidationError:
                # the jittered sprite left the frame; redraw
                if attempt == _MAX_REDRAWS - 1:
                    raise
                continue
            break
        clips.append(clip)
    return clips


def demo_pair(size=64, frames=10):
    """The bundled demo: a walking turtle source and a jumping rhino driver."""
    turtle = SpriteSpec.from_class("turtle", size=size)
    rhino = SpriteSpec.from_class("rhino", size=size)
    source = generate_sprite_video(turtle, make_script("walk", turtle, frames, seed=1), seed=1)
    driving = generate_sprite_video(rhino, make_script("jump", rhino, frames, seed=2), seed=2)
    return source, driving


# -- clip directory format ---------------------------------------------------

_FRAME_RE = re.compile(r"^(\d{5})\.png$")
CLIP_FORMAT_VERSION = 1


def clip_metadata(clip: VideoClip) -> dict:
    meta = {
        "version": CLIP_FORMAT_VERSION,
        "fps": float(clip.fps),
        "frame_count": len(clip),
        "size": [int(clip.frames.shape[1]), int(clip.frames.shape[2])],
        "label": clip.label,
        "K": None,
        "keypoints": None,
    }
    if clip.keypoints is not None:
        meta["K"] = int(clip.keypoints[0].K)
        meta["keypoints"] = {
            "positions": [kp.positions.astype(float).tolist() for kp in clip.keypoints],
            "jacobians": [kp.jacobians.astype(float).tolist() for kp in clip.keypoints],
        }
    return meta


def save_clip(clip: VideoClip, path, sidecar: str = "meta.json", extra: Optional[dict] = None):
    """Write ``frames/%05d.png`` (8-bit RGB) plus a JSON sidecar under ``path``."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        data = np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path / "frames" / f"{i:05d}.png")
    meta = clip_metadata(clip)
    if extra:
        meta.update(extra)
    with open(path / sidecar, "w") as fh:
        json.dump(meta, fh, indent=1)
    return path


def _parse_keypoints(meta, n_frames, path):
    kp = meta.get("keypoints")
    if kp is None:
        return None
    try:
        positions = np.asarray(kp["positions"], dtype=np.float32)
        jacobians = np.asarray(kp["jacobians"], dtype=np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise ClipIOError(f"{path}: malformed keypoints in metadata ({exc})") from exc
    if positions.ndim != 3 or positions.shape[0] != n_frames or positions.shape[2] != 2:
        raise ClipIOError(f"{path}: keypoint positions shape {positions.shape} does not match {n_frames} frames")
    if jacobians.shape != positions.shape[:2] + (2, 2):
        raise ClipIOError(f"{path}: jacobians shape {jacobians.shape} inconsistent with positions")
    if meta.get("K") is not None and meta["K"] != positions.shape[1]:
        raise ClipIOError(f"{path}: K={meta['K']} but positions carry {positions.shape[1]} keypoints")
    return [KeypointSet(p, j) for p, j in zip(positions, jacobians)]


def load_clip(path, sidecar: str = "meta.json") -> VideoClip:
    """Read a clip directory written by :func:`save_clip`."""
    path = Path(path)
    frame_dir = path / "frames"
    if not frame_dir.is_dir():
        raise ClipIOError(f"{path}: missing frames/ directory")
    names = sorted(n for n in os.listdir(frame_dir) if _FRAME_RE.match(n))
    if not names:
        raise ClipIOError(f"{path}: no frames found in frames/")
    indices = [int(_FRAME_RE.match(n).group(1)) for n in names]
    if indices != list(range(len(names))):
        missing = sorted(set(range(max(indices) + 1)) - set(indices))
        raise ClipIOError(f"{path}: missing frame {missing[0]:05d}.png")
    meta = {}
    meta_path = path / sidecar
    if meta_path.exists():
        try:
            with open(meta_path) as fh:
                meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ClipIOError(f"{meta_path}: malformed metadata ({exc})") from exc
        if not isinstance(meta, dict):
            raise ClipIOError(f"{meta_path}: metadata must be a JSON object")
    frames = []
    for name in names:
        with Image.open(frame_dir / name) as im:
            arr = np.asarray(im.convert("RGB"))
        if frames and arr.shape != frames[0].shape:
            raise ClipIOError(
                f"{path}: frame {name} has shape {arr.shape[:2]}, expected {frames[0].shape[:2]}")
        frames.append(arr)
    if meta.get("frame_count") not in (None, len(frames)):
        raise ClipIOError(f"{path}: metadata lists {meta['frame_count']} frames, found {len(frames)}")
    frames = np.stack(frames).astype(np.float32) / np.float32(255.0)
    try:
        fps = float(meta.get("fps", 8.0))
    except (TypeError, ValueError) as exc:
        raise ClipIOError(f"{meta_path}: malformed fps") from exc
    keypoints = _parse_keypoints(meta, len(frames), meta_path)
    return VideoClip(frames, fps=fps, keypoints=keypoints, label=meta.get("label"))


def save_dataset(clips: Sequence[VideoClip], root):
    root = Path(root)
    for i, clip in enumerate(clips):
        save_clip(clip, root / f"clip_{i:05d}")
    return root


def load_dataset(root) -> list:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "frames").is_dir())
    if not dirs:
        raise ClipIOError(f"{root}: no clip directories found")
    return [load_clip(d) for d in dirs]
