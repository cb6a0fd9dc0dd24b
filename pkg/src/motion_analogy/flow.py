"""Keypoint-driven dense latent optical flow.

Sparse keypoints and jacobians become K local affine maps; a small
encoder-decoder looks at keypoint heatmap differences and at the reference
latent warped by every candidate map, and predicts per-cell softmax weights
over the K candidates plus the identity. The weighted candidate
displacements form the dense flow, applied by backward bilinear warping.

All coordinates are normalized to [-1, 1] with ``align_corners=False``
semantics: cell ``j`` of a width-``w`` grid is centred at ``(2j + 1) / w - 1``.
Flows are stored channel-last, ``[..., 0]`` = x displacement.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from ._validation import (CheckpointError, ValidationError, check_fitted, check_latent_grid,
                          check_positive_int)
from .synthdata import KeypointSet

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class DenseFlow:
    """Displacement field (h, w, 2) over the latent grid; zeros are the identity motion."""

    displacement: np.ndarray

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=np.float32)
        if self.displacement.ndim != 3 or self.displacement.shape[-1] != 2:
            raise ValidationError(f"flow must have shape (h, w, 2), got {self.displacement.shape}")
        if not np.all(np.isfinite(self.displacement)):
            raise ValidationError("flow contains non-finite values")

    @property
    def grid(self):
        return self.displacement.shape[:2]

    @classmethod
    def zeros(cls, h, w):
        return cls(np.zeros((h, w, 2), np.float32))

    def to_dict(self):
        h, w = self.grid
        return {"h": int(h), "w": int(w), "data": self.displacement.reshape(-1, 2).astype(float).tolist()}

    @classmethod
    def from_dict(cls, data):
        arr = np.asarray(data["data"], dtype=np.float32)
        return cls(arr.reshape(int(data["h"]), int(data["w"]), 2))


@dataclass
class LocalAffine:
    """T(z) = target + linear @ (z - source): maps driving-frame points to reference-frame points."""

    source: np.ndarray
    target: np.ndarray
    linear: np.ndarray

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.target + (z - self.source) @ self.linear.T


def cell_centers(h, w):
    """Normalized (x, y) coordinates of grid cell centres, shape (h, w, 2)."""
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _cell_centers_tensor(h, w, dtype=torch.float32):
    return torch.from_numpy(cell_centers(h, w)).to(dtype)


def gaussian_heatmap(kp_positions, grid, sigma=0.1):
    """K Gaussian heatmaps exp(-|c - p_k|^2 / (2 sigma^2)) over the cell centres of ``grid``."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    positions = np.asarray(kp_positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise ValidationError(f"kp_positions must be (K, 2), got {positions.shape}")
    if np.any(np.abs(positions) > 1.0):
        raise ValidationError("kp_positions must lie within [-1, 1]^2")
    h, w = grid
    centers = cell_centers(h, w)
    d2 = np.sum((centers[None] - positions[:, None, None, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma ** 2))


def _heatmaps_tensor(positions, h, w, sigma):
    # positions (B, K, 2) -> (B, K, h, w)
    centers = _cell_centers_tensor(h, w, positions.dtype)
    d2 = ((centers[None, None] - positions[:, :, None, None, :]) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma ** 2))


def _inverse_2x2(m):
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    inv = torch.stack([torch.stack([d, -b], -1), torch.stack([-c, a], -1)], -2)
    return inv / det[..., None, None]


def local_affines(kp_ref: KeypointSet, kp_drv: KeypointSet) -> list:
    """Per-keypoint maps T_k(z) = p_ref + J_ref J_drv^-1 (z - p_drv)."""
    if kp_ref.K != kp_drv.K:
        raise ValidationError(f"keypoint counts differ: {kp_ref.K} vs {kp_drv.K}")
    j_drv = kp_drv.jacobians.astype(np.float64)
    det = np.linalg.det(j_drv)
    for k, value in enumerate(det):
        if abs(value) <= 1e-6:
            raise ValidationError(f"driving jacobian of keypoint {k} is singular (|det| <= 1e-6)")
    linear = kp_ref.jacobians.astype(np.float64) @ np.linalg.inv(j_drv)
    return [LocalAffine(kp_drv.positions[k].astype(np.float64), kp_ref.positions[k].astype(np.float64),
                        linear[k]) for k in range(kp_ref.K)]


def candidate_displacements(pos_ref, jac_ref, pos_drv, jac_drv, h, w):
    """Displacements of the identity and the K local affine maps at every cell.

    Inputs are batched tensors (B, K, 2) and (B, K, 2, 2); returns (B, K+1, h, w, 2)
    with index 0 the identity (all zeros).
    """
    linear = jac_ref @ _inverse_2x2(jac_drv)  # (B, K, 2, 2)
    z = _cell_centers_tensor(h, w, pos_ref.dtype)  # (h, w, 2)
    rel = z[None, None] - pos_drv[:, :, None, None, :]  # (B, K, h, w, 2)
    mapped = pos_ref[:, :, None, None, :] + torch.einsum("bkij,bkhwj->bkhwi", linear, rel)
    disp = mapped - z[None, None]
    zero = torch.zeros_like(disp[:, :1])
    return torch.cat([zero, disp], dim=1)


def warp_tensor(latent, flow):
    """Backward bilinear warp with border clamping: latent (B, C, h, w), flow (B, h, w, 2)."""
    b, _, h, w = latent.shape
    grid = _cell_centers_tensor(h, w, latent.dtype)[None] + flow
    return F.grid_sample(latent, grid.expand(b, h, w, 2), mode="bilinear",
                         padding_mode="border", align_corners=False)


def warp(latent, flow):
    """Warp an (h, w, C) grid: out(c) = bilinear_sample(latent, c + flow(c))."""
    disp = flow.displacement if isinstance(flow, DenseFlow) else np.asarray(flow)
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ValidationError(f"latent must be (h, w, C), got {latent.shape}")
    if disp.shape != latent.shape[:2] + (2,):
        raise ValidationError(f"flow {disp.shape} does not match latent grid {latent.shape[:2]}")
    dtype = torch.float64 if latent.dtype == np.float64 else torch.float32
    z = torch.as_tensor(latent, dtype=dtype).permute(2, 0, 1)[None]
    f = torch.as_tensor(disp, dtype=dtype)[None]
    return warp_tensor(z, f)[0].permute(1, 2, 0).numpy()


def stack_keypoints(kps):
    pos = torch.from_numpy(np.stack([k.positions for k in kps]))
    jac = torch.from_numpy(np.stack([k.jacobians for k in kps]))
    return pos, jac


class _ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm1 = nn.GroupNorm(8, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class _FlowHourglass(nn.Module):
    """Two-level encoder-decoder producing K+1 mask logits per cell."""

    def __init__(self, in_channels, n_candidates, width=64):
        super().__init__()
        self.inp = _ResBlock(in_channels, width)
        self.down = nn.Conv2d(width, 2 * width, 3, 2, 1)
        self.mid = _ResBlock(2 * width, 2 * width)
        self.up = nn.Conv2d(2 * width, width, 3, 1, 1)
        self.dec = _ResBlock(2 * width, width)
        self.out = nn.Conv2d(width, n_candidates, 3, 1, 1)

    def forward(self, x):
        h0 = self.inp(x)
        h1 = self.mid(F.silu(self.down(h0)))
        u = F.interpolate(h1, size=h0.shape[-2:], mode="nearest")
        h = self.dec(torch.cat([h0, F.silu(self.up(u))], dim=1))
        return self.out(h)


class LatentFlowNet(BaseEstimator):
    """Latent optical-flow network (LOFNet) trained to warp one frame's latent onto another's.

    ``fit`` takes LatentClips carrying per-frame keypoints. Each iteration
    samples a batch of clips and a random (reference, driving) frame pair
    from each and minimises MSE(warp(z_ref, flow), z_drv) with Adam.
    """

    def __init__(self, n_keypoints=10, sigma=0.1, grid_size=8, channels=4, width=64,
                 iterations=2000, batch_size=16, lr=5e-4, holdout=0.1, eval_pairs=256, seed=0):
        self.n_keypoints = n_keypoints
        self.sigma = sigma
        self.grid_size = grid_size
        self.channels = channels
        self.width = width
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.eval_pairs = eval_pairs
        self.seed = seed

    def _init_model(self):
        k = self.n_keypoints
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = _FlowHourglass(k + (k + 1) * self.channels, k + 1, self.width)
        self.model_.eval()
        return self.model_

    # -- forward ------------------------------------------------------------
    def flow_tensor(self, z_ref, pos_ref, jac_ref, pos_drv, jac_drv):
        """Batched forward: z_ref (B, C, h, w), keypoints (B, K, 2)/(B, K, 2, 2).

        Returns (flow (B, h, w, 2), mask (B, K+1, h, w)).
        """
        if not hasattr(self, "model_"):
            self._init_model()
        b, c, h, w = z_ref.shape
        if pos_ref.shape[1] != self.n_keypoints or pos_drv.shape[1] != self.n_keypoints:
            raise ValidationError(
                f"expected {self.n_keypoints} keypoints, got {pos_ref.shape[1]} / {pos_drv.shape[1]}")
        if (h, w) != (self.grid_size, self.grid_size) or c != self.channels:
            raise ValidationError(
                f"latent shape {(c, h, w)} does not match the flow network's "
                f"{(self.channels, self.grid_size, self.grid_size)}")
        heat = (_heatmaps_tensor(pos_drv, h, w, self.sigma)
                - _heatmaps_tensor(pos_ref, h, w, self.sigma))
        cands = candidate_displacements(pos_ref, jac_ref, pos_drv, jac_drv, h, w)  # (B, K+1, h, w, 2)
        n = cands.shape[1]
        z_rep = z_ref[:, None].expand(b, n, c, h, w).reshape(b * n, c, h, w)
        warped = warp_tensor(z_rep, cands.reshape(b * n, h, w, 2)).reshape(b, n * c, h, w)
        logits = self.model_(torch.cat([heat, warped], dim=1))
        mask = torch.softmax(logits, dim=1)
        flow = torch.einsum("bkhw,bkhwi->bhwi", mask, cands)
        return flow, mask

    def predict(self, z_ref, kp_ref: KeypointSet, kp_drv: KeypointSet, return_mask=False):
        """Dense flow (h, w, 2) that warps ``z_ref`` (h, w, C) from ``kp_ref`` to ``kp_drv``."""
        z = check_latent_grid(z_ref, "z_ref", grid=(self.grid_size, self.grid_size),
                              channels=self.channels)
        z = torch.from_numpy(z).permute(0, 3, 1, 2)
        pos_r, jac_r = stack_keypoints([kp_ref])
        pos_d, jac_d = stack_keypoints([kp_drv])
        with torch.no_grad():
            flow, mask = self.flow_tensor(z, pos_r, jac_r, pos_d, jac_d)
        out = DenseFlow(flow[0].numpy())
        return (out, mask[0].numpy()) if return_mask else out

    # -- training -----------------------------------------------------------
    def _pairs_tensors(self, clips, pairs):
        z_ref = torch.from_numpy(np.stack([clips[c].latents[r] for c, r, _ in pairs])).permute(0, 3, 1, 2)
        z_drv = torch.from_numpy(np.stack([clips[c].latents[d] for c, _, d in pairs])).permute(0, 3, 1, 2)
        pos_r, jac_r = stack_keypoints([clips[c].keypoints[r] for c, r, _ in pairs])
        pos_d, jac_d = stack_keypoints([clips[c].keypoints[d] for c, _, d in pairs])
        return z_ref, z_drv, pos_r, jac_r, pos_d, jac_d

    def warp_loss(self, clips, pairs):
        """Mean L_warp over explicit (clip, ref_frame, drv_frame) triples."""
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(pairs), 128):
                z_ref, z_drv, pr, jr, pd, jd = self._pairs_tensors(clips, pairs[i:i + 128])
                flow, _ = self.flow_tensor(z_ref, pr, jr, pd, jd)
                total += float(torch.sum((warp_tensor(z_ref, flow) - z_drv) ** 2))
                count += z_drv.numel()
        return total / count

    def fit(self, X, y=None):
        """Train on a list of LatentClip with keypoints."""
        check_positive_int(self.iterations, "iterations", minimum=0)
        clips = []
        for i, clip in enumerate(X):
            if clip.keypoints is None:
                raise ValidationError(f"clip {i} has no keypoints")
            if len(clip) < 2:
                logger.warning("skipping clip %d: fewer than 2 frames", i)
                continue
            if clip.keypoints[0].K != self.n_keypoints:
                raise ValidationError(f"clip {i} has K={clip.keypoints[0].K}, expected {self.n_keypoints}")
            check_latent_grid(clip.latents, f"clip {i} latents",
                              grid=(self.grid_size, self.grid_size), channels=self.channels)
            clips.append(clip)
        if not clips:
            raise ValidationError("no usable clips (need >= 2 frames with keypoints)")
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(clips))
        n_hold = int(round(self.holdout * len(clips)))
        if len(clips) - n_hold < 1:
            n_hold = 0
        held, train = [clips[i] for i in order[:n_hold]], [clips[i] for i in order[n_hold:]]
        self.heldout_pairs_ = self._sample_pairs(held, self.eval_pairs, rng) if held else []

        model = self._init_model()
        self.initial_heldout_loss_ = self.warp_loss(held, self.heldout_pairs_) if held else None
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        history = []
        model.train()
        for step in range(self.iterations):
            pairs = self._sample_pairs(train, self.batch_size, rng)
            z_ref, z_drv, pr, jr, pd, jd = self._pairs_tensors(train, pairs)
            flow, _ = self.flow_tensor(z_ref, pr, jr, pd, jd)
            loss = F.mse_loss(warp_tensor(z_ref, flow), z_drv)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
            if step % 250 == 0:
                logger.info("lofnet step %d L_warp=%.5f", step, loss.item())
        model.eval()
        self.history_ = history
        self.final_heldout_loss_ = self.warp_loss(held, self.heldout_pairs_) if held else None
        self._heldout_clips = held
        return self

    @staticmethod
    def _sample_pairs(clips, n, rng):
        pairs = []
        for _ in range(n):
            c = int(rng.integers(len(clips)))
            r, d = rng.choice(len(clips[c]), size=2, replace=False)
            pairs.append((c, int(r), int(d)))
        return pairs

    # -- persistence ----------------------------------------------------------
    def save(self, path):
        check_fitted(self, "model_")
        torch.save({
            "kind": "lofnet", "version": CHECKPOINT_VERSION, "params": self.get_params(),
            "contract": {"K": self.n_keypoints, "sigma": self.sigma, "grid_size": self.grid_size},
            "state_dict": self.model_.state_dict(),
            "history": getattr(self, "history_", []),
            "initial_heldout_loss": getattr(self, "initial_heldout_loss_", None),
            "final_heldout_loss": getattr(self, "final_heldout_loss_", None),
        }, path)
        return path

    @classmethod
    def load(cls, path, n_keypoints=None, sigma=None, grid_size=None):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "lofnet" or ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} flow network checkpoint")
        contract = ckpt["contract"]
        for name, want in (("K", n_keypoints), ("sigma", sigma), ("grid_size", grid_size)):
            if want is not None and contract[name] != want:
                raise CheckpointError(f"{path}: checkpoint {name}={contract[name]}, requested {want}")
        net = cls(**ckpt["params"])
        net._init_model().load_state_dict(ckpt["state_dict"])
        net.history_ = ckpt.get("history", [])
        net.initial_heldout_loss_ = ckpt.get("initial_heldout_loss")
        net.final_heldout_loss_ = ckpt.get("final_heldout_loss")
        return net

    def copy(self):
        return copy.deepcopy(self)


def lofnet_forward(params: LatentFlowNet, z_ref, kp_ref, kp_drv, return_mask=False):
    return params.predict(z_ref, kp_ref, kp_drv, return_mask=return_mask)


def train_lofnet(dataset, config=None) -> LatentFlowNet:
    """Fit a :class:`LatentFlowNet` on LatentClips with keypoints."""
    if not dataset:
        raise ValidationError("empty dataset")
    params = dict(config or {})
    params.setdefault("grid_size", dataset[0].grid[0])
    params.setdefault("n_keypoints", dataset[0].keypoints[0].K if dataset[0].keypoints else 10)
    return LatentFlowNet(**params).fit(dataset)


# -- shape adaptation ---------------------------------------------------------

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """Strict convex hull vertices in counter-clockwise order (positive signed area).

    Monotone chain; points on hull edges are not vertices. Raises on inputs
    with fewer than 3 points or zero enclosed area.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"points must be (N, 2), got {pts.shape}")
    if len(pts) < 3:
        raise ValidationError("convex hull needs at least 3 points")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points must be finite")
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) < 3:
        raise ValidationError("degenerate input: fewer than 3 distinct points")
    lower, upper = [], []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise ValidationError("degenerate input: all points are collinear")
    return np.asarray(hull)


def polygon_centroid(poly):
    poly = np.asarray(poly, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])


@dataclass
class HullAlignment:
    """Per-axis scale and centroid translation taking the driving hull onto the source hull."""

    source_hull: np.ndarray
    driving_hull: np.ndarray
    scale: np.ndarray
    translation: np.ndarray


def _extent(hull):
    return hull.max(axis=0) - hull.min(axis=0)


def hull_alignment(src_positions, drv_positions) -> HullAlignment:
    hs, hd = convex_hull(src_positions), convex_hull(drv_positions)
    es, ed = _extent(hs), _extent(hd)
    if np.any(es <= 0) or np.any(ed <= 0):
        raise ValidationError("degenerate hull: zero width or height")
    scale = es / ed
    translation = polygon_centroid(hs) - polygon_centroid(hd)
    return HullAlignment(hs, hd, scale, translation)


def _frac_matrix(m):
    return [[Fraction(float(v)) for v in row] for row in m]


def _frac_matmul(a, b):
    return [[a[i][0] * b[0][j] + a[i][1] * b[1][j] for j in range(2)] for i in range(2)]


def _frac_inverse(m):
    det = m[0][0] * m[1][1] - m[0][1] * m[1][0]
    if det == 0:
        raise ValidationError("singular driving jacobian during keypoint adaptation")
    return [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]


def adapt_keypoints(kp_src_frame0: KeypointSet, kp_drv_seq) -> list:
    """Retarget a driving keypoint sequence onto the source's shape.

    Positions: p_src0 + s * (p_drv_i - p_drv_0), with s the per-axis ratio of
    the source and driving frame-0 hull extents. Jacobians: the driving
    motion relative to frame 0 composed onto the source, J_src J_drv0^-1 J_drv_i.
    Evaluated in exact rational arithmetic and rounded once, so the
    degenerate cases (no motion, identical frame 0) are reproduced exactly.
    """
    kp_drv_seq = list(kp_drv_seq)
    if not kp_drv_seq:
        raise ValidationError("driving keypoint sequence is empty")
    k = kp_src_frame0.K
    if any(kp.K != k for kp in kp_drv_seq):
        raise ValidationError("source and driving keypoint sets must have the same K")
    drv0 = kp_drv_seq[0]
    align = hull_alignment(kp_src_frame0.positions, drv0.positions)
    ext_s = _extent(align.source_hull)
    ext_d = _extent(align.driving_hull)
    scale = [Fraction(float(ext_s[a])) / Fraction(float(ext_d[a])) for a in range(2)]
    src_pos = [[Fraction(float(v)) for v in p] for p in kp_src_frame0.positions]
    drv0_pos = [[Fraction(float(v)) for v in p] for p in drv0.positions]
    # J_src J_drv0^-1 is shared by every frame
    base = [_frac_matmul(_frac_matrix(kp_src_frame0.jacobians[i]), _frac_inverse(_frac_matrix(drv0.jacobians[i])))
            for i in range(k)]
    adapted = []
    for kp in kp_drv_seq:
        pos = np.empty((k, 2), np.float32)
        jac = np.empty((k, 2, 2), np.float32)
        for i in range(k):
            for a in range(2):
                delta = Fraction(float(kp.positions[i, a])) - drv0_pos[i][a]
                pos[i, a] = float(src_pos[i][a] + scale[a] * delta)
            jac[i] = np.asarray(_frac_matmul(base[i], _frac_matrix(kp.jacobians[i])), dtype=np.float64)
        adapted.append(KeypointSet(pos, jac))
    return adapted
