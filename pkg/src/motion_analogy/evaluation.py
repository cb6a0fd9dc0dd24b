"""Desk-scale scores for generated clips: consistency, class recognisability, motion fidelity."""
from __future__ import annotations

import json
import math

import numpy as np

from ._validation import ValidationError, check_fitted, check_frames
from .codec import LatentCodec
from .synthdata import BACKGROUND, VideoClip

FOREGROUND_THRESHOLD = 0.1
HIST_BINS = 32


class CodecEmbedder:
    """Frame -> unit vector: the codec latent, flattened and L2-normalised.

    With ``center=True`` the latent of a blank background frame is subtracted
    first, so embeddings describe the sprite rather than the shared backdrop.
    """

    def __init__(self, codec: LatentCodec, center=True):
        check_fitted(codec, "model_")
        self.codec = codec
        self.center = center
        self._offset = 0.0
        if center:
            blank = np.broadcast_to(np.asarray(BACKGROUND, np.float32), (codec.size, codec.size, 3))
            self._offset = codec.transform(np.ascontiguousarray(blank))[0].reshape(-1)

    @property
    def dim(self):
        return self.codec.latent_size ** 2 * 4

    def __call__(self, frames):
        frames = check_frames(frames, "frames", size=self.codec.size)
        z = self.codec.transform(frames).reshape(len(frames), -1).astype(np.float64) - self._offset
        return _normalize(z)


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def _cosine(a, b):
    return np.sum(_normalize(a) * _normalize(b), axis=-1)


def _frames_of(video):
    return video.frames if isinstance(video, VideoClip) else np.asarray(video)


def frame_consistency(video, embedder) -> float:
    """Mean cosine similarity between the first frame's embedding and every later frame's."""
    frames = _frames_of(video)
    if len(frames) < 2:
        raise ValidationError("frame_consistency needs at least two frames")
    emb = np.asarray(embedder(frames), dtype=np.float64)
    return float(np.mean(_cosine(emb[:1], emb[1:])))


def build_prototypes(clips, embedder) -> dict:
    """Per-class mean of the normalised frame embeddings of ``clips``."""
    sums, counts = {}, {}
    for clip in clips:
        if clip.label is None:
            raise ValidationError("prototype clips need class labels")
        emb = _normalize(embedder(clip.frames))
        sums[clip.label] = sums.get(clip.label, 0.0) + emb.sum(axis=0)
        counts[clip.label] = counts.get(clip.label, 0) + len(emb)
    return {label: sums[label] / counts[label] for label in sorted(sums)}


def class_score(video, class_label, embedder, prototypes) -> float:
    """Mean cosine between each frame's embedding and the class prototype."""
    if class_label not in prototypes:
        raise ValidationError(f"no prototype for class {class_label!r}; known: {sorted(prototypes)}")
    emb = np.asarray(embedder(_frames_of(video)), dtype=np.float64)
    return float(np.mean(_cosine(emb, prototypes[class_label][None])))


def class_margins(video, class_label, embedder, prototypes) -> dict:
    """Own-class score minus every other class's score on ``video``."""
    own = class_score(video, class_label, embedder, prototypes)
    return {other: own - class_score(video, other, embedder, prototypes)
            for other in prototypes if other != class_label}


def foreground_centroid(frame):
    """Normalised (x, y) centroid of pixels farther than 0.1 from the background colour, or None."""
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.max(np.abs(frame - np.asarray(BACKGROUND)), axis=-1) > FOREGROUND_THRESHOLD
    if not mask.any():
        return None
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    return np.array([np.mean((2 * xs + 1) / w - 1), np.mean((2 * ys + 1) / h - 1)])


def pearson(a, b):
    """Pearson correlation, or None when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"pearson needs two equal-length 1-D series, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa <= 1e-12 * max(1.0, np.abs(a).max()) or sb <= 1e-12 * max(1.0, np.abs(b).max()):
        return None
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def track_correlation(track_a, track_b) -> dict:
    """Per-axis and combined correlation of two (F, 2) tracks.

    The combined value correlates the axis-wise centred tracks concatenated
    over both axes.
    """
    a = np.asarray(track_a, dtype=np.float64)
    b = np.asarray(track_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise ValidationError(f"tracks must both be (F, 2), got {a.shape} and {b.shape}")
    out = {"x": pearson(a[:, 0], b[:, 0]), "y": pearson(a[:, 1], b[:, 1])}
    ca = (a - a.mean(axis=0)).T.reshape(-1)
    cb = (b - b.mean(axis=0)).T.reshape(-1)
    out["combined"] = pearson(ca, cb)
    return out


def output_track(frames):
    """Foreground centroid per frame (F, 2); None if any frame has no foreground."""
    cents = [foreground_centroid(f) for f in frames]
    if any(c is None for c in cents):
        return None
    return np.stack(cents)


def keypoint_track(keypoints):
    return np.stack([kp.positions.astype(np.float64).mean(axis=0) for kp in keypoints])


def motion_fidelity(result) -> dict:
    """Correlation between the output's foreground-centroid track and the adapted keypoints' centroid track.

    Values are None where the correlation is undefined (a constant track or a
    frame with no visible foreground).
    """
    keypoints = getattr(result, "adapted_keypoints", None)
    if not keypoints:
        raise ValidationError("result does not retain its adapted keypoints")
    track = output_track(result.output.frames)
    if track is None:
        return {"x": None, "y": None, "combined": None}
    return track_correlation(track, keypoint_track(keypoints))


def histogram_distance(img, ref, bins=HIST_BINS) -> float:
    """Mean over channels of the total-variation distance between normalised histograms."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape[-1] != ref.shape[-1]:
        raise ValidationError("images differ in channel count")
    dists = []
    for ch in range(img.shape[-1]):
        h1, _ = np.histogram(img[..., ch], bins=bins, range=(0.0, 1.0))
        h2, _ = np.histogram(ref[..., ch], bins=bins, range=(0.0, 1.0))
        dists.append(0.5 * np.abs(h1 / h1.sum() - h2 / h2.sum()).sum())
    return float(np.mean(dists))


def identity_proxy(frames, source_frame) -> float:
    """Mean histogram distance of ``frames`` to the source frame (lower keeps appearance better)."""
    return float(np.mean([histogram_distance(f, source_frame) for f in frames]))


def evaluate_transfer(result, source: VideoClip, embedder=None, prototypes=None) -> dict:
    """Metrics report for one transfer result; identity is measured before colour correction."""
    report = {"frames": len(result.output), "motion_fidelity": motion_fidelity(result),
              "identity_proxy": identity_proxy(result.raw_frames, source.frames[0])}
    if embedder is not None:
        report["frame_consistency"] = frame_consistency(result.output, embedder)
        if prototypes is not None and result.output.label in prototypes:
            report["class_score"] = class_score(result.output, result.output.label, embedder, prototypes)
    return report


def _fmt(value):
    if value is None:
        return "undefined"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def ablation_table(rows) -> str:
    """Plain-text table; ``rows`` maps variant name -> metrics report."""
    header = ("variant", "frame_consistency", "motion_fidelity", "identity_proxy")
    lines = [" | ".join(header), " | ".join("-" * len(h) for h in header)]
    for name, rep in rows.items():
        fid = rep.get("motion_fidelity") or {}
        lines.append(" | ".join([name, _fmt(rep.get("frame_consistency")), _fmt(fid.get("combined")),
                                 _fmt(rep.get("identity_proxy"))]))
    return "\n".join(lines)


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    return path
