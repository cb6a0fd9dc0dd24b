"""Shared fixtures: desk-scale trained models, cached on disk between runs.

Each model has its own cache key covering the training data recipe, its
estimator parameters and the source of the modules that produce it, so editing
one of them retrains that model (and anything trained on its outputs). Delete ``tests/.model_cache`` to force a rebuild.
"""
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from motion_analogy import codec as codec_mod, diffusion as diffusion_mod, flow as flow_mod, synthdata
from motion_analogy.codec import LatentCodec
from motion_analogy.diffusion import VideoDenoiser
from motion_analogy.flow import LatentFlowNet
from motion_analogy.synthdata import make_dataset

CACHE = Path(__file__).parent / ".model_cache"
TRAIN_VIDEOS, TRAIN_SEED = 200, 0
HELDOUT_VIDEOS, HELDOUT_SEED = 20, 99

ACCEPTANCE_LINES = []


@dataclass
class Trained:
    codec: LatentCodec
    lofnet: LatentFlowNet
    base: VideoDenoiser
    clips: list
    latents: list
    timings: dict = field(default_factory=dict)


def _estimators():
    return LatentCodec(seed=0), LatentFlowNet(seed=0), VideoDenoiser(seed=0)


def _cache_keys(estimators):
    """One key per model; downstream keys chain the codec key, since they train on its latents."""
    def digest(parts, modules, est):
        h = hashlib.sha256("".join(parts).encode())
        for mod in modules:
            h.update(Path(mod.__file__).read_bytes())
        h.update(json.dumps([type(est).__name__, est.get_params()], sort_keys=True, default=str).encode())
        return h.hexdigest()[:16]

    codec, lofnet, base = estimators
    recipe = json.dumps([TRAIN_VIDEOS, TRAIN_SEED])
    codec_key = digest([recipe], (synthdata, codec_mod), codec)
    return {"codec": codec_key,
            "lofnet": digest([codec_key], (flow_mod,), lofnet),
            "denoiser": digest([codec_key], (diffusion_mod,), base)}


def _cached(name, key, fit, load):
    """Load ``name`` from its keyed cache entry, or fit and store it. Returns (model, seconds)."""
    root = CACHE / f"{name}-{key}"
    path = root / f"{name}.pt"
    if path.exists():
        return load(path), json.loads((root / "timing.json").read_text())["seconds"]
    logging.getLogger("motion_analogy").setLevel(logging.INFO)
    start = time.perf_counter()
    model = fit()
    seconds = time.perf_counter() - start
    root.mkdir(parents=True, exist_ok=True)
    model.save(path)
    (root / "timing.json").write_text(json.dumps({"seconds": seconds}))
    return model, seconds


@pytest.fixture(scope="session")
def trained():
    clips = make_dataset(TRAIN_VIDEOS, seed=TRAIN_SEED)
    codec, lofnet, base = _estimators()
    keys = _cache_keys((codec, lofnet, base))
    timings = {}
    codec, timings["codec"] = _cached("codec", keys["codec"], lambda: codec.fit(clips), LatentCodec.load)
    latents = [codec.encode_clip(c) for c in clips]
    lofnet, timings["lofnet"] = _cached("lofnet", keys["lofnet"], lambda: lofnet.fit(latents), LatentFlowNet.load)
    grid = (codec.latent_size,) * 2
    base, timings["denoiser"] = _cached("denoiser", keys["denoiser"], lambda: base.fit(latents),
                                        lambda p: VideoDenoiser.load(p, grid=grid))
    return Trained(codec, lofnet, base, clips, latents, timings)


@pytest.fixture(scope="session")
def heldout_clips():
    return make_dataset(HELDOUT_VIDEOS, seed=HELDOUT_SEED)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
