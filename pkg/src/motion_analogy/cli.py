"""Command-line entry point: ``motion-analogy <command> [--config PATH] [--set section.key=value]``.

Configs are INI files. Every section key has a typed default; unknown keys
are rejected. Each run writes into a fresh ``--out`` directory together
with a fully resolved copy of its configuration.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ._validation import CheckpointError, ClipIOError, NotFittedError, ValidationError
from .codec import LatentCodec
from .diffusion import VideoDenoiser
from .evaluation import (CodecEmbedder, ablation_table, evaluate_transfer, frame_consistency,
                         keypoint_track, output_track, track_correlation, write_report)
from .finetune import AblationVariant, FinetuneConfig, LoRAAdapter, build_warped_clip, finetune, variant_config
from .flow import LatentFlowNet
from .synthdata import SamplerConfig, demo_pair, load_clip, load_dataset, make_dataset, save_clip, save_dataset
from .transfer import (TransferConfig, TransferModels, run_pair, single_frame_transfer, source_latent_clip,
                       transfer, write_run)

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-codec", "train-lofnet", "train-diffusion", "finetune", "transfer",
            "eval", "demo-pair")


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=()):
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


def _estimator_defaults(cls, skip=("seed",)):
    return {k: v for k, v in cls().get_params().items() if k not in skip}


def _schema():
    ft = _dataclass_defaults(FinetuneConfig, skip=("seed",))
    ft.update(variant="", source="demo", driving="demo", codec="", lofnet="", base="",
              single_frame=False)
    return {
        "run": {"seed": 0},
        "data": {"n_videos": 200, **_dataclass_defaults(SamplerConfig)},
        "codec": {"data": "", **_estimator_defaults(LatentCodec)},
        "lofnet": {"data": "", "codec": "", **_estimator_defaults(LatentFlowNet)},
        "diffusion": {"data": "", "codec": "", **_estimator_defaults(VideoDenoiser)},
        "finetune": ft,
        "transfer": {"adapter": "", **_dataclass_defaults(TransferConfig, skip=("seed",))},
        "eval": {"runs": "", "data": "", "variants": ",".join(v.value for v in AblationVariant)},
    }


def _parse_value(raw, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            value = raw.lower()
            if value not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[value]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or (default is None and "," in raw):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_number(p) for p in parts)
        if default is None:
            return None if raw.lower() in ("", "none") else _number(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _number(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return "none" if value is None else str(value)


def _ini_parser():
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (diffusion.T)
    return parser


class RunConfig:
    """Typed view over the sectioned key-value configuration."""

    def __init__(self, values):
        self.values = values

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        schema = _schema()
        values = {sec: dict(keys) for sec, keys in schema.items()}
        if path is not None:
            parser = _ini_parser()
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section, raw=True):
                    cls._assign(values, schema, section, key, raw)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            name, raw = item.split("=", 1)
            section, key = name.split(".", 1)
            cls._assign(values, schema, section.strip(), key.strip(), raw)
        if seed is not None:
            values["run"]["seed"] = int(seed)
        return cls(values)

    @staticmethod
    def _assign(values, schema, section, key, raw):
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in schema[section]:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        values[section][key] = _parse_value(raw, schema[section][key], f"{section}.{key}")

    def section(self, name):
        return dict(self.values[name])

    @property
    def seed(self):
        return int(self.values["run"]["seed"])

    def to_ini(self, sections=None):
        parser = _ini_parser()
        for sec, keys in self.values.items():
            if sections is None or sec in sections or sec == "run":
                parser[sec] = {k: _format_value(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def as_dict(self, sections=None):
        return {sec: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
                for sec, keys in self.values.items() if sections is None or sec in sections or sec == "run"}


def _prepare_out(out):
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output directory {out} already exists and is not empty; choose a new --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if not path:
        raise ConfigError(f"no {what} given")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_codec(path):
    return LatentCodec.load(_require(path, "codec checkpoint"))


def _load_clip(spec, which):
    if spec == "demo":
        source, driving = demo_pair()
        return source if which == "source" else driving
    return load_clip(_require(spec, f"{which} clip"))


def _encode_dataset(codec, root):
    clips = load_dataset(_require(root, "dataset directory"))
    return [codec.encode_clip(c) for c in clips]


def _estimator_params(section, cls):
    allowed = set(cls().get_params())
    return {k: v for k, v in section.items() if k in allowed}


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    sec = cfg.section("data")
    n = sec.pop("n_videos")
    sampler = SamplerConfig(**sec)
    clips = make_dataset(n, sampler, seed=cfg.seed)
    save_dataset(clips, out / "clips")
    return {"clips": len(clips)}


def cmd_train_codec(cfg, out):
    sec = cfg.section("codec")
    clips = load_dataset(_require(sec["data"], "dataset directory"))
    codec = LatentCodec(**_estimator_params(sec, LatentCodec), seed=cfg.seed).fit(clips)
    codec.save(out / "codec.pt")
    return {"heldout_mse": codec.heldout_mse_, "heldout_baseline_mse": codec.heldout_baseline_mse_}


def cmd_train_lofnet(cfg, out):
    sec = cfg.section("lofnet")
    latents = _encode_dataset(_load_codec(sec["codec"]), sec["data"])
    np.savez_compressed(out / "latents.npz", *[c.latents for c in latents])
    net = LatentFlowNet(**_estimator_params(sec, LatentFlowNet), seed=cfg.seed).fit(latents)
    net.save(out / "lofnet.pt")
    return {"initial_heldout_loss": net.initial_heldout_loss_, "final_heldout_loss": net.final_heldout_loss_}


def cmd_train_diffusion(cfg, out):
    sec = cfg.section("diffusion")
    latents = _encode_dataset(_load_codec(sec["codec"]), sec["data"])
    den = VideoDenoiser(**_estimator_params(sec, VideoDenoiser), seed=cfg.seed).fit(latents)
    den.save(out / "denoiser.pt")
    return {"initial_loss": den.initial_loss_, "final_loss": den.final_loss_}


def _finetune_inputs(cfg):
    sec = cfg.section("finetune")
    codec = _load_codec(sec["codec"])
    lofnet = LatentFlowNet.load(_require(sec["lofnet"], "flow network checkpoint"))
    base = VideoDenoiser.load(_require(sec["base"], "denoiser checkpoint"), grid=(codec.latent_size,) * 2)
    source = _load_clip(sec["source"], "source")
    driving = _load_clip(sec["driving"], "driving")
    names = {f.name for f in fields(FinetuneConfig)}
    ft_cfg = FinetuneConfig(**{k: v for k, v in sec.items() if k in names}, seed=cfg.seed)
    if ft_cfg.label is None:
        ft_cfg.label = source.label
    if sec["variant"]:
        ft_cfg = variant_config(sec["variant"], ft_cfg)
    return sec, codec, lofnet, base, source, driving, ft_cfg


def cmd_finetune(cfg, out):
    sec, codec, lofnet, base, source, driving, ft_cfg = _finetune_inputs(cfg)
    src_lat = source_latent_clip(codec, source, sec["single_frame"], len(driving))
    warped = None
    if ft_cfg.use_warp_branch:
        warped = build_warped_clip(src_lat.latents[0], source.keypoints[0], driving.keypoints, lofnet)
    adapter = finetune(base, src_lat, warped, ft_cfg.label, ft_cfg)
    adapter.save(out / "adapter.pt")
    with open(out / "loss_log.json", "w") as fh:
        json.dump(adapter.loss_log, fh)
    return {"final_D_loss": adapter.loss_log[-1]["D_loss"] if adapter.loss_log else None}


def _transfer_config(cfg):
    sec = cfg.section("transfer")
    sec.pop("adapter")
    return TransferConfig(**sec, seed=cfg.seed)


def _transfer_once(cfg, run_dir, sec, codec, lofnet, base, source, driving, ft_cfg, tr_cfg, adapter_path=""):
    tr_cfg.single_frame = bool(sec["single_frame"] or tr_cfg.single_frame)
    if adapter_path:
        adapter = LoRAAdapter.load(_require(adapter_path, "adapter checkpoint"), base)
        models = TransferModels(codec, lofnet, base, adapter)
        run = single_frame_transfer if tr_cfg.single_frame else transfer
        result = run(source, driving, models, tr_cfg, ft_cfg.label)
    else:
        result, _ = run_pair(source, driving, codec, lofnet, base, ft_cfg, tr_cfg)
    embedder = CodecEmbedder(codec)
    metrics = evaluate_transfer(result, source, embedder)
    write_run(result, driving, run_dir, config=cfg.as_dict(), metrics=metrics)
    return metrics


def cmd_transfer(cfg, out):
    sec, codec, lofnet, base, source, driving, ft_cfg = _finetune_inputs(cfg)
    adapter_path = cfg.section("transfer")["adapter"]
    return _transfer_once(cfg, out, sec, codec, lofnet, base, source, driving, ft_cfg,
                          _transfer_config(cfg), adapter_path)


def cmd_eval(cfg, out, ablation=False):
    sec = cfg.section("eval")
    if ablation:
        fsec, codec, lofnet, base, source, driving, ft_cfg = _finetune_inputs(cfg)
        rows = {}
        for name in [v.strip() for v in str(sec["variants"]).split(",") if v.strip()]:
            variant_cfg = variant_config(name, ft_cfg)
            rows[name] = _transfer_once(cfg, out / name, fsec, codec, lofnet, base, source, driving,
                                        variant_cfg, _transfer_config(cfg))
    else:
        runs = [r.strip() for r in str(sec["runs"]).split(",") if r.strip()]
        if not runs:
            raise ConfigError("eval needs eval.runs (comma-separated run directories) or --ablation")
        codec_path = cfg.section("finetune")["codec"]
        embedder = CodecEmbedder(_load_codec(codec_path)) if codec_path else None
        rows = {}
        for run in runs:
            clip = load_clip(_require(run, "run directory"), sidecar="manifest.json")
            report = {}
            track = output_track(clip.frames)
            if clip.keypoints and track is not None:
                report["motion_fidelity"] = track_correlation(track, keypoint_track(clip.keypoints))
            if embedder is not None:
                report["frame_consistency"] = frame_consistency(clip, embedder)
            metrics_path = Path(run) / "metrics.json"
            if metrics_path.exists():
                report["identity_proxy"] = json.loads(metrics_path.read_text()).get("identity_proxy")
            rows[Path(run).name] = report
    table = ablation_table(rows)
    (out / "table.md").write_text(table + "\n")
    write_report(rows, out / "report.json")
    print(table)
    return {"rows": len(rows)}


def cmd_demo_pair(cfg, out):
    source, driving = demo_pair()
    save_clip(source, out / "source")
    save_clip(driving, out / "driving")
    return {"source": source.label, "driving": driving.label}


_SECTIONS = {"gen-data": ("data",), "train-codec": ("codec",), "train-lofnet": ("lofnet",),
             "train-diffusion": ("diffusion",), "finetune": ("finetune",),
             "transfer": ("finetune", "transfer"), "eval": ("finetune", "transfer", "eval"),
             "demo-pair": ()}


def build_parser():
    parser = argparse.ArgumentParser(prog="motion-analogy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
        p.add_argument("--out", required=True, help="fresh output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if name == "eval":
            p.add_argument("--ablation", action="store_true",
                           help="fine-tune and transfer once per ablation variant and tabulate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen-data": cmd_gen_data, "train-codec": cmd_train_codec, "train-lofnet": cmd_train_lofnet,
                "train-diffusion": cmd_train_diffusion, "finetune": cmd_finetune, "transfer": cmd_transfer,
                "eval": cmd_eval, "demo-pair": cmd_demo_pair}
    try:
        cfg = RunConfig.load(args.config, args.set, args.seed)
        out = _prepare_out(args.out)
        sections = _SECTIONS[args.command]
        if args.command != "transfer":
            # transfer keeps its snapshot inside manifest.json
            (out / "config.ini").write_text(cfg.to_ini(sections))
        kwargs = {"ablation": args.ablation} if args.command == "eval" else {}
        summary = handlers[args.command](cfg, out, **kwargs)
    except (ConfigError, ValidationError, CheckpointError, ClipIOError, NotFittedError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"motion-analogy {args.command}: error: {message}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "out": str(out), **(summary or {})}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
