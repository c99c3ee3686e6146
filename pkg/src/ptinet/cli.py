"""Command-line entry points: synth, train, eval, plot, inspect-data."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from typing import Optional, Sequence

from .config import (EncoderConfig, FeatureToggles, TrainConfig, apply_overrides, desk_encoder_config,
                     parse_config_text)
from .data import DEFAULT_VOCAB, build_samples, read_tracks, window_anchors
from .domain import validate_sample
from .model import ConstantVelocityPredictor
from .plotting import emit_qualitative_plot
from .synthetic import ScenarioConfig, scenario_suite, write_scenarios
from .training import Checkpoint, evaluate, load_dataset, train

# flag -> dotted TrainConfig key
TRAIN_FLAGS = {
    "m": ("m", int),
    "horizon_seconds": ("horizon_seconds", float),
    "lr_init": ("lr_init", float),
    "lr_power": ("lr_power", float),
    "epochs": ("max_epoch", int),
    "max_epoch": ("max_epoch", int),
    "batch_size": ("batch_size", int),
    "adam_epsilon": ("adam_epsilon", float),
    "weight_decay": ("weight_decay", float),
    "seed": ("seed", int),
    "stride": ("stride", int),
    "normalize": ("normalize", str),
    "data": ("train_data", str),
    "val_data": ("val_data", str),
    "out": ("out_dir", str),
    "beta": ("loss.beta", float),
    "lambda_traj": ("loss.lambda_traj", float),
    "lambda_int": ("loss.lambda_int", float),
}

PRESETS = {"desk": desk_encoder_config, "paper": EncoderConfig}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, (_, typ) in TRAIN_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any dotted TrainConfig key, e.g. encoder.latent_dim=8")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="encoder widths: desk (single CPU) or paper")
    p.add_argument("--no-images", action="store_true", help="zero the image path")
    p.add_argument("--no-flow", action="store_true", help="zero the optical-flow path")
    p.add_argument("--no-scene", action="store_true", help="drop scene attributes")
    p.add_argument("--allow-prefix-eval", action="store_true")
    p.add_argument("--val-every", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptinet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--num-pedestrians", type=int, default=1)
    p.add_argument("--crossing-fraction", type=float, default=0.5)
    p.add_argument("--noise-std", type=float, default=ScenarioConfig.noise_std)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", type=float, nargs="+", default=None)
    p.add_argument("--allow-prefix-eval", action="store_true")
    p.add_argument("--baseline", action="store_true", help="also score the constant-velocity baseline")
    p.add_argument("--report", help="write the MetricReport JSON here")

    p = sub.add_parser("plot", help="qualitative plot for one window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-data", help="summarize a track file")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--horizon-seconds", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=1)
    return parser


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig(encoder=PRESETS[args.preset]())
    overrides: dict[str, str] = {}
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            overrides.update(parse_config_text(fh.read()))
    for flag, (key, _) in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.no_images:
        overrides["encoder.toggles.use_images"] = "false"
    if args.no_flow:
        overrides["encoder.toggles.use_flow"] = "false"
    if args.no_scene:
        overrides["encoder.toggles.use_scene_attrs"] = "false"
    if args.allow_prefix_eval:
        overrides["allow_prefix_eval"] = "true"
    try:
        return apply_overrides(cfg, overrides)
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc


def _cmd_synth(args) -> int:
    scenarios = scenario_suite(args.count, args.seed, frames_per_track=args.frames,
                               num_pedestrians=args.num_pedestrians,
                               crossing_fraction=args.crossing_fraction, noise_std=args.noise_std)
    path = write_scenarios(scenarios, args.out)
    print(f"wrote {len(scenarios)} scenarios to {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = config_from_args(args)
    if not cfg.train_data:
        raise CliError("train needs --data (or train_data in --config)")
    result = train(cfg, out_dir=cfg.out_dir, val_every=args.val_every)
    final = result.log[-1]
    print(json.dumps({"out_dir": cfg.out_dir, "epochs": len(result.log), "final": final.__dict__}))
    return 0


def _load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    horizons = args.horizons or [cfg.horizon_seconds]
    samples = load_dataset(args.data, cfg, ckpt.vocab)
    if not samples:
        raise CliError(f"no windows in {args.data}")
    allow = args.allow_prefix_eval or cfg.allow_prefix_eval
    out = {}
    report = evaluate(ckpt.build_model(), samples, horizons, trained_n=cfg.n, allow_prefix=allow)
    out["model"] = json.loads(report.to_json())
    if args.baseline:
        out["constant_velocity"] = json.loads(evaluate(ConstantVelocityPredictor(), samples, horizons).to_json())
    text = json.dumps(out, indent=1, sort_keys=True)
    print(text)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    return 0


def _cmd_plot(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, ckpt.config, ckpt.vocab)
    if not 0 <= args.index < len(samples):
        raise CliError(f"--index {args.index} outside [0, {len(samples)})")
    sample = samples[args.index]
    pred = ckpt.build_model().predict([sample], ckpt.config.n)[0]
    emit_qualitative_plot(sample, pred, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    path = args.data
    if os.path.isdir(path):
        path = os.path.join(path, "tracks.jsonl")
    if not os.path.exists(path):
        raise CliError(f"track file not found: {path}")
    tracks = read_tracks(path)
    n = int(round(args.horizon_seconds * 30))
    samples = build_samples(tracks, args.m, n, args.stride, root=os.path.dirname(path),
                            image_dims_target=(8, 14), vocab=DEFAULT_VOCAB,
                            toggles=FeatureToggles(use_images=False, use_flow=False)).samples
    failures = Counter()
    for s in samples:
        res = validate_sample(s, args.m, n)
        if not res:
            failures[res.reason] += 1
    positive = sum(sum(t.intention_labels) for t in tracks)
    frames = sum(len(t) for t in tracks)
    summary = {
        "tracks": len(tracks),
        "videos": len({t.video_id for t in tracks}),
        "frames": frames,
        "crossing_label_fraction": positive / frames if frames else 0.0,
        "windows_closed_form": sum(len(window_anchors(len(t), args.m, n, args.stride)) for t in tracks),
        "windows": len(samples),
        "invalid_windows": dict(failures),
        "vocab_widths": [DEFAULT_VOCAB.attrs_width, DEFAULT_VOCAB.behavior_width, DEFAULT_VOCAB.scene_width],
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "plot": _cmd_plot,
    "inspect-data": _cmd_inspect,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
