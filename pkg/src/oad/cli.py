"""``oad`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import pipeline
from .augment import make_view_pair
from .config import RunConfig, check, defaults_dict, validate_config
from .errors import ConfigError, DataError, NumericError
from .features import MelSpectrogram, render_image, write_mels, write_ppm
from .segment import load_audio
from .synthgen import SynthSpec, synth_dataset

log = logging.getLogger("oad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# config sections each subcommand exposes as --section.key flags
STAGE_SECTIONS = {
    "synth": (),
    "segment": ("segment", "features"),
    "featurize": ("features",),
    "augment-preview": ("features", "augment"),
    "pretrain": ("features", "augment", "simclr"),
    "discover": ("opencon",),
    "evaluate": ("opencon", "eval"),
    "defaults": (),
}

# short aliases: flag -> (section, key)
ALIASES = {
    "segment": {},
    "featurize": {"--rgb-threshold": ("features", "rgb_threshold")},
    "augment-preview": {"--mode": ("augment", "mode"), "--ia-compose": ("augment", "ia_compose")},
    "pretrain": {"--mode": ("augment", "mode"), "--ia-compose": ("augment", "ia_compose"),
                 "--epochs": ("simclr", "epochs")},
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _value_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if default is None:
        return lambda t: None if t.lower() == "none" else float(t)
    if isinstance(default, (tuple, list)):
        kind = type(default)
        inner = type(default[0]) if default else str

        def parse(t):
            try:
                return kind(inner(x) for x in t.split(","))
            except ValueError:
                raise argparse.ArgumentTypeError(f"expected comma-separated values, got {t!r}") from None
        return parse
    return str


def _show(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return v


def _add_config_flags(p, sections):
    defaults = RunConfig()
    for sec in sections:
        group = p.add_argument_group(f"{sec} settings")
        for f in fields(getattr(defaults, sec)):
            d = getattr(getattr(defaults, sec), f.name)
            group.add_argument(f"--{sec}.{f.name}", dest=f"cfg:{sec}.{f.name}", type=_value_type(d),
                               default=argparse.SUPPRESS, metavar="FLOAT|none" if d is None else type(d).__name__.upper(),
                               help=f"(default: {_show(d)})")


def _common(p, seed=True):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--threads", type=int, default=1, help="worker thread cap")
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (falls back to $OAD_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _defaults_epilog():
    lines = ["configuration defaults (override with --config or --section.key flags):"]
    for sec, vals in defaults_dict().items():
        for k, v in vals.items():
            lines.append(f"  {sec}.{k} = {json.dumps(v)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="oad", description="Open-set audio pattern discovery pipeline.",
                    epilog=_defaults_epilog(), formatter_class=Formatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=Formatter)
        _add_config_flags(p, STAGE_SECTIONS[name])
        for flag, (sec, key) in ALIASES.get(name, {}).items():
            d = getattr(getattr(RunConfig(), sec), key)
            p.add_argument(flag, dest=f"cfg:{sec}.{key}", type=_value_type(d), default=argparse.SUPPRESS,
                           help=f"alias of --{sec}.{key} (default: {_show(d)})")
        return p

    p = add("synth", "write a synthetic dataset (WAV files and manifest.csv)")
    p.add_argument("--spec", help="JSON synth spec; omitted keys keep their defaults")
    p.add_argument("--out", required=True)
    _common(p)

    p = add("segment", "cut recordings into 0.5 s windows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common(p, seed=False)

    p = add("featurize", "render spectrogram images and drop low-information windows")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    _common(p, seed=False)

    p = add("augment-preview", "write both augmented views of one window")
    p.add_argument("--window", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = add("pretrain", "contrastive pre-training of the encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--keep-last-batch", dest="cfg:simclr.keep_last_batch", action="store_const",
                   const=True, default=argparse.SUPPRESS, help="train on the short final batch too")
    _common(p)

    p = add("discover", "prototype learning of known and novel classes")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = add("evaluate", "repeated trials on user-exclusive splits")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = add("defaults", "print the default configuration as JSON")
    p.add_argument("--out", help="write to this file instead of stdout")
    return parser


def resolve_seed(value, fallback=0):
    """``--seed`` if given, else ``$OAD_SEED``, else ``fallback``."""
    if value is not None:
        return value
    env = os.environ.get("OAD_SEED")
    if env is None or env == "":
        return fallback
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"OAD_SEED must be an integer, got {env!r}") from None


def load_config(args) -> RunConfig:
    cfg = validate_config(args.config) if getattr(args, "config", None) else RunConfig()
    for dest, value in vars(args).items():
        if dest.startswith("cfg:"):
            sec, key = dest[4:].split(".")
            setattr(getattr(cfg, sec), key, value)
    problems = check(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _preview(args, cfg, seed):
    clip = load_audio(args.window)
    mel = cfg.features.mel()
    if clip.sample_rate != mel.sample_rate:
        raise DataError(f"{args.window}: sample rate {clip.sample_rate} != {mel.sample_rate}")
    pair = make_view_pair(clip.samples, cfg.augment, seed, mel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, view in (("view_a", pair.view_a), ("view_b", pair.view_b)):
        if isinstance(view, MelSpectrogram):
            write_mels(out / f"{name}.mels", view)
            write_ppm(out / f"{name}.ppm", render_image(view, colormap_id=cfg.features.colormap))
        else:
            write_ppm(out / f"{name}.ppm", view)


def run(args) -> int:
    cmd = args.command
    if cmd == "defaults":
        text = json.dumps(defaults_dict(), indent=2, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if cmd == "synth":
        if args.spec:
            try:
                data = json.loads(Path(args.spec).read_text() or "{}")
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError([("spec", str(exc))]) from None
            if not isinstance(data, dict):
                raise ConfigError([("spec", "top level must be an object")])
            try:
                seed = resolve_seed(args.seed, data.get("seed", 0))
                spec = SynthSpec.from_dict({**data, "seed": seed})
            except (TypeError, KeyError, ValueError) as exc:
                raise ConfigError([("spec", str(exc))]) from None
        else:
            spec = SynthSpec(seed=resolve_seed(args.seed))
        rows = synth_dataset(spec, args.out)
        print(f"wrote {len(rows)} recordings to {args.out}")
        return EXIT_OK

    cfg = load_config(args)
    threads = args.threads
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    if cmd == "segment":
        rows = pipeline.segment_manifest(args.manifest, args.out, cfg, threads)
        print(f"wrote {len(rows)} windows to {args.out}")
    elif cmd == "featurize":
        kept, dropped = pipeline.featurize_dir(args.in_dir, args.out, cfg, threads)
        print(f"kept {len(kept)} windows, dropped {len(dropped)}")
    elif cmd == "augment-preview":
        _preview(args, cfg, resolve_seed(args.seed))
    elif cmd == "pretrain":
        cfg.simclr.seed = resolve_seed(args.seed, cfg.simclr.seed)
        _, losses = pipeline.pretrain_stage(args.manifest, args.out, cfg, threads)
        if losses:
            print(f"final loss {losses[-1][2]:.4f}")
    elif cmd == "discover":
        result = pipeline.discover_stage(args.pretrained, args.manifest, args.out, cfg,
                                         resolve_seed(args.seed, cfg.opencon.seed), threads)
        print(f"lambda {result.lam:.4f}; assignments in {args.out}")
    elif cmd == "evaluate":
        report = pipeline.evaluate_stage(args.pretrained, args.manifest, args.out, cfg,
                                         resolve_seed(args.seed), threads)
        for cls, s in report.summary().items():
            print(f"{cls:8s} mean {s['mean']:.3f} std {s['std']:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print("oad: invalid configuration:", file=sys.stderr)
        for key, msg in exc.problems:
            print(f"  {key or '<file>'}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"oad: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"oad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"oad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
