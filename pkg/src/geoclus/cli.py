"""Command-line entry point: ``geoclus SUBCOMMAND [options]``.

Exit status is 0 on success, 1 on a usage or configuration error and 2 when
a stage fails at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .pipeline import ConfigError, PipelineConfig

log = logging.getLogger("geoclus")

SUBCOMMANDS = {
    "generate-data": ("data",),
    "train": ("train",),
    "fit-variance": ("variance",),
    "distances": ("distances",),
    "cluster": ("cluster",),
    "volume": ("volume",),
    "report": ("report",),
    "run": pipeline.STAGES,
}
STAGE_ALIASES = {"generate-data": "data", "fit-variance": "variance"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--preset", help=f"one of: {', '.join(pipeline.PRESETS)}")
    common.add_argument("--seed", type=int, help="pipeline seed (overrides config)")
    common.add_argument("--out", type=Path,
                        help="run directory (default $GEOCLUS_OUT/<preset>-seed<N> or runs/...)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for distances")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="geoclus", description="Geodesic clustering in VAE latent spaces.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "run":
            p.add_argument("--stages", help=f"comma-separated subset of {','.join(pipeline.STAGES)}")
    hm = sub.add_parser("heatmap", help="render a CSV matrix or volume field as a PGM")
    hm.add_argument("input", type=Path)
    hm.add_argument("output", type=Path)
    return parser


def resolve_config(args) -> tuple[PipelineConfig, Path]:
    """Preset or saved run config, then the config file, then flags."""
    saved = args.out / "config.json" if args.out else None
    if args.preset:
        cfg = pipeline.preset_config(args.preset)
    elif args.config is None and saved is not None and saved.exists():
        cfg = PipelineConfig.from_dict(json.loads(saved.read_text()))
    else:
        cfg = PipelineConfig()
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        base = cfg if args.preset else pipeline.preset_config(doc.get("preset", cfg.preset))
        cfg = PipelineConfig.from_dict(doc, base)
    layered = {}
    for text in args.overrides:
        for key, value in pipeline.parse_override(text).items():
            if isinstance(value, dict):
                layered.setdefault(key, {}).update(value)
            else:
                layered[key] = value
    if args.seed is not None:
        layered["seed"] = args.seed
    if layered:
        cfg = PipelineConfig.from_dict(layered, cfg)
    out = args.out
    if out is None:
        root = Path(os.environ.get("GEOCLUS_OUT", "runs"))
        out = root / f"{cfg.preset}-seed{cfg.seed}"
    return cfg, out


def parse_stages(text: str | None):
    if not text:
        return pipeline.STAGES
    stages = [STAGE_ALIASES.get(s.strip(), s.strip()) for s in text.split(",") if s.strip()]
    bad = [s for s in stages if s not in pipeline.STAGES]
    if bad:
        raise ConfigError(f"unknown stage(s) {', '.join(bad)}; valid: {', '.join(pipeline.STAGES)}")
    return stages


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"geoclus: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "heatmap":
            pipeline.render_heatmap_file(args.input, args.output)
            return 0
        cfg, out = resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        stages = parse_stages(args.stages) if args.command == "run" else SUBCOMMANDS[args.command]
        pipeline.run(cfg, out, stages, jobs=args.jobs)
        log.info("outputs in %s", out)
    except (ConfigError, UsageError) as exc:
        print(f"geoclus: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of a stage
        log.debug("traceback", exc_info=True)
        print(f"geoclus: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
