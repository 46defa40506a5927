"""Command line entry point: ``ampbreak {run,validate,replay,list-experiments}``."""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, WORKERS_ENV, ConfigError, load_config, validate_config

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ampbreak", description="Amplifier breakdown experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("--config", required=True, help="TOML experiment configuration")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--workers", type=int,
                     help=f"worker threads (default: config, then ${WORKERS_ENV}, then 1)")
    run.add_argument("--out", help="output directory (default: config output.dir)")

    val = sub.add_parser("validate", help="check a config and list defaulted fields")
    val.add_argument("--config", required=True)

    rep = sub.add_parser("replay", help="re-run a finished run and verify checksums")
    rep.add_argument("manifest", nargs="?", help="manifest.json or its directory")
    rep.add_argument("--config", dest="manifest_opt", help="same as the positional manifest")
    rep.add_argument("--workers", type=int)
    rep.add_argument("--out", help="directory for regenerated files (default: <run>/replay)")

    sub.add_parser("list-experiments", help="list the named experiments")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        for name, desc in EXPERIMENTS.items():
            print(f"{name:16s} {desc}")
        return 0
    if args.command == "validate":
        report = validate_config(args.config)
        print(report.to_text())
        return 0 if report.ok else 2
    # heavy imports only for commands that compute
    from .experiments import replay, run_experiment

    if args.command == "run":
        try:
            cfg = load_config(args.config)
        except ConfigError as e:
            for msg in e.messages:
                print(f"error: {msg}", file=sys.stderr)
            return 2
        cfg = cfg.with_overrides(seed=args.seed, workers=args.workers, out=args.out)
        out = run_experiment(cfg)
        print(f"wrote {out}")
        return 0
    manifest = args.manifest or args.manifest_opt
    if manifest is None:
        print("error: replay needs a manifest path", file=sys.stderr)
        return 2
    result = replay(manifest, args.out, workers=args.workers)
    print(result.to_text())
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
