"""Command line entry point: ``hanabi-lab <stage> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hanabi_lab.engine import ConfigError
from hanabi_lab.harness import (
    CONFIG_NAME,
    STAGES,
    RunConfig,
    RunConfigError,
    StageError,
    emit_results,
    prepare_dir,
    run_lock,
    run_pipeline,
    run_stage,
    smoke_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """``section.key=value`` assignments; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise RunConfigError(f"override {item!r} is not key=value")
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {} if node.get(p) is None else node[p]
                if not isinstance(node[p], dict):
                    raise RunConfigError(f"{p!r} in {key!r} is not a section")
            node = node[p]
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(args) -> tuple[RunConfig, str | None]:
    """Config from ``--config`` (or the run directory's copy), plus overrides.

    Returns the config and the exact text to persist: the file verbatim when
    nothing was overridden.
    """
    text = None
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
    elif args.out and (Path(args.out) / CONFIG_NAME).exists():
        text = (Path(args.out) / CONFIG_NAME).read_text(encoding="utf-8")
    if text is None:
        doc = smoke_config().to_dict() if args.smoke else RunConfig().to_dict()
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise RunConfigError(f"config is not valid JSON: {e}") from e
    overrides = list(args.set or [])
    if args.n_games is not None:
        overrides.append(f"eval.n_games={args.n_games}")
    if args.data_fraction is not None:
        overrides.append(f"ablation.data_fraction={args.data_fraction}")
    if args.discard_in_obs:
        overrides.append("ablation.discard_in_obs=true")
    if text is not None and overrides:
        before = json.loads(text)
        doc = apply_overrides(doc, overrides)
        if doc == before:
            return RunConfig.from_dict(doc), text
        text = None
    elif overrides:
        doc = apply_overrides(doc, overrides)
    cfg = RunConfig.from_dict(doc)
    return cfg, text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hanabi-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline", "emit", "show-config"):
        sp = sub.add_parser(name)
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        sp.add_argument("--config", help="run config JSON file")
        sp.add_argument("--out", help="artifact directory (default: the config's output_dir); "
                                      "not written into the persisted config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. student.env_steps=5000")
        sp.add_argument("--smoke", action="store_true", help="start from the smoke config")
        sp.add_argument("--n-games", type=int, help="evaluation games (eval.n_games)")
        sp.add_argument("--data-fraction", type=float, help="ablation.data_fraction")
        sp.add_argument("--discard-in-obs", action="store_true", help="render the discard pile")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, text = load_config(args)
    except (RunConfigError, ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output_dir)
    try:
        if args.command == "show-config":
            sys.stdout.write(text if text is not None else cfg.to_json())
        elif args.command == "pipeline":
            run_pipeline(cfg, out, text)
            print(out)
        elif args.command == "emit":
            for path in emit_results(out).values():
                print(path)
        else:
            with run_lock(out):
                prepare_dir(cfg, out, text)
                run_stage(args.command, cfg, out)
            print(out)
    except StageError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
