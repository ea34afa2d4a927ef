"""
Command-line driver: wsikit <command> [options].

Exit codes: 0 ok, 1 warning or unexpected failure, 2 configuration error,
3 input error, 4 non-finite numbers detected.
"""
import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from wsikit.errors import ConfigError, WsikitError
from wsikit.utils.config import PipelineConfig, load_config
from wsikit.utils.logging import get_logger

EXIT_OK = 0
EXIT_WARNING = 1
EXIT_UNEXPECTED = 5

COMMANDS = ["tile", "encode", "compress", "zeroshot", "probe", "mil", "metrics", "stageplan", "run"]


def _command(name: str) -> Callable[..., Dict[str, Any]]:
    # Lazy imports keep `--help` fast (torch, langgraph)
    if name == "tile":
        from wsikit.nodes.tile import cmd_tile
        return cmd_tile
    if name == "encode":
        from wsikit.nodes.encode import cmd_encode
        return cmd_encode
    if name == "compress":
        from wsikit.nodes.compress import cmd_compress
        return cmd_compress
    if name == "zeroshot":
        from wsikit.nodes.zeroshot import cmd_zeroshot
        return cmd_zeroshot
    if name == "probe":
        from wsikit.nodes.probe import cmd_probe
        return cmd_probe
    if name == "mil":
        from wsikit.nodes.mil import cmd_mil
        return cmd_mil
    if name == "metrics":
        from wsikit.nodes.metrics import cmd_metrics
        return cmd_metrics
    if name == "stageplan":
        from wsikit.nodes.stageplan import cmd_stageplan
        return cmd_stageplan
    raise ValueError(f"Unknown command: {name}. Available commands: {COMMANDS}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsikit",
        description="Whole-slide tiling, encoding, token compression and evaluation protocols",
    )
    parser.add_argument("--config", type=Path, help="Flat key=value config file")
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--threads", type=int, help="Worker threads for tiling/encoding/probing")
    parser.add_argument("--verbose", action="store_true", default=None, help="Debug logging")
    parser.add_argument("--work-dir", type=Path, help="Output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key (repeatable)")

    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("tile", help="Segment tissue, plan regions, write the tile manifest")
    subparsers.add_parser("encode", help="Encode manifest regions into region features")
    subparsers.add_parser("compress", help="Compress region features to the fixed token set")
    subparsers.add_parser("zeroshot", help="Prompt-ensemble zero-shot classification")
    subparsers.add_parser("probe", help="N-shot linear probing protocol")
    subparsers.add_parser("mil", help="Train the gated-attention MIL head")
    subparsers.add_parser("metrics", help="BLEU-1..4 and ROUGE-L of candidate reports")
    stageplan = subparsers.add_parser("stageplan", help="Render training stage plans")
    stageplan.add_argument("--stage", type=int, help="Stage to render (default: config stage)")
    stageplan.add_argument("--all", dest="all_stages", action="store_true", help="Render all four stages")
    subparsers.add_parser("run", help="tile -> encode -> compress -> zeroshot")
    return parser


def _parse_overrides(pairs: List[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        overrides[key.strip().lower()] = value.strip()
    return overrides


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, Any] = _parse_overrides(args.overrides)
    overrides.update({
        "seed": args.seed,
        "threads": args.threads,
        "verbose": args.verbose,
        "work_dir": args.work_dir,
        "stage": getattr(args, "stage", None),
    })
    return load_config(args.config, overrides)


def _error_location(error: BaseException) -> str:
    frames = traceback.extract_tb(error.__traceback__)
    if not frames:
        return ""
    frame = frames[-1]
    return f"{Path(frame.filename).name}:{frame.lineno}"


def run_command(command: str, config: PipelineConfig, all_stages: bool = False) -> int:
    """Execute one command and print its summary; returns the exit code."""
    if command == "run":
        from wsikit.graph import create_graph
        result = create_graph().invoke({"config": config})
        summary = {step: result.get(step) for step in ("tile", "encode", "compress", "zeroshot")}
        region_count = (result.get("tile") or {}).get("region_count", 0)
    else:
        handler = _command(command)
        summary = handler(config, all_stages=all_stages) if command == "stageplan" else handler(config)
        region_count = summary.get("region_count", 1) if command == "tile" else 1

    print(json.dumps(summary, indent=2, default=str))
    if command in ("tile", "run") and region_count == 0:
        print("warning: no region passed the tissue threshold; manifest is empty", file=sys.stderr)
        return EXIT_WARNING
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for wsikit"""
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        get_logger().set_verbose(config.verbose)
        return run_command(args.command, config, all_stages=getattr(args, "all_stages", False))

    except WsikitError as e:
        print(f"error ({type(e).__name__}) at {_error_location(e)}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"unexpected error at {_error_location(e)}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
