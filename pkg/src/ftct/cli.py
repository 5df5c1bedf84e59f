"""Command-line entry points.

Subcommands: ``run`` (the crawl loop), ``boards`` (print the discovered
board list), ``extract-links`` (derive media URLs from a stored archive) and
``verify-archive`` (integrity check).  Exit codes: 0 ok, 1 verification
violations, 2 configuration problems, 3 I/O or upstream failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .api import ApiClient, BoardListUnavailable
from .collector import Collector, EmptySelectionError, UnknownBoardsError
from .config import CollectorConfig, ConfigError, build_config
from .extract import extract_image_links, iter_thread_snapshot_files, verify_archive
from .logging_setup import init_logging, reset_logging
from .storage import ArchiveLayout, ArchiveWriteError, parse_thread_payload

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_CONFIG_OPTION_DESTS = (
    "boards",
    "exclude_boards",
    "data_dir",
    "min_interval_ms",
    "cycle_pause_s",
    "mode",
    "refetch_unchanged",
    "strict",
    "api_host",
    "media_host",
    "scheme",
    "user_agent",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftct", description="Text-only imageboard archival crawler."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="flat key = value config file")
    common.add_argument("--api-host", metavar="HOST", help="content API host[:port]")
    common.add_argument("--media-host", metavar="HOST", help="media host for link derivation")
    common.add_argument("--scheme", choices=["http", "https"], help="URL scheme")
    common.add_argument("--user-agent", metavar="UA", help="User-Agent header value")

    sub = parser.add_subparsers(dest="subcommand", required=True)

    run = sub.add_parser("run", parents=[common], help="run the archival loop")
    run.add_argument("--boards", metavar="A,B", help="only monitor these boards")
    run.add_argument("--exclude-boards", metavar="X,Y", help="monitor all boards except these")
    run.add_argument("--data-dir", metavar="DIR", help="archive root (default ./data)")
    run.add_argument("--min-interval-ms", metavar="MS", help="minimum gap between requests")
    run.add_argument("--cycle-pause-s", metavar="S", help="pause between cycles")
    run.add_argument("--mode", choices=["upfront", "jit"], help="catalog fetch timing")
    run.add_argument(
        "--refetch-unchanged", action="store_true", default=None,
        help="refetch every live thread each cycle",
    )
    run.add_argument(
        "--strict", action="store_true", default=None,
        help="treat unknown board codes as errors",
    )
    run.add_argument(
        "--max-cycles", type=int, metavar="N", default=None,
        help="stop after N cycles (default: run until signalled)",
    )

    sub.add_parser("boards", parents=[common], help="print the discovered board list")

    extract = sub.add_parser(
        "extract-links", parents=[common], help="derive media URLs from an archive"
    )
    extract.add_argument("--in", dest="archive", required=True, metavar="ARCHIVE",
                         help="archive root to read")
    extract.add_argument("--out", dest="output", required=True, metavar="TXT",
                         help="output file, one URL per line")

    verify = sub.add_parser(
        "verify-archive", parents=[common], help="check archive integrity"
    )
    verify.add_argument("root", metavar="ROOT", help="archive root to verify")
    return parser


def parse_cli(argv: list[str] | None = None) -> tuple[argparse.Namespace, CollectorConfig]:
    """Parse argv and assemble the layered configuration."""
    args = build_parser().parse_args(argv)
    flag_values = {
        dest: getattr(args, dest)
        for dest in _CONFIG_OPTION_DESTS
        if getattr(args, dest, None) is not None
    }
    config_file = args.config or os.environ.get("FTCT_CONFIG")
    config = build_config(
        flag_values, config_file=Path(config_file) if config_file else None
    )
    return args, config


def main(argv: list[str] | None = None) -> int:
    try:
        args, config = parse_cli(argv)
    except ConfigError as exc:
        print(f"ftct: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.subcommand == "run":
        return _cmd_run(args, config)
    if args.subcommand == "boards":
        return _cmd_boards(config)
    if args.subcommand == "extract-links":
        return _cmd_extract_links(args, config)
    if args.subcommand == "verify-archive":
        return _cmd_verify(args)
    raise AssertionError(f"unhandled subcommand {args.subcommand}")


def _cmd_run(args: argparse.Namespace, config: CollectorConfig) -> int:
    layout = ArchiveLayout(config.storage_root)
    try:
        info_path, debug_path = init_logging(layout, console=True)
    except OSError as exc:
        print(f"ftct: cannot open log files: {exc}", file=sys.stderr)
        return EXIT_IO
    logger.info("logging to %s and %s", info_path, debug_path)
    stop = threading.Event()
    previous_handlers = _install_signal_handlers(stop)
    collector = Collector(config, stop=stop)
    try:
        collector.run(max_cycles=args.max_cycles)
        return EXIT_OK
    except (EmptySelectionError, UnknownBoardsError, ConfigError) as exc:
        logger.error("configuration problem: %s", exc)
        print(f"ftct: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BoardListUnavailable, ArchiveWriteError, OSError) as exc:
        logger.critical("unrecoverable failure: %s", exc)
        print(f"ftct: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        collector.client.close()
        _restore_signal_handlers(previous_handlers)
        reset_logging()


def _cmd_boards(config: CollectorConfig) -> int:
    client = ApiClient(
        config.endpoints, config.budget, user_agent=config.user_agent
    )
    try:
        boards = client.fetch_board_list()
    except BoardListUnavailable as exc:
        print(f"ftct: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        client.close()
    for code in sorted(boards):
        title = boards[code].get("title", "")
        print(f"{code}\t{title}")
    return EXIT_OK


def _cmd_extract_links(args: argparse.Namespace, config: CollectorConfig) -> int:
    root = Path(args.archive)
    if not root.is_dir():
        print(f"ftct: archive root {root} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    links: list[str] = []
    seen: set[str] = set()
    for _date, board, path in iter_thread_snapshot_files(root):
        try:
            snapshot = parse_thread_payload(path.read_bytes(), board=board)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        for url in extract_image_links(snapshot, config.endpoints):
            if url not in seen:
                seen.add(url)
                links.append(url)
    try:
        with open(args.output, "w", encoding="utf-8") as handle:
            for url in links:
                handle.write(url + "\n")
    except OSError as exc:
        print(f"ftct: cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(links)} links to {args.output}")
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    root = Path(args.root)
    if not root.is_dir():
        print(f"ftct: archive root {root} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    report = verify_archive(root)
    for line in report.summary_lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_VIOLATIONS


def _install_signal_handlers(stop: threading.Event) -> dict[int, object]:
    previous: dict[int, object] = {}

    def request_stop(signum: int, _frame: object) -> None:
        logger.info("received signal %d, shutting down", signum)
        stop.set()

    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            previous[signum] = signal.signal(signum, request_stop)
        except ValueError:
            # not the main thread; signal handling is the embedder's job
            pass
    return previous


def _restore_signal_handlers(previous: dict[int, object]) -> None:
    for signum, handler in previous.items():
        signal.signal(signum, handler)  # type: ignore[arg-type]
