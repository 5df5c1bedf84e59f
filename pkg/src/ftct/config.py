"""Collector configuration and the flag > env > file > default chain.

The config file is line-oriented ``key = value`` with ``#`` comments; keys
mirror the CLI flag names.  Environment variables use the ``FTCT_`` prefix
(``FTCT_DATA_DIR``, ``FTCT_MIN_INTERVAL_MS``, ...).
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .api import DEFAULT_USER_AGENT, EndpointSet, RequestBudget, validate_board_code

ENV_PREFIX = "FTCT_"


class ConfigError(Exception):
    """Invalid configuration; the CLI reports it and exits with code 2."""


class SchedulingMode(enum.Enum):
    # "upfront" grabs all catalogs first; "jit" fetches each board's catalog
    # directly before collecting that board's threads.
    CATALOGS_UPFRONT = "upfront"
    CATALOG_JUST_IN_TIME = "jit"


@dataclass(frozen=True)
class CollectorConfig:
    storage_root: Path = Path("data")
    include_boards: tuple[str, ...] = ()
    exclude_boards: tuple[str, ...] = ()
    scheduling_mode: SchedulingMode = SchedulingMode.CATALOG_JUST_IN_TIME
    cycle_pause_s: float = 60.0
    refetch_unchanged: bool = False
    budget: RequestBudget = field(default_factory=RequestBudget)
    endpoints: EndpointSet = field(default_factory=EndpointSet)
    user_agent: str = DEFAULT_USER_AGENT
    strict: bool = False

    def __post_init__(self) -> None:
        if self.include_boards and self.exclude_boards:
            raise ConfigError("--boards and --exclude-boards cannot both be set")
        if self.cycle_pause_s < 0:
            raise ConfigError("cycle pause must be >= 0")


def _parse_board_list(value: str) -> tuple[str, ...]:
    boards: list[str] = []
    for token in value.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            validate_board_code(token)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if token not in boards:
            boards.append(token)
    return tuple(boards)


def _parse_positive_ms(value: str) -> float:
    try:
        number = float(value)
    except ValueError:
        raise ConfigError(f"malformed duration: {value!r}") from None
    if number <= 0:
        raise ConfigError(f"duration must be > 0, got {value!r}")
    return number


def _parse_nonnegative_s(value: str) -> float:
    try:
        number = float(value)
    except ValueError:
        raise ConfigError(f"malformed duration: {value!r}") from None
    if number < 0:
        raise ConfigError(f"duration must be >= 0, got {value!r}")
    return number


def _parse_bool(value: str | bool) -> bool:
    if isinstance(value, bool):
        return value
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"malformed boolean: {value!r}")


def _parse_mode(value: str) -> SchedulingMode:
    try:
        return SchedulingMode(value.strip().lower())
    except ValueError:
        raise ConfigError(f"mode must be 'upfront' or 'jit', got {value!r}") from None


# canonical option key -> parser from raw string
_OPTION_PARSERS: dict[str, Callable[[Any], Any]] = {
    "boards": _parse_board_list,
    "exclude_boards": _parse_board_list,
    "data_dir": Path,
    "min_interval_ms": _parse_positive_ms,
    "cycle_pause_s": _parse_nonnegative_s,
    "mode": _parse_mode,
    "refetch_unchanged": _parse_bool,
    "strict": _parse_bool,
    "api_host": str,
    "media_host": str,
    "scheme": str,
    "user_agent": str,
}


def parse_config_file(path: Path) -> dict[str, str]:
    """Read flat ``key = value`` lines; unknown keys are configuration errors."""
    values: dict[str, str] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _OPTION_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
        values[key] = value.strip()
    return values


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for key in _OPTION_PARSERS:
        env_name = ENV_PREFIX + key.upper()
        if env_name in environ:
            values[key] = environ[env_name]
    return values


def build_config(
    flag_values: Mapping[str, Any] | None = None,
    *,
    config_file: Path | None = None,
    environ: Mapping[str, str] | None = None,
) -> CollectorConfig:
    """Assemble a CollectorConfig with flag > env > file > default layering.

    ``flag_values`` holds only the options the user actually passed (raw
    strings except booleans).  Raises ConfigError on any malformed or
    contradictory value.
    """
    environ = os.environ if environ is None else environ
    raw: dict[str, Any] = {}
    if config_file is not None:
        raw.update(parse_config_file(config_file))
    raw.update(env_overrides(environ))
    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if key not in _OPTION_PARSERS:
            raise ConfigError(f"unknown option {key!r}")
        raw[key] = value

    parsed: dict[str, Any] = {}
    for key, value in raw.items():
        parsed[key] = _OPTION_PARSERS[key](value)

    try:
        endpoints = EndpointSet(
            api_host=parsed.get("api_host", EndpointSet.api_host),
            media_host=parsed.get("media_host", EndpointSet.media_host),
            scheme=parsed.get("scheme", EndpointSet.scheme),
        )
        budget = RequestBudget(
            min_interval_ms=parsed.get(
                "min_interval_ms", RequestBudget.min_interval_ms
            )
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return CollectorConfig(
        storage_root=parsed.get("data_dir", Path("data")),
        include_boards=parsed.get("boards", ()),
        exclude_boards=parsed.get("exclude_boards", ()),
        scheduling_mode=parsed.get("mode", SchedulingMode.CATALOG_JUST_IN_TIME),
        cycle_pause_s=parsed.get("cycle_pause_s", 60.0),
        refetch_unchanged=parsed.get("refetch_unchanged", False),
        budget=budget,
        endpoints=endpoints,
        user_agent=parsed.get("user_agent", DEFAULT_USER_AGENT),
        strict=parsed.get("strict", False),
    )
