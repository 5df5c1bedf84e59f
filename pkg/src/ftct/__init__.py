"""ftct: a polite, crash-safe, text-only imageboard archival crawler."""

from .api import (
    ApiClient,
    EndpointSet,
    FetchKind,
    FetchOutcome,
    RequestBudget,
    build_catalog_url,
    build_thread_url,
)
from .collector import Collector, CycleReport, resolve_boards
from .config import CollectorConfig, SchedulingMode, build_config
from .lifecycle import (
    CatalogSnapshot,
    ThreadDelta,
    ThreadState,
    ThreadTrackerEntry,
    diff_catalog,
)
from .storage import ArchiveLayout, ThreadSnapshot, parse_thread_payload

__version__ = "0.1.0"

__all__ = [
    "ApiClient",
    "ArchiveLayout",
    "CatalogSnapshot",
    "Collector",
    "CollectorConfig",
    "CycleReport",
    "EndpointSet",
    "FetchKind",
    "FetchOutcome",
    "RequestBudget",
    "SchedulingMode",
    "ThreadDelta",
    "ThreadSnapshot",
    "ThreadState",
    "ThreadTrackerEntry",
    "build_catalog_url",
    "build_config",
    "build_thread_url",
    "diff_catalog",
    "parse_thread_payload",
    "resolve_boards",
]
