"""
Autotuning database: protocol -> (T, A) -> runtime.

Runs append one line to a plain-text TSV file; selection picks the fastest
recorded configuration for a protocol, falling back to the nearest recorded
protocol of the same imaging mode.
"""

import itertools
import logging
import os
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import total_ordering
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .config import ImagingMode
from .decomp import GROUP_SIZE_MAX
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

# Upper frame counts of the protocol buckets; longer runs share one bucket.
FRAME_BUCKETS = (5, 10, 25, 50, 200)
DEFAULT_TOTAL_WORKERS = 8
COLUMNS = ("mode", "N", "frames_bucket", "J", "T", "A", "runtime_ms", "timestamp")

Config = Tuple[int, int]


def frames_bucket(frames: int) -> int:
    """Index of the bucket holding ``frames`` (0 for <= 5, ..., 5 for > 200)."""
    if frames < 1:
        raise ConfigurationError(f"frame count must be >= 1, got {frames}")
    for i, limit in enumerate(FRAME_BUCKETS):
        if frames <= limit:
            return i
    return len(FRAME_BUCKETS)


def bucket_label(bucket: int) -> str:
    if bucket < len(FRAME_BUCKETS):
        return f"<={FRAME_BUCKETS[bucket]}"
    return f">{FRAME_BUCKETS[-1]}"


def _bucket_from_label(label: str) -> int:
    for i in range(len(FRAME_BUCKETS) + 1):
        if bucket_label(i) == label:
            return i
    raise ValueError(f"unknown frames bucket {label!r}")


@total_ordering
@dataclass(frozen=True)
class ProtocolKey:
    """Acquisition and reconstruction parameters a tuning record applies to."""

    mode: ImagingMode
    image_size: int
    frames_bucket: int
    channels: int

    @classmethod
    def for_run(cls, mode: ImagingMode, image_size: int, frames: int, channels: int) -> "ProtocolKey":
        return cls(mode, image_size, frames_bucket(frames), channels)

    @property
    def sort_key(self) -> Tuple[str, int, int, int]:
        return (self.mode.value, self.image_size, self.frames_bucket, self.channels)

    def __lt__(self, other: "ProtocolKey") -> bool:
        return self.sort_key < other.sort_key

    def distance(self, other: "ProtocolKey") -> Optional[Tuple[int, int, int]]:
        """Lexicographic gap to another key; None across imaging modes."""
        if self.mode is not other.mode:
            return None
        return (
            abs(self.image_size - other.image_size),
            abs(self.frames_bucket - other.frames_bucket),
            abs(self.channels - other.channels),
        )


@dataclass(frozen=True)
class TuningRecord:
    key: ProtocolKey
    threads: int
    workers: int
    runtime_ms: float
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def __post_init__(self) -> None:
        if self.threads < 1 or not 1 <= self.workers <= GROUP_SIZE_MAX:
            raise ConfigurationError(f"illegal configuration T={self.threads} A={self.workers}")
        if not self.runtime_ms > 0:
            raise ConfigurationError(f"runtime must be > 0, got {self.runtime_ms}")

    @property
    def config(self) -> Config:
        return (self.threads, self.workers)

    def to_line(self) -> str:
        fields = (
            self.key.mode.value,
            self.key.image_size,
            bucket_label(self.key.frames_bucket),
            self.key.channels,
            self.threads,
            self.workers,
            f"{self.runtime_ms:.6g}",
            self.timestamp,
        )
        return "\t".join(str(f) for f in fields)

    @classmethod
    def from_line(cls, line: str) -> "TuningRecord":
        parts = line.split()
        if len(parts) != len(COLUMNS):
            raise ValueError(f"expected {len(COLUMNS)} columns, got {len(parts)}")
        mode, N, bucket, J, T, A, runtime, stamp = parts
        key = ProtocolKey(ImagingMode(mode), int(N), _bucket_from_label(bucket), int(J))
        return cls(key, int(T), int(A), float(runtime), stamp)


def legal_configs(
    total_workers: int = DEFAULT_TOTAL_WORKERS, channels: Optional[int] = None
) -> List[Config]:
    """
    Every (T, A) with A <= 4 workers per thread and T * A <= total_workers,
    ordered by A, then T. ``channels`` caps A further, since a group never
    has more workers than channels to split.
    """
    if total_workers < 1:
        raise ConfigurationError(f"need at least one worker, got {total_workers}")
    if channels is not None and channels < 1:
        raise ConfigurationError(f"need at least one channel, got {channels}")
    max_workers = GROUP_SIZE_MAX if channels is None else min(GROUP_SIZE_MAX, channels)
    return [
        (T, A)
        for A, T in itertools.product(range(1, max_workers + 1), range(1, total_workers + 1))
        if T * A <= total_workers
    ]


class TuningDatabase:
    """
    Append-only store of tuning records.

    Args:
        path: TSV file; None keeps records in memory only
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[TuningRecord] = []
        if self.path is not None and self.path.exists():
            self.records = list(self._read(self.path))

    @staticmethod
    def _read(path: Path) -> Iterable[TuningRecord]:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                try:
                    yield TuningRecord.from_line(text)
                except (ValueError, ConfigurationError) as exc:
                    # a torn last line from an interrupted run
                    logger.warning(f"{path}:{lineno}: skipping malformed record ({exc})")

    def append(self, record: TuningRecord) -> None:
        self.records.append(record)
        if self.path is None:
            return
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", encoding="utf-8") as fh:
            if new:
                fh.write("# " + "\t".join(COLUMNS) + "\n")
            fh.write(record.to_line() + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def keys(self) -> List[ProtocolKey]:
        return sorted({r.key for r in self.records})

    def runtimes(self, key: ProtocolKey) -> Dict[Config, List[float]]:
        out: Dict[Config, List[float]] = {}
        for r in self.records:
            if r.key == key:
                out.setdefault(r.config, []).append(r.runtime_ms)
        return out

    def __len__(self) -> int:
        return len(self.records)


def _best(runtimes: Dict[Config, List[float]], legal: Sequence[Config]) -> Optional[Config]:
    ranked = sorted(
        (min(values), legal.index(config), config)
        for config, values in runtimes.items()
        if config in legal
    )
    return ranked[0][2] if ranked else None


def nearest_key(key: ProtocolKey, db: TuningDatabase) -> Optional[ProtocolKey]:
    candidates = [(d, k) for k in db.keys() if (d := key.distance(k)) is not None]
    return min(candidates)[1] if candidates else None


def select(
    key: ProtocolKey, db: TuningDatabase, total_workers: int = DEFAULT_TOTAL_WORKERS
) -> Config:
    """Fastest recorded (T, A) for the protocol or its nearest neighbour; (1, 1) otherwise."""
    legal = legal_configs(total_workers, key.channels)
    best = _best(db.runtimes(key), legal)
    if best is not None:
        logger.debug(f"autotune: {key} -> {best}")
        return best
    near = nearest_key(key, db)
    if near is not None:
        best = _best(db.runtimes(near), legal)
        if best is not None:
            logger.debug(f"autotune: {key} unseen, nearest {near} -> {best}")
            return best
    logger.debug(f"autotune: nothing recorded for {key}, using (1, 1)")
    return (1, 1)


def learn_step(
    key: ProtocolKey, db: TuningDatabase, total_workers: int = DEFAULT_TOTAL_WORKERS
) -> Config:
    """Next configuration not yet measured for ``key``; the best one once all are."""
    measured = db.runtimes(key)
    for config in legal_configs(total_workers, key.channels):
        if config not in measured:
            logger.debug(f"autotune learning: {key} tries {config}")
            return config
    return select(key, db, total_workers)


def steady_state_runtime(sink_times: Sequence[float], skip: int = 4) -> Optional[float]:
    """
    Median frame interval in ms, without ``skip`` frames at each end.

    Falls back to all intervals for short runs; None for fewer than two frames.
    """
    intervals = [b - a for a, b in zip(sink_times, sink_times[1:])]
    if not intervals:
        return None
    core = intervals[skip : len(intervals) - skip] or intervals
    return statistics.median(core) * 1e3


def tune_report(db: TuningDatabase) -> str:
    """Best and worst configuration per protocol, one line per key."""
    lines = ["mode\tN\tframes\tJ\tworst T/A\tms\tbest T/A\tms"]
    for key in db.keys():
        per_config = {c: min(v) for c, v in db.runtimes(key).items()}
        best = min(per_config, key=lambda c: (per_config[c], c[1], c[0]))
        worst = max(per_config, key=lambda c: (per_config[c], -c[1], -c[0]))
        lines.append(
            f"{key.mode.value}\t{key.image_size}\t{bucket_label(key.frames_bucket)}\t{key.channels}\t"
            f"{worst[0]}/{worst[1]}\t{per_config[worst]:.1f}\t"
            f"{best[0]}/{best[1]}\t{per_config[best]:.1f}"
        )
    return "\n".join(lines)
