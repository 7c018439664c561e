"""Per-event (root, distance) labels, bucketed counts, and composed shares."""

from __future__ import annotations

import bisect
import enum
import json
import os
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from typing import Any, TextIO, Union

from .chain_model import ZERO_ADDRESS, TransferEvent
from .derivation_graph import DistanceMap, RootSpec
from .ingestion import BlockRange, CacheCoverageError, LogCache, OrderingError, iter_transfers

DEFAULT_BUCKET_BLOCKS = 195_000
REPORT_COLUMNS = (
    "root",
    "bucket_index",
    "bucket_start_block",
    "bucket_end_block",
    "delta",
    "count",
    "composed_share_of_bucket",
)
SHARE_DIGITS = 6


class NoDataError(ValueError):
    pass


class CountMode(str, enum.Enum):
    EVENT = "event_level"
    TRANSACTION = "transaction_level"


@dataclass(frozen=True)
class CountingPolicy:
    mode: CountMode = CountMode.EVENT
    include_mint_burn: bool = True

    def describe(self) -> str:
        return f"mode={self.mode.value} include_mint_burn={str(self.include_mint_burn).lower()}"


# -- bucketing ----------------------------------------------------------------


@dataclass(frozen=True)
class FixedBlockWindow:
    width: int = DEFAULT_BUCKET_BLOCKS
    origin_block: int = 0
    end_block: int | None = None

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("bucket width must be >= 1")

    def bucket_of(self, block: int) -> int:
        if block < self.origin_block:
            raise ValueError(f"block {block} precedes bucketing origin {self.origin_block}")
        return (block - self.origin_block) // self.width

    def bounds(self, index: int) -> tuple[int, int]:
        start = self.origin_block + index * self.width
        end = start + self.width - 1
        if self.end_block is not None:
            end = min(end, self.end_block)
        return start, end

    def describe(self) -> str:
        return f"fixed_block_window width={self.width} origin_block={self.origin_block}"

    def to_dict(self) -> dict[str, Any]:
        return {"scheme": "fixed_block_window", "width": self.width,
                "origin_block": self.origin_block, "end_block": self.end_block}


def _month_key(ts: int) -> int:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return dt.year * 12 + dt.month - 1


@dataclass(frozen=True)
class TimestampMonths:
    """UTC calendar-month buckets from a ``block_number,unix_timestamp`` mapping.

    A block takes the timestamp of the nearest mapped block at or below it.
    """

    mapping_path: str
    origin_block: int
    end_block: int | None = None
    _starts: tuple[int, ...] = field(default=(), repr=False, compare=False)
    _months: tuple[int, ...] = field(default=(), repr=False, compare=False)
    _first_mapped: int = field(default=0, repr=False, compare=False)

    @classmethod
    def load(cls, mapping_path: str | os.PathLike[str], origin_block: int,
             end_block: int | None = None) -> "TimestampMonths":
        starts: list[int] = []
        months: list[int] = []
        prev_block = -1
        prev_ts = None
        first = None
        with open(mapping_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#") or line == "block_number,unix_timestamp":
                    continue
                try:
                    block_s, ts_s = line.split(",")
                    block, ts = int(block_s), int(ts_s)
                except ValueError:
                    raise ValueError(f"{mapping_path}: line {line_no}: expected block_number,unix_timestamp") from None
                if block <= prev_block or (prev_ts is not None and ts < prev_ts):
                    raise ValueError(f"{mapping_path}: line {line_no}: mapping must ascend")
                if first is None:
                    first = block
                month = _month_key(ts)
                if not months or months[-1] != month:
                    starts.append(block)
                    months.append(month)
                prev_block, prev_ts = block, ts
        if first is None:
            raise ValueError(f"{mapping_path}: empty timestamp mapping")
        if origin_block < first:
            raise ValueError(f"origin block {origin_block} precedes the first mapped block {first}")
        return cls(str(mapping_path), origin_block, end_block, tuple(starts), tuple(months), first)

    def _month_of(self, block: int) -> int:
        if block < self._first_mapped:
            raise ValueError(f"block {block} precedes the timestamp mapping")
        return self._months[bisect.bisect_right(self._starts, block) - 1]

    def bucket_of(self, block: int) -> int:
        if block < self.origin_block:
            raise ValueError(f"block {block} precedes bucketing origin {self.origin_block}")
        return self._month_of(block) - self._month_of(self.origin_block)

    def bounds(self, index: int) -> tuple[int, int]:
        month = self._month_of(self.origin_block) + index
        i = bisect.bisect_left(self._months, month)
        if i == len(self._months) or self._months[i] != month:
            raise ValueError(f"no mapped block falls in bucket {index}")
        start = max(self._starts[i], self.origin_block)
        if i + 1 < len(self._starts):
            end = self._starts[i + 1] - 1
            if self.end_block is not None:
                end = min(end, self.end_block)
        elif self.end_block is not None:
            end = self.end_block
        else:
            end = start
        return start, end

    def describe(self) -> str:
        return f"timestamp_months mapping={os.path.basename(self.mapping_path)} origin_block={self.origin_block}"

    def to_dict(self) -> dict[str, Any]:
        return {"scheme": "timestamp_months", "mapping_path": self.mapping_path,
                "origin_block": self.origin_block, "end_block": self.end_block}


Bucketing = Union[FixedBlockWindow, TimestampMonths]


def bucketing_from_dict(d: Mapping[str, Any]) -> Bucketing:
    if d["scheme"] == "fixed_block_window":
        return FixedBlockWindow(d["width"], d["origin_block"], d.get("end_block"))
    if d["scheme"] == "timestamp_months":
        return TimestampMonths.load(d["mapping_path"], d["origin_block"], d.get("end_block"))
    raise ValueError(f"unknown bucketing scheme {d['scheme']!r}")


# -- counts -------------------------------------------------------------------


@dataclass
class ClassifiedCount:
    """Counts keyed by (root_id, delta, bucket_index); a commutative monoid under ``+``.

    ``zero_address`` tallies labelled events with a zero-address endpoint per
    root, whatever the policy, so the effect of excluding mints and burns is
    visible in reports.
    """

    entries: Counter = field(default_factory=Counter)
    zero_address: Counter = field(default_factory=Counter)

    def __add__(self, other: "ClassifiedCount") -> "ClassifiedCount":
        out = ClassifiedCount(Counter(self.entries), Counter(self.zero_address))
        out.entries.update(other.entries)
        out.zero_address.update(other.zero_address)
        return out

    merge = __add__

    def __bool__(self) -> bool:
        return bool(self.entries)

    def total(self, root_id: str) -> int:
        return sum(n for (r, _, _), n in self.entries.items() if r == root_id)

    def bucket_counts(self, root_id: str, bucket: int) -> dict[int, int]:
        return {d: n for (r, d, b), n in self.entries.items() if r == root_id and b == bucket}

    def to_json(self) -> dict[str, Any]:
        return {
            "entries": [[r, d, b, n] for (r, d, b), n in sorted(self.entries.items())],
            "zero_address": dict(sorted(self.zero_address.items())),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ClassifiedCount":
        entries = Counter({(r, int(d), int(b)): int(n) for r, d, b, n in data["entries"]})
        return cls(entries, Counter({k: int(v) for k, v in data.get("zero_address", {}).items()}))


def classify_event(
    event: TransferEvent, distances: DistanceMap, policy: CountingPolicy
) -> set[tuple[str, int]]:
    if not policy.include_mint_burn and (event.sender == ZERO_ADDRESS or event.recipient == ZERO_ADDRESS):
        return set()
    return set(distances.labels(event.token))


def aggregate(
    events: Iterable[TransferEvent],
    distances: DistanceMap,
    policy: CountingPolicy,
    bucketing: Bucketing,
) -> ClassifiedCount:
    """Count a position-sorted transfer stream into (root, delta, bucket) cells.

    Event level: one increment per label per event. Transaction level: one
    increment per root per transaction, at the deepest delta touched.
    """
    entries: Counter = Counter()
    zero_counts: Counter = Counter()
    labels_of = distances.by_token.get
    include_zero = policy.include_mint_burn
    by_tx = policy.mode is CountMode.TRANSACTION
    zero = ZERO_ADDRESS

    last_block = -1
    last_index = -1
    bucket = 0
    bucket_block = -1
    tx: bytes | None = None
    tx_deepest: dict[str, int] = {}
    tx_bucket = 0
    closed: set[bytes] = set()

    for e in events:
        pos = e.position
        block = pos.block_number
        index = pos.log_index
        if block < last_block or (block == last_block and index <= last_index):
            raise OrderingError(f"event at {(block, index)} does not follow {(last_block, last_index)}")
        if block != last_block:
            closed.clear()
        last_block, last_index = block, index
        if by_tx and pos.tx_hash != tx:
            if tx_deepest:
                for root_id, d in tx_deepest.items():
                    entries[(root_id, d, tx_bucket)] += 1
                tx_deepest = {}
            if tx is not None:
                closed.add(tx)
            if pos.tx_hash in closed:
                raise OrderingError(f"transaction logs are not contiguous in block {block}")
            tx = pos.tx_hash
        labels = labels_of(e.token)
        if not labels:
            continue
        if e.sender == zero or e.recipient == zero:
            for root_id, _ in labels:
                zero_counts[root_id] += 1
            if not include_zero:
                continue
        if block != bucket_block:
            bucket = bucketing.bucket_of(block)
            bucket_block = block
        if by_tx:
            tx_bucket = bucket
            for root_id, d in labels:
                if tx_deepest.get(root_id, -1) < d:
                    tx_deepest[root_id] = d
        else:
            for root_id, d in labels:
                entries[(root_id, d, bucket)] += 1
    if by_tx and tx_deepest:
        for root_id, d in tx_deepest.items():
            entries[(root_id, d, tx_bucket)] += 1
    return ClassifiedCount(entries, zero_counts)


def _aggregate_segments(
    cache_dir: str, segments: list[tuple[int, int]], block_range: BlockRange,
    distances: DistanceMap, policy: CountingPolicy, bucketing: Bucketing,
) -> ClassifiedCount:
    cache = LogCache(cache_dir)
    out = ClassifiedCount()
    for lo, hi in segments:
        r = BlockRange(max(lo, block_range.from_block), min(hi, block_range.to_block))
        out = out + aggregate(iter_transfers(cache.iter_logs(r)), distances, policy, bucketing)
    return out


def aggregate_cache(
    cache: LogCache,
    block_range: BlockRange,
    distances: DistanceMap,
    policy: CountingPolicy,
    bucketing: Bucketing,
    workers: int = 1,
    executor: Executor | None = None,
) -> ClassifiedCount:
    """Aggregate cached logs, optionally sharded by segment across processes.

    Segment boundaries are block boundaries, hence transaction boundaries,
    so shard results merge exactly.
    """
    gaps = cache.gaps(block_range)
    if gaps:
        raise CacheCoverageError(gaps)
    segs = [
        (s.range.from_block, s.range.to_block)
        for s in cache.segments()
        if not (s.range.to_block < block_range.from_block or s.range.from_block > block_range.to_block)
    ]
    if workers <= 1 or len(segs) <= 1:
        return _aggregate_segments(str(cache.dir), segs, block_range, distances, policy, bucketing)
    n = min(workers, len(segs))
    size, extra = divmod(len(segs), n)
    shards = []
    start = 0
    for i in range(n):
        end = start + size + (1 if i < extra else 0)
        shards.append(segs[start:end])
        start = end
    own = executor is None
    pool = executor or ProcessPoolExecutor(max_workers=n)
    try:
        futures = [
            pool.submit(_aggregate_segments, str(cache.dir), shard, block_range, distances, policy, bucketing)
            for shard in shards
        ]
        total = ClassifiedCount()
        for fut in futures:
            total = total + fut.result()
    finally:
        if own:
            pool.shutdown()
    return total


# -- shares and reports -------------------------------------------------------


def composed_share(
    counts: ClassifiedCount, root_id: str, bucket: int | None, roots: Sequence[RootSpec]
) -> Fraction:
    """Exact share of a root's count above its initial distance.

    ``bucket=None`` sums over every bucket.
    """
    initial = _initial_distance(root_id, roots)
    composed = total = 0
    for (r, d, b), n in counts.entries.items():
        if r != root_id or (bucket is not None and b != bucket):
            continue
        total += n
        if d > initial:
            composed += n
    if total == 0:
        raise NoDataError(f"no counts for root {root_id} in bucket {bucket}")
    return Fraction(composed, total)


def _initial_distance(root_id: str, roots: Sequence[RootSpec]) -> int:
    for r in roots:
        if r.root_id == root_id:
            return r.initial_distance
    raise KeyError(f"unknown root {root_id}")


def format_share(share: Fraction, digits: int = SHARE_DIGITS) -> str:
    """Fixed-point decimal with round-half-even, computed exactly."""
    scaled = round(share * 10**digits)
    whole, frac = divmod(scaled, 10**digits)
    return f"{whole}.{frac:0{digits}d}"


def emit_report(
    counts: ClassifiedCount,
    bucketing: Bucketing,
    policy: CountingPolicy,
    out: TextIO,
    roots: Sequence[RootSpec],
    graph_checksum: str | None = None,
    extra_header: Mapping[str, str] | None = None,
) -> None:
    out.write(f"# policy: {policy.describe()}\n")
    out.write(f"# bucketing: {bucketing.describe()}\n")
    if graph_checksum is not None:
        out.write(f"# graph_checksum: {graph_checksum}\n")
    zero = ",".join(f"{r}={n}" for r, n in sorted(counts.zero_address.items())) or "none"
    out.write(f"# zero_address_events: {zero}\n")
    for key, value in (extra_header or {}).items():
        out.write(f"# {key}: {value}\n")
    out.write(",".join(REPORT_COLUMNS) + "\n")
    shares: dict[tuple[str, int], str] = {}
    for root_id, delta, bucket in sorted(counts.entries):
        n = counts.entries[(root_id, delta, bucket)]
        if (root_id, bucket) not in shares:
            shares[(root_id, bucket)] = format_share(composed_share(counts, root_id, bucket, roots))
        start, end = bucketing.bounds(bucket)
        out.write(f"{root_id},{bucket},{start},{end},{delta},{n},{shares[(root_id, bucket)]}\n")


def save_counts(counts: ClassifiedCount, path: str | os.PathLike[str], meta: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"meta": dict(meta), **counts.to_json()}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_counts(path: str | os.PathLike[str]) -> tuple[ClassifiedCount, dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ClassifiedCount.from_json(data), data.get("meta", {})
