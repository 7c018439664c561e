"""Log acquisition: JSON-RPC fetch, raw-log files, and the segmented on-disk cache."""

from __future__ import annotations

import fcntl
import hashlib
import itertools
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from .chain_model import (
    Address,
    HexParseError,
    LogPosition,
    MalformedLogError,
    RawLog,
    TransferEvent,
    decode_transfer,
    parse_data,
    parse_hex_quantity,
    parse_word,
    transfer_topic0,
    word_to_hex,
)

log = logging.getLogger(__name__)

RPC_URL_ENV = "COMPOSABILITY_RPC_URL"
DEFAULT_SEGMENT_BLOCKS = 10_000
HEAD_SAFETY_BLOCKS = 64
BACKOFF_INITIAL_S = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_MAX_ATTEMPTS = 6

CHECKPOINT_NAME = "checkpoint.txt"
LOCK_NAME = ".lock"


class OrderingError(ValueError):
    pass


class LogParseError(ValueError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CacheCorruptionError(RuntimeError):
    pass


class CacheLockedError(RuntimeError):
    pass


class RpcError(RuntimeError):
    pass


class NetworkError(RpcError):
    """Transport failures persisted through every retry."""


class RangeLimitError(RpcError):
    """The provider refused the request because the result set is too large."""


class ProviderLimitError(RpcError):
    """A single block exceeds the provider's result limit; cannot subdivide."""


class ProviderResponseError(RpcError):
    pass


class TransportError(Exception):
    """Retryable transport failure (connection, timeout, 429/5xx)."""


@dataclass(frozen=True, slots=True)
class BlockRange:
    from_block: int
    to_block: int

    def __post_init__(self) -> None:
        if self.from_block < 0 or self.from_block > self.to_block:
            raise ValueError(f"invalid block range {self.from_block}..{self.to_block}")

    def __contains__(self, block: int) -> bool:
        return self.from_block <= block <= self.to_block

    def __str__(self) -> str:
        return f"{self.from_block}..{self.to_block}"

    @property
    def width(self) -> int:
        return self.to_block - self.from_block + 1


@dataclass(frozen=True, slots=True)
class CacheSegment:
    range: BlockRange
    record_count: int
    checksum: str

    @property
    def filename(self) -> str:
        return f"logs_{self.range.from_block:010d}_{self.range.to_block:010d}.tsv"


@dataclass(frozen=True)
class Checkpoint:
    last_complete_block: int | None
    segments: tuple[CacheSegment, ...] = ()

    def to_text(self) -> str:
        last = "none" if self.last_complete_block is None else str(self.last_complete_block)
        lines = [f"last_complete_block={last}"]
        for seg in self.segments:
            lines.append(
                f"segment={seg.range.from_block},{seg.range.to_block},{seg.record_count},{seg.checksum}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Checkpoint":
        last: int | None = None
        segments = []
        for line_no, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CacheCorruptionError(f"checkpoint line {line_no}: expected key=value")
            if key == "last_complete_block":
                last = None if value == "none" else int(value)
            elif key == "segment":
                parts = value.split(",")
                if len(parts) != 4:
                    raise CacheCorruptionError(f"checkpoint line {line_no}: bad segment record")
                lo, hi, count, digest = parts
                segments.append(CacheSegment(BlockRange(int(lo), int(hi)), int(count), digest))
            else:
                raise CacheCorruptionError(f"checkpoint line {line_no}: unknown key {key!r}")
        return cls(last, tuple(sorted(segments, key=lambda s: s.range.from_block)))


# -- raw-log line format ------------------------------------------------------


def format_log_line(raw: RawLog) -> str:
    pos = raw.position
    topics = ",".join(word_to_hex(t) for t in raw.topics)
    return (
        f"{pos.block_number}\t{word_to_hex(pos.tx_hash)}\t{pos.log_index}\t"
        f"{raw.emitter}\t{topics}\t0x{raw.data.hex()}"
    )


_WORD = r"0x[0-9a-fA-F]{64}"
_LINE = re.compile(
    rf"(\d+)\t({_WORD})\t(\d+)\t0x([0-9a-fA-F]{{40}})\t((?:{_WORD}(?:,{_WORD})*)?)\t0x((?:[0-9a-fA-F]{{2}})*)\n?",
    re.ASCII,
)


def parse_log_line(line: str, line_no: int = 0) -> RawLog:
    m = _LINE.fullmatch(line)
    if m is not None:
        block_s, tx_s, index_s, emitter_s, topics_s, data_s = m.groups()
        return RawLog(
            Address(bytes.fromhex(emitter_s)),
            tuple(bytes.fromhex(t[2:]) for t in topics_s.split(",")) if topics_s else (),
            bytes.fromhex(data_s),
            LogPosition(int(block_s), bytes.fromhex(tx_s[2:]), int(index_s)),
        )
    # slow path: find the offending field for the error message
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 6:
        raise LogParseError(line_no, f"expected 6 tab-separated fields, got {len(fields)}")
    block_s, tx_s, index_s, emitter_s, topics_s, data_s = fields
    try:
        if not (block_s.isascii() and block_s.isdigit() and index_s.isascii() and index_s.isdigit()):
            raise LogParseError(line_no, "block number and log index must be decimal")
        topics = tuple(parse_word(t) for t in topics_s.split(",")) if topics_s else ()
        return RawLog(
            emitter=Address.from_hex(emitter_s),
            topics=topics,
            data=parse_data(data_s),
            position=LogPosition(int(block_s), parse_word(tx_s), int(index_s)),
        )
    except HexParseError as exc:
        raise LogParseError(line_no, str(exc)) from None


def _check_order(items: Iterable[Any]) -> Iterator[Any]:
    prev: tuple[int, int] | None = None
    for item in items:
        pos = item.position
        key = (pos.block_number, pos.log_index)
        if prev is not None and key <= prev:
            raise OrderingError(f"log position {key} does not follow {prev}")
        prev = key
        yield item


def replay_file(path: str | os.PathLike[str]) -> Iterator[RawLog]:
    """Stream logs from a raw-log file, enforcing strict position order."""
    prev: tuple[int, int] | None = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            raw = parse_log_line(line, line_no)
            key = raw.position.key
            if prev is not None and key <= prev:
                raise OrderingError(f"line {line_no}: position {key} does not follow {prev}")
            prev = key
            yield raw


def write_log_file(logs: Iterable[RawLog], path: str | os.PathLike[str]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for raw in logs:
            fh.write(format_log_line(raw))
            fh.write("\n")
            n += 1
    return n


T = TypeVar("T")


def group_by_transaction(items: Iterable[T]) -> Iterator[tuple[bytes, list[T]]]:
    """Group a position-sorted stream of logs or transfers by transaction hash.

    A transaction's logs must be contiguous; a hash that reappears after its
    group closed is reported as an ordering violation.
    """
    current: bytes | None = None
    group: list[T] = []
    closed_in_block: set[bytes] = set()
    block: int | None = None
    for item in _check_order(items):
        pos = item.position  # type: ignore[attr-defined]
        if pos.block_number != block:
            block = pos.block_number
            closed_in_block.clear()
        if pos.tx_hash != current:
            if current is not None:
                yield current, group
                closed_in_block.add(current)
            if pos.tx_hash in closed_in_block:
                raise OrderingError(
                    f"transaction {word_to_hex(pos.tx_hash)} has non-contiguous logs in block {block}"
                )
            current = pos.tx_hash
            group = []
        group.append(item)
    if current is not None:
        yield current, group


# -- segmented cache ----------------------------------------------------------


def plan_segments(gap: BlockRange, segment_blocks: int) -> list[BlockRange]:
    """Split a gap at absolute multiples of ``segment_blocks``."""
    if segment_blocks < 1:
        raise ValueError("segment_blocks must be >= 1")
    out = []
    lo = gap.from_block
    while lo <= gap.to_block:
        hi = min(gap.to_block, (lo // segment_blocks + 1) * segment_blocks - 1)
        out.append(BlockRange(lo, hi))
        lo = hi + 1
    return out


class LogCache:
    """Directory of checksummed raw-log segments plus a checkpoint record.

    Single writer; readers verify each segment checksum before yielding.
    """

    def __init__(self, directory: str | os.PathLike[str]) -> None:
        self.dir = Path(directory)

    @property
    def checkpoint_path(self) -> Path:
        return self.dir / CHECKPOINT_NAME

    def segments(self) -> tuple[CacheSegment, ...]:
        if not self.checkpoint_path.exists():
            return ()
        return Checkpoint.from_text(self.checkpoint_path.read_text(encoding="utf-8")).segments

    @contextmanager
    def lock(self) -> Iterator[None]:
        self.dir.mkdir(parents=True, exist_ok=True)
        fh = open(self.dir / LOCK_NAME, "a+")
        try:
            try:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise CacheLockedError(f"cache {self.dir} is in use by another process") from None
            yield
        finally:
            fh.close()

    def gaps(self, block_range: BlockRange) -> list[BlockRange]:
        """Sub-ranges of ``block_range`` not covered by any segment."""
        out = []
        lo = block_range.from_block
        for seg in self.segments():
            r = seg.range
            if r.to_block < lo or r.from_block > block_range.to_block:
                continue
            if r.from_block > lo:
                out.append(BlockRange(lo, r.from_block - 1))
            lo = max(lo, r.to_block + 1)
            if lo > block_range.to_block:
                break
        if lo <= block_range.to_block:
            out.append(BlockRange(lo, block_range.to_block))
        return out

    def missing_segments(self, block_range: BlockRange, segment_blocks: int) -> list[BlockRange]:
        return [s for gap in self.gaps(block_range) for s in plan_segments(gap, segment_blocks)]

    def checkpoint(self, block_range: BlockRange) -> Checkpoint:
        segs = self.segments()
        last = None
        expect = block_range.from_block
        for seg in segs:
            r = seg.range
            if r.to_block < expect:
                continue
            if r.from_block > expect:
                break
            last = r.to_block
            expect = r.to_block + 1
        if last is not None:
            last = min(last, block_range.to_block)
        return Checkpoint(last, segs)

    def write_segment(self, seg_range: BlockRange, logs: Sequence[RawLog]) -> CacheSegment:
        """Persist one segment atomically and record it in the checkpoint."""
        prev = None
        for raw in logs:
            if raw.position.block_number not in seg_range:
                raise ValueError(f"log at block {raw.position.block_number} outside segment {seg_range}")
            key = raw.position.key
            if prev is not None and key <= prev:
                raise OrderingError(f"log position {key} does not follow {prev}")
            prev = key
        body = "".join(format_log_line(raw) + "\n" for raw in logs).encode("utf-8")
        seg = CacheSegment(seg_range, len(logs), hashlib.sha256(body).hexdigest())
        self.dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.dir / seg.filename, body)
        existing = [s for s in self.segments() if s.range != seg_range]
        for s in existing:
            if not (s.range.to_block < seg_range.from_block or s.range.from_block > seg_range.to_block):
                raise CacheCorruptionError(f"segment {seg_range} overlaps cached segment {s.range}")
        segs = tuple(sorted([*existing, seg], key=lambda s: s.range.from_block))
        # on disk, last_complete_block is relative to the earliest cached block
        last = self._contiguous(segs, segs[0].range.from_block)
        _atomic_write(self.checkpoint_path, Checkpoint(last, segs).to_text().encode("utf-8"))
        return seg

    @staticmethod
    def _contiguous(segs: Sequence[CacheSegment], start: int) -> int | None:
        last = None
        expect = start
        for s in segs:
            if s.range.from_block != expect:
                break
            last = s.range.to_block
            expect = last + 1
        return last

    def read_segment(self, seg: CacheSegment) -> list[RawLog]:
        path = self.dir / seg.filename
        try:
            body = path.read_bytes()
        except FileNotFoundError:
            raise CacheCorruptionError(f"missing segment file {path}") from None
        if hashlib.sha256(body).hexdigest() != seg.checksum:
            raise CacheCorruptionError(f"checksum mismatch for segment {seg.range}")
        logs = [
            parse_log_line(line, n) for n, line in enumerate(body.decode("utf-8").splitlines(), 1) if line
        ]
        if len(logs) != seg.record_count:
            raise CacheCorruptionError(f"segment {seg.range} holds {len(logs)} records, expected {seg.record_count}")
        return logs

    def verify(self) -> None:
        for seg in self.segments():
            self.read_segment(seg)

    def iter_logs(self, block_range: BlockRange) -> Iterator[RawLog]:
        """Yield cached logs inside ``block_range`` in position order."""
        gaps = self.gaps(block_range)
        if gaps:
            raise CacheCoverageError(gaps)
        for seg in self.segments():
            r = seg.range
            if r.to_block < block_range.from_block or r.from_block > block_range.to_block:
                continue
            for raw in self.read_segment(seg):
                if raw.position.block_number in block_range:
                    yield raw


class CacheCoverageError(RuntimeError):
    def __init__(self, gaps: list[BlockRange]) -> None:
        super().__init__("cache does not cover blocks " + ", ".join(str(g) for g in gaps))
        self.gaps = gaps


def _atomic_write(path: Path, body: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_cache(
    logs: Iterable[RawLog],
    directory: str | os.PathLike[str],
    segment_blocks: int,
    block_range: BlockRange,
) -> Checkpoint:
    """Persist a position-sorted stream covering ``block_range`` into segments.

    Segments already present are skipped, so a rerun after an interruption
    only writes what is missing and ends with the same files.
    """
    cache = LogCache(directory)
    plan = cache.missing_segments(block_range, segment_blocks)
    stream = _check_order(logs)
    pending: RawLog | None = None
    exhausted = False
    for seg_range in plan:
        buf: list[RawLog] = []
        while True:
            if pending is None and not exhausted:
                try:
                    pending = next(stream)
                except StopIteration:
                    exhausted = True
            if pending is None:
                break
            block = pending.position.block_number
            if block not in block_range:
                raise ValueError(f"log at block {block} outside requested range {block_range}")
            if block < seg_range.from_block:
                pending = None  # already cached
                continue
            if block > seg_range.to_block:
                break
            buf.append(pending)
            pending = None
        cache.write_segment(seg_range, buf)
    tail = [pending] if pending is not None else []
    for rest in itertools.chain(tail, () if exhausted else stream):
        if rest.position.block_number not in block_range:
            raise ValueError(f"log at block {rest.position.block_number} outside requested range {block_range}")
    return cache.checkpoint(block_range)


# -- JSON-RPC -----------------------------------------------------------------

Transport = Callable[[dict[str, Any]], dict[str, Any]]

_RANGE_LIMIT_MARKERS = (
    "query returned more than",
    "too many results",
    "more than 10000 results",
    "block range",
    "range is too large",
    "range too large",
    "exceed maximum block range",
    "log response size exceeded",
    "limit exceeded",
)


class UrllibTransport:
    def __init__(self, url: str, timeout: float = 30.0) -> None:
        self.url = url
        self.timeout = timeout

    def __call__(self, payload: dict[str, Any]) -> dict[str, Any]:
        req = urllib.request.Request(
            self.url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransportError(f"HTTP {exc.code}") from exc
            raise ProviderResponseError(f"HTTP {exc.code} from {self.url}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            return json.loads(body)
        except json.JSONDecodeError as exc:
            raise ProviderResponseError(f"non-JSON response from {self.url}") from exc


@dataclass
class JsonRpcClient:
    transport: Transport
    max_attempts: int = BACKOFF_MAX_ATTEMPTS
    backoff_initial: float = BACKOFF_INITIAL_S
    backoff_factor: float = BACKOFF_FACTOR
    sleep: Callable[[float], None] = time.sleep
    _next_id: int = field(default=1, repr=False)

    @classmethod
    def from_url(cls, url: str, **kwargs: Any) -> "JsonRpcClient":
        return cls(UrllibTransport(url), **kwargs)

    def call(self, method: str, params: list[Any]) -> Any:
        payload = {"jsonrpc": "2.0", "id": self._next_id, "method": method, "params": params}
        self._next_id += 1
        delay = self.backoff_initial
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.transport(payload)
                break
            except TransportError as exc:
                if attempt == self.max_attempts:
                    raise NetworkError(f"{method} failed after {attempt} attempts: {exc}") from exc
                log.warning("%s attempt %d failed (%s); retrying in %.1fs", method, attempt, exc, delay)
                self.sleep(delay)
                delay *= self.backoff_factor
        if not isinstance(resp, dict):
            raise ProviderResponseError(f"{method}: response is not a JSON object")
        if "error" in resp:
            err = resp["error"] or {}
            message = str(err.get("message", err)) if isinstance(err, dict) else str(err)
            if any(m in message.lower() for m in _RANGE_LIMIT_MARKERS):
                raise RangeLimitError(message)
            raise ProviderResponseError(f"{method}: {message}")
        if "result" not in resp:
            raise ProviderResponseError(f"{method}: response has neither result nor error")
        return resp["result"]

    def block_number(self) -> int:
        result = self.call("eth_blockNumber", [])
        try:
            return parse_hex_quantity(result)
        except HexParseError as exc:
            raise ProviderResponseError(f"eth_blockNumber: {exc}") from None


def _parse_rpc_log(entry: Any) -> RawLog:
    try:
        return RawLog(
            emitter=Address.from_hex(entry["address"].lower()),
            topics=tuple(parse_word(t.lower()) for t in entry["topics"]),
            data=parse_data(entry["data"].lower()),
            position=LogPosition(
                parse_hex_quantity(entry["blockNumber"]),
                parse_word(entry["transactionHash"].lower()),
                parse_hex_quantity(entry["logIndex"]),
            ),
        )
    except (KeyError, TypeError, AttributeError, HexParseError) as exc:
        raise ProviderResponseError(f"malformed log entry {entry!r}: {exc}") from None


def fetch_range(
    client: JsonRpcClient, block_range: BlockRange, token_filter: Sequence[Address] | None = None
) -> list[RawLog]:
    """One ``eth_getLogs`` request, validated and sorted. Raises RangeLimitError."""
    flt: dict[str, Any] = {
        "fromBlock": hex(block_range.from_block),
        "toBlock": hex(block_range.to_block),
        "topics": [word_to_hex(transfer_topic0())],
    }
    allowed = None
    if token_filter is not None:
        flt["address"] = [str(a) for a in token_filter]
        allowed = set(token_filter)
    result = client.call("eth_getLogs", [flt])
    if not isinstance(result, list):
        raise ProviderResponseError("eth_getLogs: result is not a list")
    topic0 = transfer_topic0()
    logs = []
    for entry in result:
        if isinstance(entry, dict) and entry.get("removed"):
            continue
        raw = _parse_rpc_log(entry)
        if raw.position.block_number not in block_range:
            raise ProviderResponseError(
                f"eth_getLogs returned block {raw.position.block_number} outside {block_range}"
            )
        if not raw.topics or raw.topics[0] != topic0:
            raise ProviderResponseError("eth_getLogs returned a log with the wrong topic0")
        if allowed is not None and raw.emitter not in allowed:
            raise ProviderResponseError(f"eth_getLogs returned unfiltered emitter {raw.emitter}")
        logs.append(raw)
    logs.sort(key=lambda r: r.position.key)
    for a, b in zip(logs, logs[1:]):
        if a.position.key == b.position.key:
            raise ProviderResponseError(f"eth_getLogs returned duplicate position {a.position.key}")
    return logs


def fetch_logs(
    endpoint: str | JsonRpcClient,
    block_range: BlockRange,
    token_filter: Sequence[Address] | None = None,
) -> Iterator[RawLog]:
    """Yield every Transfer log in ``block_range`` in position order.

    Ranges the provider rejects as too large are bisected down to single
    blocks; a single block that is still too large is fatal.
    """
    client = JsonRpcClient.from_url(endpoint) if isinstance(endpoint, str) else endpoint
    todo = [block_range]
    while todo:
        r = todo.pop()
        try:
            logs = fetch_range(client, r, token_filter)
        except RangeLimitError as exc:
            if r.from_block == r.to_block:
                raise ProviderLimitError(f"block {r.from_block} exceeds the provider result limit: {exc}") from exc
            mid = (r.from_block + r.to_block) // 2
            log.debug("splitting %s after range limit", r)
            todo.append(BlockRange(mid + 1, r.to_block))
            todo.append(BlockRange(r.from_block, mid))
            continue
        yield from logs


def iter_transfers(logs: Iterable[RawLog], stats: dict[str, int] | None = None) -> Iterator[TransferEvent]:
    """Decode Transfer logs, skipping other events and malformed shapes.

    ERC-721 ``Transfer`` shares topic0 but indexes the token id, so malformed
    logs are expected on mainnet; they are counted in ``stats["malformed"]``.
    """
    for raw in logs:
        try:
            ev = decode_transfer(raw)
        except MalformedLogError:
            if stats is not None:
                stats["malformed"] = stats.get("malformed", 0) + 1
            continue
        if ev is not None:
            yield ev


def cache_scanner(cache: LogCache, block_range: BlockRange) -> Callable[[], Iterator[tuple[bytes, list[TransferEvent]]]]:
    """Zero-argument callable yielding fresh transfer groups from the cache on each call."""

    def scan() -> Iterator[tuple[bytes, list[TransferEvent]]]:
        return group_by_transaction(iter_transfers(cache.iter_logs(block_range)))

    return scan
