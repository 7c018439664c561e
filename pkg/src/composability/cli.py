"""Command-line pipeline: fetch, discover, classify, report, synth.

Exit codes: 0 success, 1 usage or other failure, 2 network exhaustion,
3 cache corruption, 4 missing inputs or cache coverage, 5 no classified
events, 6 infeasible scenario, 7 cache locked by another invocation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .chain_model import Address
from .classification import (
    DEFAULT_BUCKET_BLOCKS,
    Bucketing,
    CountingPolicy,
    CountMode,
    FixedBlockWindow,
    TimestampMonths,
    aggregate_cache,
    bucketing_from_dict,
    emit_report,
    load_counts,
    save_counts,
)
from .derivation_graph import (
    DEFAULT_MIN_EVIDENCE,
    DEFAULT_MIN_HOLDERS,
    DerivationGraph,
    RootSpec,
    compute_distances,
    load_registry,
    load_roots,
    merge_graphs,
    run_discovery,
    write_registry,
    write_roots,
)
from .ingestion import (
    DEFAULT_SEGMENT_BLOCKS,
    HEAD_SAFETY_BLOCKS,
    RPC_URL_ENV,
    BlockRange,
    CacheCorruptionError,
    CacheCoverageError,
    CacheLockedError,
    JsonRpcClient,
    LogCache,
    NetworkError,
    cache_scanner,
    fetch_logs,
    replay_file,
    write_cache,
    write_log_file,
)
from .synthetic_chain import InfeasibleScenarioError, ScenarioSpec, generate

log = logging.getLogger("composability")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NETWORK = 2
EXIT_CORRUPT = 3
EXIT_MISSING = 4
EXIT_NO_EVENTS = 5
EXIT_INFEASIBLE = 6
EXIT_LOCKED = 7

DEFAULT_FROM_BLOCK = 9_193_266
DEFAULT_TO_BLOCK = 11_565_018
DEFAULT_MAX_DEPTH = 8


class UsageError(Exception):
    pass


class MissingInputError(Exception):
    pass


class NoClassifiedEventsError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    endpoint: str | None = None
    cache_dir: str = "cache"
    roots_path: str | None = None
    registry_path: str | None = None
    discovered_path: str | None = None
    from_block: int = DEFAULT_FROM_BLOCK
    to_block: int = DEFAULT_TO_BLOCK
    count_mode: str = "event"
    include_mint_burn: bool = True
    bucket_blocks: int = DEFAULT_BUCKET_BLOCKS
    timestamps: str | None = None
    max_depth: int = DEFAULT_MAX_DEPTH
    min_evidence: int = DEFAULT_MIN_EVIDENCE
    min_holders: int = DEFAULT_MIN_HOLDERS
    segment_blocks: int = DEFAULT_SEGMENT_BLOCKS
    workers: int = 1
    tokens: tuple[str, ...] | None = None
    allow_near_head: bool = False
    replay: str | None = None
    out: str | None = None
    counts_in: str | None = None
    counts_out: str | None = None

    @property
    def range(self) -> BlockRange:
        return BlockRange(self.from_block, self.to_block)

    @property
    def policy(self) -> CountingPolicy:
        mode = CountMode.TRANSACTION if self.count_mode == "tx" else CountMode.EVENT
        return CountingPolicy(mode, self.include_mint_burn)

    @property
    def bucketing(self) -> Bucketing:
        if self.timestamps:
            return TimestampMonths.load(self.timestamps, self.from_block, self.to_block)
        return FixedBlockWindow(self.bucket_blocks, self.from_block, self.to_block)

    def echo(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


_FIELD_TYPES = {
    "from_block": int, "to_block": int, "bucket_blocks": int, "max_depth": int,
    "min_evidence": int, "min_holders": int, "segment_blocks": int, "workers": int,
}


def _bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"expected true or false, got {text!r}")


def resolve_config(args: argparse.Namespace, env: dict[str, str] | None = None) -> RunConfig:
    """CLI flag > environment > config file > built-in default."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except FileNotFoundError:
            raise MissingInputError(f"config file {args.config} not found") from None
        unknown = set(file_values) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(file_values)
    if env.get(RPC_URL_ENV):
        values["endpoint"] = env[RPC_URL_ENV]
    for name in RunConfig.__dataclass_fields__:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    for name, typ in _FIELD_TYPES.items():
        if name in values:
            values[name] = typ(values[name])
    if "include_mint_burn" in values:
        values["include_mint_burn"] = _bool(values["include_mint_burn"])
    if "allow_near_head" in values:
        values["allow_near_head"] = _bool(values["allow_near_head"])
    if values.get("tokens") is not None:
        values["tokens"] = tuple(values["tokens"])
    if values.get("count_mode", "event") not in ("event", "tx"):
        raise UsageError("--count-mode must be event or tx")
    cfg = RunConfig(**values)
    try:
        cfg.range
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.bucket_blocks < 1 or cfg.segment_blocks < 1 or cfg.workers < 1:
        raise UsageError("bucket, segment and worker counts must be >= 1")
    return cfg


# -- commands -----------------------------------------------------------------


def _roots(cfg: RunConfig) -> list[RootSpec]:
    if not cfg.roots_path:
        raise MissingInputError("--roots is required")
    if not Path(cfg.roots_path).exists():
        raise MissingInputError(f"roots file {cfg.roots_path} not found")
    return load_roots(cfg.roots_path)


def _require_coverage(cache: LogCache, block_range: BlockRange) -> None:
    gaps = cache.gaps(block_range)
    if gaps:
        raise CacheCoverageError(gaps)


def cmd_fetch(cfg: RunConfig) -> int:
    if cfg.replay:
        return replay_into_cache(cfg)
    if not cfg.endpoint:
        raise UsageError(f"no endpoint: pass --endpoint or set {RPC_URL_ENV}")
    client = JsonRpcClient.from_url(cfg.endpoint)
    return fetch_into_cache(cfg, client)


def fetch_into_cache(cfg: RunConfig, client: JsonRpcClient) -> int:
    cache = LogCache(cfg.cache_dir)
    token_filter = [Address.from_hex(t.lower()) for t in cfg.tokens] if cfg.tokens else None
    with cache.lock():
        cache.verify()
        if not cfg.allow_near_head:
            head = client.block_number()
            if cfg.to_block > head - HEAD_SAFETY_BLOCKS:
                raise UsageError(
                    f"to_block {cfg.to_block} is within {HEAD_SAFETY_BLOCKS} blocks of head {head}; "
                    "pass --allow-near-head to override"
                )
        plan = cache.missing_segments(cfg.range, cfg.segment_blocks)
        print(f"{len(plan)} new segments")

        def pull(seg: BlockRange) -> list:
            return list(fetch_logs(client, seg, token_filter))

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for seg, logs in zip(plan, pool.map(pull, plan)):
                written = cache.write_segment(seg, logs)
                print(f"segment {seg}: {written.record_count} logs")
        cp = cache.checkpoint(cfg.range)
    print(f"last_complete_block={cp.last_complete_block} segments={len(cp.segments)}")
    return EXIT_OK


def replay_into_cache(cfg: RunConfig) -> int:
    if not Path(cfg.replay).exists():
        raise MissingInputError(f"log file {cfg.replay} not found")
    cache = LogCache(cfg.cache_dir)
    with cache.lock():
        cache.verify()
        plan = cache.missing_segments(cfg.range, cfg.segment_blocks)
        print(f"{len(plan)} new segments")
        cp = write_cache(replay_file(cfg.replay), cfg.cache_dir, cfg.segment_blocks, cfg.range)
    print(f"last_complete_block={cp.last_complete_block} segments={len(cp.segments)}")
    return EXIT_OK


def cmd_discover(cfg: RunConfig) -> int:
    roots = _roots(cfg)
    cache = LogCache(cfg.cache_dir)
    with cache.lock():
        _require_coverage(cache, cfg.range)

        def report(i: int, admitted: list) -> None:
            print(f"iteration {i}: admitted {len(admitted)} edges")

        graph = run_discovery(
            cache_scanner(cache, cfg.range), roots, cfg.max_depth,
            cfg.min_evidence, cfg.min_holders, on_iteration=report,
        )
    out = cfg.out or "discovered.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        write_registry(graph, fh, with_evidence=True)
    print(f"wrote {len(graph.edges)} edges to {out}")
    return EXIT_OK


def _graph(cfg: RunConfig, roots: list[RootSpec]) -> DerivationGraph:
    paths = [p for p in (cfg.registry_path, cfg.discovered_path) if p]
    if not paths:
        raise MissingInputError("classification needs --registry and/or --discovered")
    for p in paths:
        if not Path(p).exists():
            raise MissingInputError(f"graph file {p} not found")
    graph = DerivationGraph(tuple(roots))
    if cfg.registry_path:
        graph = load_registry(cfg.registry_path, roots)
    if cfg.discovered_path:
        graph = merge_graphs(graph, load_registry(cfg.discovered_path, roots))
    return graph


def report_header(block_range: BlockRange) -> dict[str, str]:
    return {"range": f"{block_range.from_block}..{block_range.to_block}"}


def cmd_classify(cfg: RunConfig) -> int:
    if cfg.counts_in:
        return cmd_report(cfg)
    roots = _roots(cfg)
    graph = _graph(cfg, roots)
    distances = compute_distances(graph)
    cache = LogCache(cfg.cache_dir)
    bucketing = cfg.bucketing
    with cache.lock():
        _require_coverage(cache, cfg.range)
        counts = aggregate_cache(cache, cfg.range, distances, cfg.policy, bucketing, workers=cfg.workers)
    if not counts:
        raise NoClassifiedEventsError("no transfer in the cache involves a token of the graph")
    if cfg.counts_out:
        save_counts(counts, cfg.counts_out, {
            "policy": {"mode": cfg.policy.mode.value, "include_mint_burn": cfg.include_mint_burn},
            "bucketing": bucketing.to_dict(),
            "graph_checksum": graph.checksum(),
            "range": [cfg.from_block, cfg.to_block],
            "roots": [[r.root_id, [str(t) for t in r.member_tokens], r.initial_distance] for r in roots],
        })
    _write_report(cfg.out, counts, bucketing, cfg.policy, roots, graph.checksum(), cfg.range)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    if not cfg.counts_in or not Path(cfg.counts_in).exists():
        raise MissingInputError(f"counts file {cfg.counts_in} not found")
    counts, meta = load_counts(cfg.counts_in)
    if not counts:
        raise NoClassifiedEventsError(f"{cfg.counts_in} holds no classified events")
    policy = CountingPolicy(CountMode(meta["policy"]["mode"]), bool(meta["policy"]["include_mint_burn"]))
    roots = [RootSpec(rid, tuple(Address.from_hex(t) for t in toks), d) for rid, toks, d in meta["roots"]]
    lo, hi = meta["range"]
    _write_report(cfg.out, counts, bucketing_from_dict(meta["bucketing"]), policy, roots,
                  meta["graph_checksum"], BlockRange(lo, hi))
    return EXIT_OK


def _write_report(out: str | None, counts, bucketing, policy, roots, checksum, block_range) -> None:
    if out in (None, "-"):
        emit_report(counts, bucketing, policy, sys.stdout, roots, checksum, report_header(block_range))
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        emit_report(counts, bucketing, policy, fh, roots, checksum, report_header(block_range))
    print(f"wrote report to {out}", file=sys.stderr)


SYNTH_FILES = {
    "logs": "logs.tsv",
    "registry": "truth_registry.csv",
    "report": "golden_report.csv",
    "report_tx": "golden_report_tx.csv",
    "roots": "roots.csv",
}


def cmd_synth(scenario_path: str, out_dir: str) -> int:
    if not Path(scenario_path).exists():
        raise MissingInputError(f"scenario file {scenario_path} not found")
    spec = ScenarioSpec.load(scenario_path)
    logs, truth = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_log_file(logs, out / SYNTH_FILES["logs"])
    with open(out / SYNTH_FILES["registry"], "w", encoding="utf-8", newline="") as fh:
        write_registry(truth.expected_graph, fh, with_evidence=True)
    with open(out / SYNTH_FILES["roots"], "w", encoding="utf-8", newline="") as fh:
        write_roots(truth.roots, fh)
    checksum = truth.expected_graph.checksum()
    for key, mode in (("report", CountMode.EVENT), ("report_tx", CountMode.TRANSACTION)):
        policy = CountingPolicy(mode, True)
        with open(out / SYNTH_FILES[key], "w", encoding="utf-8", newline="") as fh:
            emit_report(truth.expected_counts[policy], truth.bucketing, policy, fh,
                        truth.roots, checksum, report_header(spec.blocks))
    print(f"wrote {len(logs)} logs, {len(truth.expected_graph.edges)} edges, "
          f"{truth.expected_group_count} transactions to {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="composability", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file with RunConfig keys")
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--from-block", dest="from_block", type=int)
        p.add_argument("--to-block", dest="to_block", type=int)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("fetch", help="fetch Transfer logs into the cache")
    common(p)
    p.add_argument("--endpoint", help=f"JSON-RPC URL (default ${RPC_URL_ENV})")
    p.add_argument("--segment-blocks", dest="segment_blocks", type=int)
    p.add_argument("--token", dest="tokens", action="append", help="restrict to an emitter (repeatable)")
    p.add_argument("--allow-near-head", dest="allow_near_head", action="store_const", const=True)
    p.add_argument("--replay", help="load a raw-log file instead of querying an endpoint")

    p = sub.add_parser("discover", help="discover wrapping edges from cached logs")
    common(p)
    p.add_argument("--roots", dest="roots_path")
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-evidence", dest="min_evidence", type=int)
    p.add_argument("--min-holders", dest="min_holders", type=int)
    p.add_argument("--out")

    for name in ("classify", "report"):
        p = sub.add_parser(name, help="count transfers by root, distance and bucket")
        common(p)
        p.add_argument("--roots", dest="roots_path")
        p.add_argument("--registry", dest="registry_path", help="curated registry file")
        p.add_argument("--discovered", dest="discovered_path", help="output of discover")
        p.add_argument("--count-mode", dest="count_mode", choices=("event", "tx"))
        p.add_argument("--include-mint-burn", dest="include_mint_burn")
        p.add_argument("--bucket-blocks", dest="bucket_blocks", type=int)
        p.add_argument("--timestamps", help="block_number,unix_timestamp file for monthly buckets")
        p.add_argument("--out", help="report path (default stdout)")
        p.add_argument("--counts-out", dest="counts_out")
        p.add_argument("--counts-in", dest="counts_in", required=(name == "report"))

    p = sub.add_parser("synth", help="generate a synthetic scenario with golden outputs")
    p.add_argument("scenario")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args.scenario, args.out_dir)
        cfg = resolve_config(args)
        print(f"# resolved config: {cfg.echo()}", file=sys.stderr)
        if args.command == "fetch":
            return cmd_fetch(cfg)
        if args.command == "discover":
            return cmd_discover(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        return cmd_classify(cfg)
    except NetworkError as exc:
        print(f"error: network: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except CacheCorruptionError as exc:
        print(f"error: cache corruption: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (CacheCoverageError, MissingInputError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NoClassifiedEventsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_EVENTS
    except InfeasibleScenarioError as exc:
        print(f"error: infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CacheLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (UsageError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
