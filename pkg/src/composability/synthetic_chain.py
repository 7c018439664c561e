"""Seeded synthetic transfer streams with a planted wrapping topology.

The generator knows, by construction, which tokens wrap which and how many
transfers of each kind land in each bucket, so it emits exact expected
graphs and counts alongside the logs. Those expectations are tallied here
directly from the planted transactions and never pass through the
classification code they are used to check.

Layout of a scenario: bucket 0 is the setup bucket and carries every
deposit-mint / burn-redeem evidence transaction plus decoys; buckets 1..n-1
carry plain and composed traffic whose composed share matches the bucket
plan exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from collections import Counter, defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Any

from .chain_model import ZERO_ADDRESS, Address, LogPosition, RawLog, TransferEvent, encode_transfer
from .classification import ClassifiedCount, CountingPolicy, CountMode, FixedBlockWindow
from .derivation_graph import (
    DEFAULT_MIN_EVIDENCE,
    DEFAULT_MIN_HOLDERS,
    DerivationGraph,
    Origin,
    RootSpec,
    WrapEdge,
)
from .ingestion import BlockRange

ALL_POLICIES = tuple(
    CountingPolicy(mode, include) for mode in CountMode for include in (True, False)
)
_USER_POOL = 64


class InfeasibleScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedEdge:
    parent: str
    child: str
    evidence_tx: int
    holders: int


@dataclass(frozen=True)
class RootPlan:
    root_id: str
    members: tuple[str, ...]
    initial_distance: int = 0


@dataclass(frozen=True)
class Noise:
    airdrop_mints: int = 0  # per bucket: mint of an untracked token with no deposit
    untracked_transfers: int = 0  # per bucket: transfers of untracked tokens
    root_mint_burn: int = 0  # per bucket per root: plain mints/burns of member tokens
    decoy_deposits: int = 0  # setup bucket: root deposit to D plus a mint of X != D


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    roots: tuple[RootPlan, ...]
    blocks: BlockRange
    planted_edges: tuple[PlantedEdge, ...] = ()
    noise: Noise = Noise()
    bucket_plan: Mapping[str, tuple[Fraction, ...]] = field(default_factory=dict)
    traffic: Mapping[str, int] = field(default_factory=dict)
    bucket_blocks: int = 195_000
    min_evidence: int = DEFAULT_MIN_EVIDENCE
    min_holders: int = DEFAULT_MIN_HOLDERS
    max_depth: int = 8
    name: str = "scenario"

    @property
    def n_buckets(self) -> int:
        return -(-self.blocks.width // self.bucket_blocks)

    @property
    def bucketing(self) -> FixedBlockWindow:
        return FixedBlockWindow(self.bucket_blocks, self.blocks.from_block, self.blocks.to_block)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioSpec":
        try:
            roots = tuple(
                RootPlan(r["id"], tuple(r["members"]), int(r.get("initial_distance", 0)))
                for r in d["roots"]
            )
            edges = tuple(
                PlantedEdge(e["parent"], e["child"], int(e["evidence_tx"]), int(e["holders"]))
                for e in d.get("planted_edges", ())
            )
            disc = d.get("discovery", {})
            return cls(
                seed=int(d["seed"]),
                roots=roots,
                blocks=BlockRange(int(d["blocks"]["from"]), int(d["blocks"]["to"])),
                planted_edges=edges,
                noise=Noise(**d.get("noise", {})),
                bucket_plan={k: tuple(_fraction(x) for x in v) for k, v in d.get("bucket_plan", {}).items()},
                traffic={k: int(v) for k, v in d.get("traffic", {}).items()},
                bucket_blocks=int(d.get("bucket_blocks", 195_000)),
                min_evidence=int(disc.get("min_evidence", DEFAULT_MIN_EVIDENCE)),
                min_holders=int(disc.get("min_holders", DEFAULT_MIN_HOLDERS)),
                max_depth=int(disc.get("max_depth", 8)),
                name=str(d.get("name", "scenario")),
            )
        except (KeyError, TypeError) as exc:
            raise InfeasibleScenarioError(f"scenario is missing or mistypes a field: {exc}") from None

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh, parse_float=Decimal))


def _fraction(x: Any) -> Fraction:
    if isinstance(x, float):
        return Fraction(str(x))
    try:
        return Fraction(x)
    except (TypeError, ValueError):
        raise InfeasibleScenarioError(f"share {x!r} is not a number") from None


@dataclass
class GroundTruth:
    roots: tuple[RootSpec, ...]
    tokens: dict[str, Address]
    expected_graph: DerivationGraph
    distances: dict[tuple[str, Address], int]
    expected_counts: dict[CountingPolicy, ClassifiedCount]
    expected_group_count: int
    bucketing: FixedBlockWindow
    evidence_txs: dict[tuple[Address, Address], list[bytes]]


@dataclass(frozen=True)
class Mismatch:
    kind: str  # "edge_missing", "edge_unexpected", "count"
    key: Any
    expected: Any
    actual: Any

    def __str__(self) -> str:
        return f"{self.kind} {self.key}: expected {self.expected}, got {self.actual}"


def largest_remainder(total: int, weights: Sequence[Fraction]) -> list[int]:
    """Apportion ``total`` integer units in proportion to ``weights``.

    Ties on the remainder go to the earlier index.
    """
    wsum = sum(weights, Fraction(0))
    if total == 0 or wsum == 0:
        return [0] * len(weights)
    quotas = [Fraction(total) * w / wsum for w in weights]
    floors = [q.numerator // q.denominator for q in quotas]
    left = total - sum(floors)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return floors


class _Namer:
    def __init__(self, seed: int) -> None:
        self.key = seed.to_bytes(8, "big", signed=False)

    def address(self, role: str, name: str | int) -> Address:
        return Address(hashlib.blake2b(f"{role}:{name}".encode(), key=self.key, digest_size=20).digest())

    def word(self, role: str, name: str | int) -> bytes:
        return hashlib.blake2b(f"{role}:{name}".encode(), key=self.key, digest_size=32).digest()


Tx = list[tuple[Address, Address, Address, int]]  # (token, sender, recipient, value)


def _validate(spec: ScenarioSpec) -> None:
    names: set[str] = set()
    root_ids = set()
    for root in spec.roots:
        if root.root_id in root_ids:
            raise InfeasibleScenarioError(f"duplicate root {root.root_id}")
        root_ids.add(root.root_id)
        for m in root.members:
            if m in names:
                raise InfeasibleScenarioError(f"token name {m} used twice")
            names.add(m)
    members = set(names)
    for e in spec.planted_edges:
        if e.child in members:
            raise InfeasibleScenarioError(f"planted child {e.child} is a root member")
        if e.parent == e.child:
            raise InfeasibleScenarioError(f"planted edge {e.parent}->{e.child} is a self-loop")
        if e.evidence_tx < 1 or not 1 <= e.holders <= e.evidence_tx:
            raise InfeasibleScenarioError(
                f"edge {e.parent}->{e.child}: need evidence_tx >= 1 and 1 <= holders <= evidence_tx"
            )
    planted_names = members | {e.child for e in spec.planted_edges}
    for e in spec.planted_edges:
        if e.parent not in planted_names:
            raise InfeasibleScenarioError(f"planted parent {e.parent} is neither a root member nor a planted child")
    if len({(e.parent, e.child) for e in spec.planted_edges}) != len(spec.planted_edges):
        raise InfeasibleScenarioError("planted edge listed twice")
    if spec.bucket_blocks < 1:
        raise InfeasibleScenarioError("bucket_blocks must be >= 1")
    n_plan = spec.n_buckets - 1
    for root_id, plan in spec.bucket_plan.items():
        if root_id not in root_ids:
            raise InfeasibleScenarioError(f"bucket plan for unknown root {root_id}")
        if len(plan) != n_plan:
            raise InfeasibleScenarioError(
                f"bucket plan for {root_id} has {len(plan)} entries; the range has {n_plan} traffic buckets"
            )
        for s in plan:
            if not 0 <= s <= 1:
                raise InfeasibleScenarioError(f"share target {float(s)} for {root_id} is outside [0, 1]")
    for root_id in spec.traffic:
        if root_id not in root_ids:
            raise InfeasibleScenarioError(f"traffic for unknown root {root_id}")
    for field_name in ("airdrop_mints", "untracked_transfers", "root_mint_burn", "decoy_deposits"):
        if getattr(spec.noise, field_name) < 0:
            raise InfeasibleScenarioError(f"noise.{field_name} must be >= 0")


def _admitted_edges(spec: ScenarioSpec) -> list[tuple[PlantedEdge, int]]:
    """Edges a thresholded generation-by-generation search must recover, with their generation."""
    tracked = {m for r in spec.roots for m in r.members}
    admitted: list[tuple[PlantedEdge, int]] = []
    done: set[tuple[str, str]] = set()
    for generation in range(1, spec.max_depth + 1):
        new = [
            e for e in spec.planted_edges
            if (e.parent, e.child) not in done
            and e.parent in tracked
            and e.evidence_tx >= spec.min_evidence
            and e.holders >= spec.min_holders
        ]
        if not new:
            break
        for e in new:
            done.add((e.parent, e.child))
            admitted.append((e, generation))
        tracked |= {e.child for e in new}
    return admitted


def _relaxed_distances(roots: Sequence[RootPlan], edges: Sequence[PlantedEdge]) -> dict[tuple[str, str], int]:
    """Shortest distances by repeated relaxation over named tokens."""
    out: dict[tuple[str, str], int] = {}
    for root in roots:
        dist = {m: root.initial_distance for m in root.members}
        changed = True
        while changed:
            changed = False
            for e in edges:
                if e.parent in dist and e.child not in root.members:
                    cand = dist[e.parent] + 1
                    if cand < dist.get(e.child, cand + 1):
                        dist[e.child] = cand
                        changed = True
        for name, d in dist.items():
            out[(root.root_id, name)] = d
    return out


def generate(spec: ScenarioSpec) -> tuple[list[RawLog], GroundTruth]:
    _validate(spec)
    rng = random.Random(spec.seed)
    namer = _Namer(spec.seed)

    all_names = [m for r in spec.roots for m in r.members]
    all_names += sorted({e.child for e in spec.planted_edges} - set(all_names))
    tokens = {name: namer.address("token", name) for name in all_names}
    roots = tuple(RootSpec(r.root_id, tuple(tokens[m] for m in r.members), r.initial_distance) for r in spec.roots)
    users = [namer.address("user", i) for i in range(_USER_POOL)]

    admitted = _admitted_edges(spec)
    graph = DerivationGraph(roots)
    for e, generation in admitted:
        graph.add_edge(WrapEdge(
            tokens[e.parent], tokens[e.child], 1, e.evidence_tx, e.holders,
            origin=Origin.DISCOVERED, iteration=generation,
        ))
    named_dist = _relaxed_distances(spec.roots, [e for e, _ in admitted])
    distances = {(r, tokens[name]): d for (r, name), d in named_dist.items()}

    def value() -> int:
        if rng.random() < 0.01:
            return (1 << 255) + rng.randrange(1 << 64)
        return rng.randrange(1, 10**24)

    def pair() -> tuple[Address, Address]:
        a, b = rng.sample(users, 2)
        return a, b

    buckets: list[list[Tx]] = [[] for _ in range(spec.n_buckets)]
    tx_tags: dict[int, tuple[Address, Address]] = {}  # id(tx) -> planted edge, for evidence bookkeeping

    # setup bucket: evidence for every planted edge, admitted or not
    for k, e in enumerate(spec.planted_edges):
        parent, child = tokens[e.parent], tokens[e.child]
        holders = [namer.address(f"holder:{k}", i) for i in range(e.holders)]
        for i in range(e.evidence_tx):
            h = holders[i % e.holders]
            amount = value()
            if i % 3 == 2:
                tx: Tx = [(child, h, ZERO_ADDRESS, amount), (parent, child, h, value())]
            else:
                tx = [(parent, h, child, amount), (child, ZERO_ADDRESS, h, value())]
            tx_tags[id(tx)] = (parent, child)
            buckets[0].append(tx)
    member_tokens = [tokens[m] for r in spec.roots for m in r.members]
    decoy_target = namer.address("decoy-contract", 0)
    decoy_token = namer.address("airdrop", "decoy")
    for i in range(spec.noise.decoy_deposits):
        h = users[i % len(users)]
        tok = member_tokens[i % len(member_tokens)]
        buckets[0].append([(tok, h, decoy_target, value()), (decoy_token, ZERO_ADDRESS, h, value())])

    for b in range(spec.n_buckets):
        for i in range(spec.noise.airdrop_mints):
            buckets[b].append([(namer.address("airdrop", i % 7), ZERO_ADDRESS, rng.choice(users), value())])
        for i in range(spec.noise.untracked_transfers):
            src, dst = pair()
            buckets[b].append([(namer.address("untracked", i % 11), src, dst, value())])

    # traffic buckets
    for root in spec.roots:
        members = [tokens[m] for m in root.members]
        exclusive = sorted(
            (d, tok) for (r, tok), d in distances.items()
            if r == root.root_id and d > root.initial_distance
            and sum(1 for (r2, t2) in distances if t2 == tok) == 1
        )
        composed_tokens = [tok for _, tok in exclusive]
        n_traffic = spec.traffic.get(root.root_id, 0)
        plan = spec.bucket_plan.get(root.root_id, (Fraction(0),) * (spec.n_buckets - 1))
        mint_burn = spec.noise.root_mint_burn
        for b in range(1, spec.n_buckets):
            share = plan[b - 1]
            if n_traffic == 0:
                if share != 0:
                    raise InfeasibleScenarioError(f"{root.root_id} bucket {b}: share {share} needs traffic")
                plain_n, composed_n = mint_burn, 0
            else:
                plain_n, composed_n = largest_remainder(n_traffic, [1 - share, share])
                if Fraction(composed_n, n_traffic) != share:
                    raise InfeasibleScenarioError(
                        f"{root.root_id} bucket {b}: share {share} is not reachable with {n_traffic} transfers"
                    )
                # mints and burns of members are plain events and must fit in the plain quota
                if mint_burn > plain_n:
                    raise InfeasibleScenarioError(
                        f"{root.root_id} bucket {b}: {mint_burn} mint/burn events exceed {plain_n} plain transfers"
                    )
            if composed_n and not composed_tokens:
                raise InfeasibleScenarioError(
                    f"{root.root_id} has composed traffic but no derivative reachable from it alone"
                )
            plain: list[Tx] = []
            for tok, n in zip(members, largest_remainder(plain_n, [Fraction(1)] * len(members))):
                for _ in range(n):
                    src, dst = pair()
                    plain.append([(tok, src, dst, value())])
            for i in range(mint_burn):
                tok, src, dst, amount = plain[i][0]
                plain[i][0] = (tok, ZERO_ADDRESS, dst, amount) if i % 2 == 0 else (tok, src, ZERO_ADDRESS, amount)
            buckets[b].extend(plain)
            if composed_n:
                split = largest_remainder(composed_n, [Fraction(1)] * len(composed_tokens))
                for tok, n in zip(composed_tokens, split):
                    for _ in range(n):
                        src, dst = pair()
                        buckets[b].append([(tok, src, dst, value())])

    # place transactions into blocks
    bucketing = spec.bucketing
    logs: list[RawLog] = []
    evidence_txs: dict[tuple[Address, Address], list[bytes]] = defaultdict(list)
    counts = {p: ClassifiedCount() for p in ALL_POLICIES}
    tx_counter = 0
    by_token: dict[Address, list[tuple[str, int]]] = defaultdict(list)
    for (r, tok), d in sorted(distances.items()):
        by_token[tok].append((r, d))
    for b, txs in enumerate(buckets):
        lo, hi = bucketing.bounds(b)
        rng.shuffle(txs)
        placed = sorted(((rng.randint(lo, hi), i) for i in range(len(txs))))
        next_index: dict[int, int] = defaultdict(int)
        for block, i in placed:
            tx = txs[i]
            tx_hash = namer.word("tx", tx_counter)
            tx_counter += 1
            if id(tx) in tx_tags:
                evidence_txs[tx_tags[id(tx)]].append(tx_hash)
            events = []
            for token, sender, recipient, amount in tx:
                pos = LogPosition(block, tx_hash, next_index[block])
                next_index[block] += 1
                ev = TransferEvent(token, sender, recipient, amount, pos)
                events.append(ev)
                logs.append(encode_transfer(ev))
            _tally(counts, events, by_token, b)

    truth = GroundTruth(
        roots=roots,
        tokens=tokens,
        expected_graph=graph,
        distances=distances,
        expected_counts=counts,
        expected_group_count=tx_counter,
        bucketing=bucketing,
        evidence_txs=dict(evidence_txs),
    )
    return logs, truth


def _tally(
    counts: dict[CountingPolicy, ClassifiedCount],
    events: Sequence[TransferEvent],
    by_token: Mapping[Address, Sequence[tuple[str, int]]],
    bucket: int,
) -> None:
    zero_hits: Counter = Counter()
    for ev in events:
        if ev.sender == ZERO_ADDRESS or ev.recipient == ZERO_ADDRESS:
            for r, _ in by_token.get(ev.token, ()):
                zero_hits[r] += 1
    for policy, cc in counts.items():
        cc.zero_address.update(zero_hits)
        kept = [
            ev for ev in events
            if policy.include_mint_burn or not (ev.sender == ZERO_ADDRESS or ev.recipient == ZERO_ADDRESS)
        ]
        if policy.mode is CountMode.EVENT:
            for ev in kept:
                for r, d in by_token.get(ev.token, ()):
                    cc.entries[(r, d, bucket)] += 1
        else:
            deepest: dict[str, int] = {}
            for ev in kept:
                for r, d in by_token.get(ev.token, ()):
                    deepest[r] = max(deepest.get(r, d), d)
            for r, d in deepest.items():
                cc.entries[(r, d, bucket)] += 1


def verify(
    counts: ClassifiedCount,
    graph: DerivationGraph,
    truth: GroundTruth,
    policy: CountingPolicy = CountingPolicy(),
) -> list[Mismatch]:
    """Compare a pipeline's graph and counts with the generator's expectations."""
    out: list[Mismatch] = []
    expected_edges = truth.expected_graph.edge_set()
    actual_edges = graph.edge_set()
    for key in sorted(expected_edges - actual_edges):
        out.append(Mismatch("edge_missing", (str(key[0]), str(key[1])), "present", "absent"))
    for key in sorted(actual_edges - expected_edges):
        out.append(Mismatch("edge_unexpected", (str(key[0]), str(key[1])), "absent", "present"))
    expected = truth.expected_counts[policy]
    for key in sorted(set(expected.entries) | set(counts.entries)):
        e, a = expected.entries.get(key, 0), counts.entries.get(key, 0)
        if e != a:
            out.append(Mismatch("count", key, e, a))
    return out
