"""Derivation graph of wrapped assets and composition distances.

Edges point from a wrapped asset (parent) to the token issued against it
(child). Each edge is one wrapping operation of unit weight, so a token's
distance to a root is the root's initial distance plus the number of
wrappings on the shortest chain from any of the root's member tokens.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
import os
from collections import defaultdict, deque
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from typing import TextIO

from .chain_model import ZERO_ADDRESS, Address, HexParseError, TransferEvent

log = logging.getLogger(__name__)

DEFAULT_MIN_EVIDENCE = 5
DEFAULT_MIN_HOLDERS = 3
REGISTRY_HEADER = ("parent", "child", "label", "origin")
EVIDENCE_HEADER = ("evidence_tx", "evidence_holders")
ROOTS_HEADER = ("root_id", "token_address", "initial_distance")
ACYCLIC_DIRECTIVE = "# @acyclic"


class RegistryError(ValueError):
    def __init__(self, message: str, line_no: int | None = None) -> None:
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)
        self.line_no = line_no


class UnreachableParentError(RegistryError):
    pass


class DuplicateEdgeError(RegistryError):
    pass


class Origin(str, enum.Enum):
    CURATED = "curated"
    DISCOVERED = "discovered"


@dataclass(frozen=True)
class RootSpec:
    root_id: str
    member_tokens: tuple[Address, ...]
    initial_distance: int = 0

    def __post_init__(self) -> None:
        if not self.member_tokens:
            raise ValueError(f"root {self.root_id} has no member tokens")
        if len(set(self.member_tokens)) != len(self.member_tokens):
            raise ValueError(f"root {self.root_id} lists a member token twice")
        if self.initial_distance < 0:
            raise ValueError("initial_distance must be non-negative")


@dataclass(frozen=True)
class WrapEdge:
    parent: Address
    child: Address
    weight: int = 1
    evidence_tx_count: int = 0
    evidence_holder_count: int = 0
    origin: Origin = Origin.CURATED
    label: str = ""
    iteration: int = 0  # discovery iteration that admitted the edge; 0 for curated

    def __post_init__(self) -> None:
        if self.parent == self.child:
            raise ValueError(f"self-loop edge on {self.parent}")
        if self.weight != 1:
            raise ValueError("wrapping edges have unit weight")

    @property
    def key(self) -> tuple[Address, Address]:
        return (self.parent, self.child)


@dataclass
class DerivationGraph:
    roots: tuple[RootSpec, ...]
    nodes: set[Address] = field(default_factory=set)
    edges: dict[tuple[Address, Address], WrapEdge] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: dict[Address, str] = {}
        ids = set()
        for root in self.roots:
            if root.root_id in ids:
                raise ValueError(f"duplicate root id {root.root_id}")
            ids.add(root.root_id)
            for tok in root.member_tokens:
                if tok in seen:
                    raise ValueError(f"token {tok} is a member of both {seen[tok]} and {root.root_id}")
                seen[tok] = root.root_id
                self.nodes.add(tok)

    @property
    def root_tokens(self) -> set[Address]:
        return {t for r in self.roots for t in r.member_tokens}

    def add_edge(self, edge: WrapEdge) -> None:
        self.edges[edge.key] = edge
        self.nodes.add(edge.parent)
        self.nodes.add(edge.child)

    def children(self) -> dict[Address, list[Address]]:
        adj: dict[Address, list[Address]] = defaultdict(list)
        for parent, child in sorted(self.edges):
            adj[parent].append(child)
        return adj

    def reachable(self) -> set[Address]:
        adj = self.children()
        seen = set(self.root_tokens)
        queue = deque(seen)
        while queue:
            node = queue.popleft()
            for child in adj.get(node, ()):
                if child not in seen:
                    seen.add(child)
                    queue.append(child)
        return seen

    def has_cycle(self) -> bool:
        adj = self.children()
        state: dict[Address, int] = {}
        for start in sorted(self.nodes):
            if start in state:
                continue
            stack = [(start, iter(adj.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(nxt) == 1:
                    return True
                elif nxt not in state:
                    state[nxt] = 1
                    stack.append((nxt, iter(adj.get(nxt, ()))))
        return False

    def validate(self) -> None:
        for parent, child in self.edges:
            if parent not in self.nodes or child not in self.nodes:
                raise ValueError(f"edge {parent}->{child} has an endpoint outside the node set")
        orphans = self.nodes - self.reachable()
        if orphans:
            raise ValueError(f"{len(orphans)} nodes unreachable from any root, e.g. {min(orphans)}")

    def edge_set(self) -> set[tuple[Address, Address]]:
        return set(self.edges)

    def checksum(self) -> str:
        """SHA-256 over roots and sorted edge structure; independent of evidence and labels."""
        h = hashlib.sha256()
        for root in sorted(self.roots, key=lambda r: r.root_id):
            members = ",".join(sorted(str(t) for t in root.member_tokens))
            h.update(f"root={root.root_id},{root.initial_distance},{members}\n".encode())
        for parent, child in sorted(self.edges):
            h.update(f"edge={parent},{child},{self.edges[(parent, child)].weight}\n".encode())
        return h.hexdigest()


# -- files --------------------------------------------------------------------


def _data_lines(text: Iterable[str]) -> Iterator[tuple[int, str]]:
    for line_no, line in enumerate(text, 1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield line_no, stripped


def load_roots(path: str | os.PathLike[str]) -> list[RootSpec]:
    """Read ``root_id,token_address,initial_distance`` lines into RootSpecs."""
    members: dict[str, list[Address]] = {}
    distances: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in _data_lines(fh):
            cells = [c.strip() for c in line.split(",")]
            if tuple(cells) == ROOTS_HEADER:
                continue
            if len(cells) != 3:
                raise RegistryError("expected root_id,token_address,initial_distance", line_no)
            root_id, addr, dist = cells
            try:
                token = Address.from_hex(addr.lower())
                d = int(dist)
            except (HexParseError, ValueError) as exc:
                raise RegistryError(str(exc), line_no) from None
            if root_id in distances and distances[root_id] != d:
                raise RegistryError(f"root {root_id} has conflicting initial distances", line_no)
            distances[root_id] = d
            members.setdefault(root_id, []).append(token)
    return [RootSpec(rid, tuple(toks), distances[rid]) for rid, toks in members.items()]


def write_roots(roots: Sequence[RootSpec], out: TextIO) -> None:
    out.write(",".join(ROOTS_HEADER) + "\n")
    for root in roots:
        for tok in root.member_tokens:
            out.write(f"{root.root_id},{tok},{root.initial_distance}\n")


def load_registry(
    path: str | os.PathLike[str],
    roots: Sequence[RootSpec],
    require_acyclic: bool | None = None,
) -> DerivationGraph:
    """Load a curated registry file.

    Line order does not matter. Evidence columns, if present, are kept.
    A ``# @acyclic`` line (or ``require_acyclic=True``) turns on cycle checks.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_registry(text, roots, require_acyclic)


def parse_registry(
    text: str, roots: Sequence[RootSpec], require_acyclic: bool | None = None
) -> DerivationGraph:
    lines = text.splitlines()
    if require_acyclic is None:
        require_acyclic = any(line.strip() == ACYCLIC_DIRECTIVE for line in lines)
    graph = DerivationGraph(tuple(roots))
    header_seen = False
    with_evidence = False
    line_of: dict[tuple[Address, Address], int] = {}
    for line_no, line in _data_lines(lines):
        cells = next(csv.reader([line]))
        cells = [c.strip() for c in cells]
        if not header_seen:
            if tuple(cells) == REGISTRY_HEADER:
                with_evidence = False
            elif tuple(cells) == REGISTRY_HEADER + EVIDENCE_HEADER:
                with_evidence = True
            else:
                raise RegistryError("missing header parent,child,label,origin", line_no)
            header_seen = True
            continue
        width = len(REGISTRY_HEADER) + (len(EVIDENCE_HEADER) if with_evidence else 0)
        if len(cells) != width:
            raise RegistryError(f"expected {width} columns, got {len(cells)}", line_no)
        try:
            parent = Address.from_hex(cells[0].lower())
            child = Address.from_hex(cells[1].lower())
            origin = Origin(cells[3] or Origin.CURATED.value)
            ev_tx, ev_holders = (int(cells[4]), int(cells[5])) if with_evidence else (0, 0)
            edge = WrapEdge(
                parent, child, 1, ev_tx, ev_holders, origin=origin, label=cells[2]
            )
        except (HexParseError, ValueError) as exc:
            raise RegistryError(str(exc), line_no) from None
        if edge.key in graph.edges:
            raise DuplicateEdgeError(f"duplicate edge {parent}->{child}", line_no)
        line_of[edge.key] = line_no
        graph.add_edge(edge)
    reach = graph.reachable()
    for key in sorted(graph.edges, key=lambda k: line_of[k]):
        if key[0] not in reach:
            raise UnreachableParentError(f"parent {key[0]} is not reachable from any root", line_of[key])
    if require_acyclic and graph.has_cycle():
        raise RegistryError("registry declares itself acyclic but contains a directed cycle")
    return graph


def write_registry(graph: DerivationGraph, out: TextIO, with_evidence: bool = False) -> None:
    header = REGISTRY_HEADER + (EVIDENCE_HEADER if with_evidence else ())
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for key in sorted(graph.edges):
        e = graph.edges[key]
        row = [str(e.parent), str(e.child), e.label, e.origin.value]
        if with_evidence:
            row += [e.evidence_tx_count, e.evidence_holder_count]
        writer.writerow(row)


def registry_text(graph: DerivationGraph, with_evidence: bool = False) -> str:
    buf = io.StringIO()
    write_registry(graph, buf, with_evidence)
    return buf.getvalue()


# -- discovery ----------------------------------------------------------------


@dataclass
class Evidence:
    """Mergeable per-edge evidence: transaction hashes and distinct holders."""

    txs: dict[tuple[Address, Address], set[bytes]] = field(default_factory=lambda: defaultdict(set))
    holders: dict[tuple[Address, Address], set[Address]] = field(default_factory=lambda: defaultdict(set))

    def add(self, parent: Address, child: Address, tx_hash: bytes, holder: Address) -> None:
        self.txs[(parent, child)].add(tx_hash)
        self.holders[(parent, child)].add(holder)

    def merge(self, other: "Evidence") -> "Evidence":
        out = Evidence()
        for src in (self, other):
            for k, v in src.txs.items():
                out.txs[k] |= v
            for k, v in src.holders.items():
                out.holders[k] |= v
        return out

    def candidates(self, min_evidence: int, min_holders: int) -> list[WrapEdge]:
        out = []
        for key in sorted(self.txs):
            n_tx, n_h = len(self.txs[key]), len(self.holders[key])
            if n_tx >= min_evidence and n_h >= min_holders:
                out.append(WrapEdge(key[0], key[1], 1, n_tx, n_h, origin=Origin.DISCOVERED))
        return out


def collect_evidence(
    tx_groups: Iterable[tuple[bytes, Sequence[TransferEvent]]],
    tracked: set[Address],
    root_tokens: set[Address],
) -> Evidence:
    """Scan transaction groups for deposit-mint and burn-redeem pairs.

    Deposit-mint: a tracked token T moves H -> C and, in the same
    transaction, C's own token is minted to H. Burn-redeem: C's token is
    burned by H and a tracked token T moves C -> H. Both are evidence that
    C wraps T.
    """
    ev = Evidence()
    zero = ZERO_ADDRESS
    for tx_hash, transfers in tx_groups:
        mints = []
        burns = []
        for t in transfers:
            if t.value <= 0:
                continue
            if t.sender == zero and t.recipient != zero:
                mints.append(t)
            elif t.recipient == zero and t.sender != zero:
                burns.append(t)
        if not mints and not burns:
            continue
        moves: dict[tuple[Address, Address], set[Address]] = defaultdict(set)
        for t in transfers:
            if t.value > 0 and t.token in tracked and t.sender != zero and t.recipient != zero:
                moves[(t.sender, t.recipient)].add(t.token)
        if not moves:
            continue
        for m in mints:
            wrapped = m.token
            if wrapped in root_tokens:
                continue
            holder = m.recipient
            for parent in moves.get((holder, wrapped), ()):
                if parent != wrapped:
                    ev.add(parent, wrapped, tx_hash, holder)
        for b in burns:
            wrapped = b.token
            if wrapped in root_tokens:
                continue
            holder = b.sender
            for parent in moves.get((wrapped, holder), ()):
                if parent != wrapped:
                    ev.add(parent, wrapped, tx_hash, holder)
    return ev


def discover_edges(
    tx_groups: Iterable[tuple[bytes, Sequence[TransferEvent]]],
    graph: DerivationGraph,
    min_evidence: int = DEFAULT_MIN_EVIDENCE,
    min_holders: int = DEFAULT_MIN_HOLDERS,
) -> list[WrapEdge]:
    ev = collect_evidence(tx_groups, set(graph.nodes), graph.root_tokens)
    return ev.candidates(min_evidence, min_holders)


def run_discovery(
    scan,
    roots: Sequence[RootSpec],
    max_depth: int,
    min_evidence: int = DEFAULT_MIN_EVIDENCE,
    min_holders: int = DEFAULT_MIN_HOLDERS,
    on_iteration=None,
) -> DerivationGraph:
    """Grow the graph generation by generation until nothing new qualifies.

    ``scan`` is a zero-argument callable returning a fresh iterable of
    ``(tx_hash, transfers)`` groups covering the analysis range; it is called
    once per iteration. ``on_iteration(i, admitted_edges)`` is called after
    each iteration.
    """
    graph = DerivationGraph(tuple(roots))
    iteration = 0
    while iteration < max_depth:
        iteration += 1
        admitted = []
        for cand in discover_edges(scan(), graph, min_evidence, min_holders):
            if cand.key in graph.edges:
                continue
            admitted.append(replace(cand, iteration=iteration))
        # parents were tracked at scan time, so new children land at generation <= iteration
        for edge in admitted:
            graph.add_edge(edge)
        if on_iteration is not None:
            on_iteration(iteration, admitted)
        log.info("discovery iteration %d admitted %d edges", iteration, len(admitted))
        if not admitted:
            break
    return graph


def merge_graphs(curated: DerivationGraph, discovered: DerivationGraph) -> DerivationGraph:
    if set(curated.roots) != set(discovered.roots):
        raise ValueError("cannot merge graphs built over different roots")
    out = DerivationGraph(curated.roots)
    for key in sorted(discovered.edges):
        out.add_edge(discovered.edges[key])
    for key in sorted(curated.edges):
        e = curated.edges[key]
        if key in discovered.edges:
            d = discovered.edges[key]
            e = replace(
                e,
                origin=Origin.CURATED,
                evidence_tx_count=max(e.evidence_tx_count, d.evidence_tx_count),
                evidence_holder_count=max(e.evidence_holder_count, d.evidence_holder_count),
            )
        out.add_edge(e)
    out.nodes |= curated.nodes | discovered.nodes
    return out


# -- distances ----------------------------------------------------------------


class DistanceMap:
    """Per-root composition distances, indexed both ways."""

    def __init__(self, entries: dict[tuple[str, Address], int], roots: Sequence[RootSpec]) -> None:
        self.entries = dict(entries)
        self.roots = tuple(roots)
        by_token: dict[Address, list[tuple[str, int]]] = defaultdict(list)
        for (root_id, token), d in sorted(self.entries.items()):
            by_token[token].append((root_id, d))
        self.by_token: dict[Address, tuple[tuple[str, int], ...]] = {
            t: tuple(v) for t, v in by_token.items()
        }

    def get(self, root_id: str, token: Address) -> int | None:
        return self.entries.get((root_id, token))

    def labels(self, token: Address) -> tuple[tuple[str, int], ...]:
        return self.by_token.get(token, ())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DistanceMap) and self.entries == other.entries

    def __len__(self) -> int:
        return len(self.entries)


def compute_distances(graph: DerivationGraph) -> DistanceMap:
    """Multi-source BFS per root over unit-weight wrapping edges."""
    adj = graph.children()
    entries: dict[tuple[str, Address], int] = {}
    for root in graph.roots:
        dist = {t: root.initial_distance for t in root.member_tokens}
        queue = deque(root.member_tokens)
        while queue:
            node = queue.popleft()
            d = dist[node] + 1
            for child in adj.get(node, ()):
                if child not in dist:
                    dist[child] = d
                    queue.append(child)
        for token, d in dist.items():
            entries[(root.root_id, token)] = d
    return DistanceMap(entries, graph.roots)


def longest_distances(graph: DerivationGraph) -> DistanceMap:
    """Longest-chain distances on the acyclic part of the graph.

    Edges inside a strongly connected component are dropped first, so the
    result is defined even when the graph has cycles. Comparison metric only.
    """
    comp = _scc(graph)
    adj: dict[Address, list[Address]] = defaultdict(list)
    indeg: dict[Address, int] = {n: 0 for n in graph.nodes}
    for parent, child in sorted(graph.edges):
        if comp[parent] != comp[child]:
            adj[parent].append(child)
            indeg[child] += 1
    order = []
    queue = deque(sorted(n for n, k in indeg.items() if k == 0))
    while queue:
        n = queue.popleft()
        order.append(n)
        for c in adj.get(n, ()):
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    entries: dict[tuple[str, Address], int] = {}
    for root in graph.roots:
        dist: dict[Address, int] = {t: root.initial_distance for t in root.member_tokens}
        for n in order:
            if n not in dist:
                continue
            for c in adj.get(n, ()):
                if c in root.member_tokens:
                    continue
                if dist.get(c, -1) < dist[n] + 1:
                    dist[c] = dist[n] + 1
        for token, d in dist.items():
            entries[(root.root_id, token)] = d
    return DistanceMap(entries, graph.roots)


def _scc(graph: DerivationGraph) -> dict[Address, int]:
    """Tarjan's algorithm, iterative."""
    adj = graph.children()
    index: dict[Address, int] = {}
    low: dict[Address, int] = {}
    on_stack: set[Address] = set()
    stack: list[Address] = []
    comp: dict[Address, int] = {}
    counter = 0
    for start in sorted(graph.nodes):
        if start in index:
            continue
        work = [(start, iter(adj.get(start, ())))]
        index[start] = low[start] = counter
        counter += 1
        stack.append(start)
        on_stack.add(start)
        while work:
            node, it = work[-1]
            child = next(it, None)
            if child is not None:
                if child not in index:
                    index[child] = low[child] = counter
                    counter += 1
                    stack.append(child)
                    on_stack.add(child)
                    work.append((child, iter(adj.get(child, ()))))
                elif child in on_stack:
                    low[node] = min(low[node], index[child])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp[member] = index[node]
                    if member == node:
                        break
    return comp
