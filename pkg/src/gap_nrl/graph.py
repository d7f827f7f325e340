"""Edge-list ingestion, train/valid/test edge splits and negative sampling."""
from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = "train", "valid", "test"


class GraphParseError(ValueError):
    pass


class NoCandidateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable edge set over contiguous node indices ``0..num_nodes-1``.

    ``edges`` keeps every edge once, in ingestion order. For an undirected
    graph the adjacency lists carry both orientations, so ``out_adj[u]`` is
    the full neighbor list of ``u`` either way.
    """

    num_nodes: int
    edges: np.ndarray
    directed: bool
    labels: tuple[str, ...]
    out_adj: tuple[np.ndarray, ...] = field(repr=False)
    in_adj: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_edges(cls, num_nodes: int, edges, directed: bool, labels: Sequence[str] | None = None) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        keys = _pair_keys(edges, num_nodes, directed)
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate edges")
        if labels is None:
            labels = [str(i) for i in range(num_nodes)]
        if len(labels) != num_nodes:
            raise ValueError("labels must cover every node")
        src, dst = edges[:, 0], edges[:, 1]
        if not directed:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        out_adj = _group(src, dst, num_nodes)
        in_adj = out_adj if not directed else _group(dst, src, num_nodes)
        edges = edges.copy()
        edges.setflags(write=False)
        return cls(num_nodes, edges, directed, tuple(labels), out_adj, in_adj)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def oriented_pairs(self) -> np.ndarray:
        """Every stored orientation once: the edges, plus reverses if undirected."""
        if self.directed:
            return self.edges.copy()
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def has_edge(self, u: int, v: int) -> bool:
        adj = self.out_adj[u]
        i = np.searchsorted(adj, v)
        return bool(i < len(adj) and adj[i] == v)

    def edge_keys(self) -> np.ndarray:
        """Sorted ``u * n + v`` keys of every stored orientation."""
        pairs = self.oriented_pairs()
        return np.sort(pairs[:, 0] * self.num_nodes + pairs[:, 1])

    def subgraph(self, edges) -> "Graph":
        """Same node set and labels, restricted to ``edges``."""
        return Graph.from_edges(self.num_nodes, edges, self.directed, self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.directed == other.directed
            and self.labels == other.labels
            and np.array_equal(self.edges, other.edges)
        )


def _group(src: np.ndarray, dst: np.ndarray, n: int) -> tuple[np.ndarray, ...]:
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    return tuple(dst[bounds[i]:bounds[i + 1]] for i in range(n))


def _pair_keys(pairs: np.ndarray, n: int, directed: bool) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u, v = pairs[:, 0], pairs[:, 1]
    if not directed:
        u, v = np.minimum(u, v), np.maximum(u, v)
    return u * n + v


def parse_edge_list(text, directed: bool = False) -> Graph:
    """Parse a whitespace-separated edge list.

    ``text`` may be ``str``, ``bytes`` or a binary/text stream. Node labels get
    contiguous indices in order of first appearance on a kept edge. Lines
    starting with ``#`` and blank lines are ignored; self-loops and duplicate
    edges are dropped and counted in the log.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    elif not isinstance(text, str):
        text = text.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    index: dict[str, int] = {}
    labels: list[str] = []
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    n_loops = n_dups = 0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise GraphParseError(f"line {lineno}: expected 2 node labels, got {len(tokens)}")
        a, b = tokens
        if a == b:
            n_loops += 1
            continue
        ia, ib = index.get(a), index.get(b)
        if ia is not None and ib is not None:
            key = (ia, ib) if directed else (min(ia, ib), max(ia, ib))
            if key in seen:
                n_dups += 1
                continue
        for lab in (a, b):
            if lab not in index:
                index[lab] = len(labels)
                labels.append(lab)
        ia, ib = index[a], index[b]
        seen.add((ia, ib) if directed else (min(ia, ib), max(ia, ib)))
        edges.append((ia, ib))

    if not edges:
        raise GraphParseError("edge list contains no edges")
    if n_loops or n_dups:
        logger.info("dropped %d self-loops and %d duplicate edges", n_loops, n_dups)
    return Graph.from_edges(len(labels), edges, directed, labels)


def read_edge_list(path: str | os.PathLike, directed: bool = False) -> Graph:
    with open(path, "rb") as fh:
        return parse_edge_list(fh, directed=directed)


def serialize_edge_list(g: Graph, edges=None) -> str:
    edges = g.edges if edges is None else edges
    return "".join(f"{g.labels[u]} {g.labels[v]}\n" for u, v in np.asarray(edges).reshape(-1, 2))


def read_labels(path: str | os.PathLike, g: Graph) -> np.ndarray:
    """Read ``node_label community_id`` lines into a per-node community array.

    Labelled nodes absent from the graph are ignored; graph nodes without a
    label raise ``ValueError`` naming them.
    """
    index = g.index
    out = np.full(g.num_nodes, -1, dtype=np.int64)
    communities: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 2:
                raise GraphParseError(f"{path}: line {lineno}: expected 'node community'")
            node, com = tokens
            if node in index:
                out[index[node]] = communities.setdefault(com, len(communities))
    missing = np.flatnonzero(out < 0)
    if len(missing):
        shown = ", ".join(g.labels[i] for i in missing[:20])
        raise ValueError(f"{len(missing)} nodes have no community label: {shown}")
    # compact to 0..k-1 over the communities that actually occur
    _, out = np.unique(out, return_inverse=True)
    return out


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    graph: Graph
    train_edges: np.ndarray
    valid_edges: np.ndarray
    test_edges: np.ndarray
    train_graph: Graph
    ratio: float
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, EdgeSplit):
            return NotImplemented
        return (
            self.graph == other.graph
            and np.array_equal(self.train_edges, other.train_edges)
            and np.array_equal(self.valid_edges, other.valid_edges)
            and np.array_equal(self.test_edges, other.test_edges)
        )


def split_edges(g: Graph, ratio: float, valid_fraction: float = 0.05, seed: int = 0) -> EdgeSplit:
    """Random edge split: ``floor(ratio * m)`` edges for training (of which
    ``floor(valid_fraction * that)`` go to validation), the rest for testing."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if not 0.0 <= valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must lie in [0, 1), got {valid_fraction}")
    m = g.num_edges
    perm = np.random.default_rng(seed).permutation(m)
    n_fit = int(np.floor(ratio * m + 1e-9))
    n_valid = int(np.floor(valid_fraction * n_fit + 1e-9))
    fit, test = perm[:n_fit], perm[n_fit:]
    valid, train = fit[:n_valid], fit[n_valid:]
    train_edges = g.edges[np.sort(train)]
    return EdgeSplit(
        graph=g,
        train_edges=train_edges,
        valid_edges=g.edges[np.sort(valid)],
        test_edges=g.edges[np.sort(test)],
        train_graph=g.subgraph(train_edges),
        ratio=ratio,
        seed=seed,
    )


def write_manifest(split: EdgeSplit, path: str | os.PathLike) -> None:
    g = split.graph
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# directed={int(g.directed)} ratio={split.ratio!r} seed={split.seed}\n")
        # first-appearance order of labels must survive a reload
        for i, lab in enumerate(g.labels):
            fh.write(f"# node {lab}\n")
        tags = np.empty(g.num_edges, dtype=object)
        lookup = {tuple(e): i for i, e in enumerate(g.edges.tolist())}
        for tag, edges in ((TRAIN, split.train_edges), (VALID, split.valid_edges), (TEST, split.test_edges)):
            for e in edges.tolist():
                tags[lookup[tuple(e)]] = tag
        for (u, v), tag in zip(g.edges.tolist(), tags):
            fh.write(f"{g.labels[u]} {g.labels[v]} {tag}\n")


def read_manifest(path: str | os.PathLike) -> EdgeSplit:
    labels: list[str] = []
    rows: list[tuple[str, str, str]] = []
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("# node "):
                labels.append(line[len("# node "):])
            elif line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split())
            elif line.strip():
                tokens = line.split()
                if len(tokens) != 3 or tokens[2] not in (TRAIN, VALID, TEST):
                    raise GraphParseError(f"{path}: line {lineno}: expected 'u v train|valid|test'")
                rows.append((tokens[0], tokens[1], tokens[2]))
    try:
        directed = bool(int(meta["directed"]))
        ratio, seed = float(meta["ratio"]), int(meta["seed"])
    except KeyError as exc:
        raise GraphParseError(f"{path}: missing header field {exc}") from None
    index = {lab: i for i, lab in enumerate(labels)}
    edges = np.array([(index[a], index[b]) for a, b, _ in rows], dtype=np.int64).reshape(-1, 2)
    tags = np.array([t for _, _, t in rows])
    g = Graph.from_edges(len(labels), edges, directed, labels)
    train_edges = edges[tags == TRAIN]
    return EdgeSplit(
        graph=g,
        train_edges=train_edges,
        valid_edges=edges[tags == VALID],
        test_edges=edges[tags == TEST],
        train_graph=g.subgraph(train_edges),
        ratio=ratio,
        seed=seed,
    )


def sample_negative(g: Graph, s: int, rng: np.random.Generator) -> int:
    """Uniform node ``t != s`` with ``(s, t)`` not an edge, by rejection."""
    adj = g.out_adj[s]
    if g.num_nodes - 1 - len(adj) <= 0:
        raise NoCandidateError(f"node {s} is adjacent to every other node")
    while True:
        t = int(rng.integers(g.num_nodes))
        if t != s and not g.has_edge(s, t):
            return t


def sample_negatives(g: Graph, sources: np.ndarray, rng: np.random.Generator, edge_keys: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`sample_negative` over a batch of sources."""
    sources = np.asarray(sources, dtype=np.int64)
    n = g.num_nodes
    if edge_keys is None:
        edge_keys = g.edge_keys()
    degree = np.array([len(g.out_adj[s]) for s in sources], dtype=np.int64)
    full = np.flatnonzero(n - 1 - degree <= 0)
    if len(full):
        raise NoCandidateError(f"node {sources[full[0]]} is adjacent to every other node")
    out = np.empty_like(sources)
    todo = np.arange(len(sources))
    while len(todo):
        cand = rng.integers(n, size=len(todo))
        src = sources[todo]
        keys = src * n + cand
        pos = np.searchsorted(edge_keys, keys)
        pos = np.minimum(pos, max(len(edge_keys) - 1, 0))
        hit = (edge_keys[pos] == keys) if len(edge_keys) else np.zeros(len(keys), bool)
        ok = (cand != src) & ~hit
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
    return out


def sample_nonedges(g: Graph, count: int, exclude: Iterable | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """``count`` distinct node pairs that are neither edges of ``g`` nor in ``exclude``.

    For an undirected graph a pair and its reverse are the same pair, and an
    excluded pair is excluded in both orientations.
    """
    rng = np.random.default_rng() if rng is None else rng
    n = g.num_nodes
    forbidden = set(_pair_keys(g.edges, n, g.directed).tolist())
    if exclude is not None:
        ex = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
        if ex.size:
            ex = ex.reshape(-1, 2)
            ex = ex[ex[:, 0] != ex[:, 1]]
            forbidden.update(_pair_keys(ex, n, g.directed).tolist())
    total = n * (n - 1) if g.directed else n * (n - 1) // 2
    available = total - len(forbidden)
    if count > available:
        raise NoCandidateError(f"requested {count} non-edges but only {available} exist")
    if count <= 0:
        return np.empty((0, 2), dtype=np.int64)

    if count > available // 2:
        # dense regime: enumerate the complement, then draw without replacement
        u, v = np.nonzero(~np.eye(n, dtype=bool))
        if not g.directed:
            keep = u < v
            u, v = u[keep], v[keep]
        keys = u * n + v
        mask = ~np.isin(keys, np.fromiter(forbidden, dtype=np.int64, count=len(forbidden)))
        pool = np.stack([u[mask], v[mask]], axis=1)
        return pool[np.sort(rng.choice(len(pool), size=count, replace=False))]

    picked: list[tuple[int, int]] = []
    while len(picked) < count:
        need = count - len(picked)
        cand = rng.integers(n, size=(2 * need + 8, 2))
        for u, v in cand.tolist():
            if u == v:
                continue
            key = u * n + v if g.directed else min(u, v) * n + max(u, v)
            if key in forbidden:
                continue
            forbidden.add(key)
            picked.append((u, v))
            if len(picked) == count:
                break
    return np.array(picked, dtype=np.int64)
