"""Fixed-length, padded first-order neighborhood sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph


@dataclass(frozen=True)
class NeighborhoodSeq:
    """``node_ids`` holds ``L`` slots; slots past the valid prefix carry ``pad``."""

    node_ids: np.ndarray
    mask: np.ndarray
    owner: int | None
    pad: int

    @property
    def length(self) -> int:
        return len(self.node_ids)

    @property
    def valid_ids(self) -> np.ndarray:
        return self.node_ids[self.mask]


def first_order_neighbors(g: Graph, u: int) -> np.ndarray:
    """Union of out- and in-neighbors of ``u``; ``[u]`` when that is empty."""
    if not 0 <= u < g.num_nodes:
        raise ValueError(f"node {u} out of range for graph with {g.num_nodes} nodes")
    if g.directed:
        nb = np.union1d(g.out_adj[u], g.in_adj[u])
    else:
        nb = g.out_adj[u]
    if len(nb) == 0:
        return np.array([u], dtype=np.int64)
    return np.asarray(nb, dtype=np.int64)


def _fill(neighbors: np.ndarray, L: int, rng: np.random.Generator | None, pad: int) -> np.ndarray:
    ids = np.full(L, pad, dtype=np.int64)
    if len(neighbors) <= L:
        ids[: len(neighbors)] = neighbors
    else:
        if rng is None:
            raise ValueError("an rng is required to subsample an oversized neighborhood")
        ids[:] = rng.choice(neighbors, size=L, replace=False)
    return ids


def materialize(neighbors, L: int, rng: np.random.Generator | None, pad: int, owner: int | None = None) -> NeighborhoodSeq:
    """Pad ``neighbors`` to length ``L``, or take a uniform ``L``-subset of them.

    The subset is redrawn on every call, so repeated calls with one generator
    see different parts of a large neighborhood.
    """
    if L < 1:
        raise ValueError("sequence length must be at least 1")
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if len(neighbors) == 0:
        raise ValueError("neighbors must be non-empty")
    ids = _fill(neighbors, L, rng, pad)
    return NeighborhoodSeq(ids, ids != pad, owner, pad)


def neighborhood_sequence(g: Graph, u: int, L: int, rng: np.random.Generator | None) -> NeighborhoodSeq:
    return materialize(first_order_neighbors(g, u), L, rng, pad=g.num_nodes, owner=u)


class NeighborhoodTable:
    """Cached neighbor lists of a graph, materialized in batches.

    ``batch(nodes, rng)`` returns an ``(len(nodes), L)`` index array whose pad
    slots hold ``g.num_nodes``. Passing a smaller ``width`` (see
    :meth:`width`) drops all-pad trailing columns; masked pad slots never
    influence the model, so the result is the same computation on a narrower
    array.
    """

    def __init__(self, g: Graph, L: int):
        if L < 1:
            raise ValueError("sequence length must be at least 1")
        self.L = L
        self.pad = g.num_nodes
        self.neighbors = [first_order_neighbors(g, u) for u in range(g.num_nodes)]
        self.sizes = np.array([min(len(nb), L) for nb in self.neighbors], dtype=np.int64)

    def width(self, *node_arrays) -> int:
        """Narrowest width that holds every listed node's sequence."""
        return int(max(self.sizes[np.asarray(a, dtype=np.int64)].max() for a in node_arrays))

    def batch(self, nodes, rng: np.random.Generator | None, width: int | None = None,
              exclude=None) -> np.ndarray:
        """Materialize one row per node; ``exclude[i]`` is left out of row ``i``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        width = self.L if width is None else width
        if len(nodes) and width < self.sizes[nodes].max():
            raise ValueError("width too small for the requested nodes")
        out = np.full((len(nodes), width), self.pad, dtype=np.int64)
        for row, u in enumerate(nodes.tolist()):
            nb = self.neighbors[u]
            if exclude is not None:
                nb = nb[nb != exclude[row]]
                if len(nb) == 0:
                    nb = np.array([u], dtype=np.int64)
            out[row] = _fill(nb, width, rng, self.pad)
        return out
