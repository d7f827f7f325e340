"""Link-prediction AUC, spectral clustering and information-theoretic scores."""
from __future__ import annotations

import hashlib
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln
from sklearn.cluster import KMeans

from .graph import EdgeSplit, Graph, sample_nonedges
from .model import pair_scores, static_embeddings
from .neighborhood import NeighborhoodTable


def auc(pos_scores, neg_scores) -> float:
    """Probability that a positive outscores a negative, ties counting one half.

    Exact: the numerator is accumulated as an integer count of half-wins.
    """
    pos = np.asarray(pos_scores, dtype=float).ravel()
    neg = np.asarray(neg_scores, dtype=float).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        raise ValueError("scores must be finite")
    _, inv = np.unique(np.concatenate([pos, neg]), return_inverse=True)
    neg_count = np.bincount(inv[len(pos):], minlength=inv.max() + 1)
    neg_below = np.cumsum(neg_count) - neg_count
    k = inv[: len(pos)]
    half_wins = int(np.sum(2 * neg_below[k] + neg_count[k]))
    return half_wins / (2 * len(pos) * len(neg))


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int


def spectral_clustering(X, k: int, seed: int = 0, n_init: int = 20) -> ClusterAssignment:
    """Normalized spectral clustering on a non-negative cosine affinity."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not np.isfinite(X).all():
        raise ValueError("embedding rows must be finite")
    if k == 1:
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    W = np.clip(Xn @ Xn.T, 0.0, None)
    dinv = 1.0 / np.sqrt(W.sum(axis=1) + 1e-12)
    lap = np.eye(n) - dinv[:, None] * W * dinv[None, :]
    _, vecs = np.linalg.eigh(lap)
    U = vecs[:, :k]
    U = U / (np.linalg.norm(U, axis=1, keepdims=True) + 1e-12)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed)
    return ClusterAssignment(km.fit_predict(U).astype(np.int64), k)


def contingency(y, y_hat) -> np.ndarray:
    y, y_hat = np.asarray(y).ravel(), np.asarray(y_hat).ravel()
    if len(y) != len(y_hat):
        raise ValueError(f"label vectors differ in length: {len(y)} vs {len(y_hat)}")
    if len(y) == 0:
        raise ValueError("label vectors must be non-empty")
    _, a = np.unique(y, return_inverse=True)
    _, b = np.unique(y_hat, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def entropy(labels) -> float:
    _, counts = np.unique(np.asarray(labels).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _mi_from_table(table: np.ndarray) -> float:
    N = table.sum()
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    nij = table[nz]
    outer = (a * b)[nz]
    return float(max(np.sum(nij / N * (np.log(N * nij) - np.log(outer))), 0.0))


def mutual_information(y, y_hat) -> float:
    """Mutual information in nats."""
    return _mi_from_table(contingency(y, y_hat))


def nmi(y, y_hat) -> float:
    """Mutual information over the geometric mean of the two entropies."""
    table = contingency(y, y_hat)
    h1, h2 = entropy(y), entropy(y_hat)
    if h1 == 0.0 and h2 == 0.0:
        return 1.0
    if h1 == 0.0 or h2 == 0.0:
        return 0.0
    return min(_mi_from_table(table) / np.sqrt(h1 * h2), 1.0)


def expected_mutual_information(table: np.ndarray) -> float:
    """Expected MI of two partitions with the table's marginals under random permutation."""
    N = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    lg_N = gammaln(N + 1)
    total = 0.0
    for ai in a.tolist():
        for bj in b.tolist():
            lo, hi = max(1, ai + bj - N), min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=float)
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(N - ai + 1) + gammaln(N - bj + 1)
                     - lg_N - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(N - ai - bj + nij + 1))
            term = nij / N * (np.log(N * nij) - np.log(ai * bj))
            total += float(np.sum(term * np.exp(log_p)))
    return total


def _same_partition(table: np.ndarray) -> bool:
    return table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]


def ami(y, y_hat) -> float:
    """Mutual information adjusted for chance, normalized by the larger entropy."""
    table = contingency(y, y_hat)
    mi = _mi_from_table(table)
    emi = expected_mutual_information(table)
    denom = max(entropy(y), entropy(y_hat)) - emi
    if abs(denom) < 1e-15:
        return 1.0 if _same_partition(table) else 0.0
    return (mi - emi) / denom


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so repeated runs write identical reports
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


@dataclass
class EvalReport:
    metric: str
    value: float
    ratio: float
    seed: int
    config_digest: str = ""
    timestamp: str = field(default_factory=_timestamp)

    def to_line(self) -> str:
        return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_line(cls, line: str) -> "EvalReport":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(kv["metric"], float(kv["value"]), float(kv["ratio"]), int(kv["seed"]),
                   kv.get("config_digest", ""), kv.get("timestamp", ""))


def config_digest(items: dict) -> str:
    text = "\n".join(f"{k} = {items[k]}" for k in sorted(items))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def link_prediction_scores(params, split: EdgeSplit, L: int, seed: int):
    """Scores of the test edges and of as many sampled non-edges of the full graph."""
    test = split.test_edges
    if len(test) == 0:
        raise ValueError("split has no test edges")
    rng = np.random.default_rng(seed)
    negatives = sample_nonedges(split.graph, len(test), rng=rng)
    table = NeighborhoodTable(split.train_graph, L)
    return pair_scores(params, table, test, rng), pair_scores(params, table, negatives, rng)


def eval_link_prediction(params, split: EdgeSplit, L: int, seed: int = 0, digest: str = "") -> EvalReport:
    pos, neg = link_prediction_scores(params, split, L, seed)
    return EvalReport("auc", auc(pos, neg), split.ratio, seed, digest)


def eval_clustering(params, split: EdgeSplit, communities: np.ndarray, L: int, seed: int = 0,
                    digest: str = "") -> tuple[EvalReport, EvalReport]:
    """Cluster per-node embeddings built from the training graph; score NMI and AMI."""
    communities = np.asarray(communities)
    g: Graph = split.train_graph
    if len(communities) != g.num_nodes:
        raise ValueError(f"labels cover {len(communities)} nodes, graph has {g.num_nodes}")
    X = static_embeddings(params, g, L, np.random.default_rng(seed))
    k = len(np.unique(communities))
    pred = spectral_clustering(X, k, seed=seed).labels
    return (EvalReport("nmi", nmi(communities, pred), split.ratio, seed, digest),
            EvalReport("ami", ami(communities, pred), split.ratio, seed, digest))
