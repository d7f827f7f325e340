"""Forward pass of the neighborhood attentive-pooling model and its MLP ablation.

All tensors carry a leading batch axis. Neighbor embeddings are stored row-wise:
``S_emb[b, i]`` is the embedding of the ``i``-th neighbor of the source of
pair ``b``. Pad slots hold index ``n`` whose embedding row is pinned to zero;
pad cells are additionally masked out of pooling and softmax.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .graph import Graph
from .neighborhood import NeighborhoodSeq, NeighborhoodTable, first_order_neighbors, materialize

CHECKPOINT_MAGIC = {"gap": "gap-v1", "mlp": "gapmlp-v1"}


@dataclass
class GapParams:
    embeddings: np.ndarray  # (n + 1, d); row n is the pad row
    attn: np.ndarray  # (d, d)

    kind = "gap"

    @property
    def num_nodes(self) -> int:
        return self.embeddings.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def pad(self) -> int:
        return self.num_nodes

    def dense(self) -> dict[str, np.ndarray]:
        return {"attn": self.attn}

    def copy(self) -> "GapParams":
        return GapParams(self.embeddings.copy(), self.attn.copy())


@dataclass
class MlpParams:
    """Embeddings plus one tanh layer applied to the mean neighbor embedding."""

    embeddings: np.ndarray
    weight: np.ndarray  # (d, d)
    bias: np.ndarray  # (d,)

    kind = "mlp"

    num_nodes = GapParams.num_nodes
    dim = GapParams.dim
    pad = GapParams.pad

    def dense(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "MlpParams":
        return MlpParams(self.embeddings.copy(), self.weight.copy(), self.bias.copy())


def _glorot_embeddings(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    a = np.sqrt(6.0 / (n + d))
    emb = rng.uniform(-a, a, size=(n + 1, d))
    emb[n] = 0.0
    return emb


def init_params(n: int, d: int, seed: int) -> GapParams:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    emb = _glorot_embeddings(rng, n, d)
    b = np.sqrt(6.0 / (2 * d))
    return GapParams(emb, rng.uniform(-b, b, size=(d, d)))


def init_mlp_params(n: int, d: int, seed: int) -> MlpParams:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    emb = _glorot_embeddings(rng, n, d)
    b = np.sqrt(6.0 / (2 * d))
    return MlpParams(emb, rng.uniform(-b, b, size=(d, d)), np.zeros(d))


@dataclass
class ForwardState:
    """Intermediates of a batch of forward passes, kept for backprop."""

    ids_s: np.ndarray  # (B, L)
    ids_t: np.ndarray
    mask_s: np.ndarray  # (B, L) bool
    mask_t: np.ndarray
    drop_s: np.ndarray | None  # (B, L, d) inverted-dropout multipliers
    drop_t: np.ndarray | None
    S_emb: np.ndarray  # (B, L, d)
    T_emb: np.ndarray
    SP: np.ndarray  # S_emb @ P, reused in backprop
    A: np.ndarray  # (B, L, L); pad cells hold tanh of zero-row products
    raw_s: np.ndarray  # (B, L); -inf on pad slots
    raw_t: np.ndarray
    arg_s: np.ndarray  # column index of each row maximum
    arg_t: np.ndarray  # row index of each column maximum
    attn_s: np.ndarray
    attn_t: np.ndarray
    r_s: np.ndarray  # (B, d)
    r_t: np.ndarray


@dataclass
class MlpState:
    ids_s: np.ndarray
    ids_t: np.ndarray
    mask_s: np.ndarray
    mask_t: np.ndarray
    drop_s: np.ndarray | None
    drop_t: np.ndarray | None
    S_emb: np.ndarray
    T_emb: np.ndarray
    mean_s: np.ndarray  # (B, d)
    mean_t: np.ndarray
    r_s: np.ndarray
    r_t: np.ndarray


def _as_ids(seq) -> np.ndarray:
    if isinstance(seq, NeighborhoodSeq):
        seq = seq.node_ids
    ids = np.asarray(seq, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError("neighborhood ids must be 1-D or 2-D")
    return ids


def _gather(params, ids_s, ids_t, dropout_keep, rng, training):
    ids_s, ids_t = _as_ids(ids_s), _as_ids(ids_t)
    if ids_s.shape != ids_t.shape:
        raise ValueError(f"sequence shapes differ: {ids_s.shape} vs {ids_t.shape}")
    pad = params.pad
    if ids_s.min() < 0 or max(ids_s.max(), ids_t.max()) > pad or ids_t.min() < 0:
        raise ValueError("neighbor index out of range")
    mask_s, mask_t = ids_s != pad, ids_t != pad
    if not (mask_s.any(axis=1).all() and mask_t.any(axis=1).all()):
        raise ValueError("every sequence needs at least one valid slot")
    S, T = params.embeddings[ids_s], params.embeddings[ids_t]
    if not (np.isfinite(S).all() and np.isfinite(T).all()):
        raise FloatingPointError("non-finite embedding row")
    for name, arr in params.dense().items():
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite parameter '{name}'")
    drop_s = drop_t = None
    if training and dropout_keep < 1.0:
        if not 0.0 < dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        drop_s = (rng.random(S.shape) < dropout_keep) / dropout_keep
        drop_t = (rng.random(T.shape) < dropout_keep) / dropout_keep
        S, T = S * drop_s, T * drop_t
    return ids_s, ids_t, mask_s, mask_t, drop_s, drop_t, S, T


def _masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    top = np.max(np.where(mask, x, -np.inf), axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: GapParams, seq_s, seq_t, dropout_keep: float = 1.0,
            rng: np.random.Generator | None = None, training: bool = False) -> ForwardState:
    """Embed both neighborhoods, mutually attend, pool, and build the pair's representations."""
    ids_s, ids_t, mask_s, mask_t, drop_s, drop_t, S, T = _gather(
        params, seq_s, seq_t, dropout_keep, rng, training)
    SP = S @ params.attn
    A = np.tanh(SP @ T.transpose(0, 2, 1))
    valid = mask_s[:, :, None] & mask_t[:, None, :]
    Am = np.where(valid, A, -np.inf)
    arg_s = Am.argmax(axis=2)
    arg_t = Am.argmax(axis=1)
    raw_s = np.where(mask_s, np.take_along_axis(Am, arg_s[:, :, None], axis=2)[:, :, 0], -np.inf)
    raw_t = np.where(mask_t, np.take_along_axis(Am, arg_t[:, None, :], axis=1)[:, 0, :], -np.inf)
    attn_s = _masked_softmax(raw_s, mask_s)
    attn_t = _masked_softmax(raw_t, mask_t)
    r_s = np.einsum("bi,bid->bd", attn_s, S)
    r_t = np.einsum("bj,bjd->bd", attn_t, T)
    return ForwardState(ids_s, ids_t, mask_s, mask_t, drop_s, drop_t, S, T, SP, A,
                        raw_s, raw_t, arg_s, arg_t, attn_s, attn_t, r_s, r_t)


def _masked_mean(X: np.ndarray, mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1, keepdims=True)
    return np.einsum("bi,bid->bd", mask.astype(X.dtype), X) / counts


def mlp_forward(params: MlpParams, seq_s, seq_t, dropout_keep: float = 1.0,
                rng: np.random.Generator | None = None, training: bool = False) -> MlpState:
    """Ablation: replace attention with ``tanh(W @ mean(neighbors) + b)`` on each side."""
    ids_s, ids_t, mask_s, mask_t, drop_s, drop_t, S, T = _gather(
        params, seq_s, seq_t, dropout_keep, rng, training)
    mean_s, mean_t = _masked_mean(S, mask_s), _masked_mean(T, mask_t)
    r_s = np.tanh(mean_s @ params.weight.T + params.bias)
    r_t = np.tanh(mean_t @ params.weight.T + params.bias)
    return MlpState(ids_s, ids_t, mask_s, mask_t, drop_s, drop_t, S, T, mean_s, mean_t, r_s, r_t)


def run_forward(params, seq_s, seq_t, dropout_keep=1.0, rng=None, training=False):
    fn = mlp_forward if isinstance(params, MlpParams) else forward
    return fn(params, seq_s, seq_t, dropout_keep=dropout_keep, rng=rng, training=training)


def score(r_s, r_t) -> float:
    r_s, r_t = np.asarray(r_s, dtype=float), np.asarray(r_t, dtype=float)
    if r_s.shape != r_t.shape:
        raise ValueError(f"dimension mismatch: {r_s.shape} vs {r_t.shape}")
    return float(np.dot(r_s, r_t))


def pair_embed(params, g_train: Graph, u: int, v: int, L: int, rng: np.random.Generator | None):
    """Context-sensitive ``(r_u, r_v)`` from training-graph neighborhoods, dropout off."""
    pad = g_train.num_nodes
    seq_u = materialize(first_order_neighbors(g_train, u), L, rng, pad, owner=u)
    seq_v = materialize(first_order_neighbors(g_train, v), L, rng, pad, owner=v)
    st = run_forward(params, seq_u, seq_v)
    return st.r_s[0], st.r_t[0]


def pair_scores(params, table: NeighborhoodTable, pairs, rng: np.random.Generator | None,
                batch_size: int = 256) -> np.ndarray:
    """Dot-product scores for many pairs at once."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    out = np.empty(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        w = table.width(chunk)
        st = run_forward(params, table.batch(chunk[:, 0], rng, w), table.batch(chunk[:, 1], rng, w))
        out[lo:lo + batch_size] = np.einsum("bd,bd->b", st.r_s, st.r_t)
    return out


def static_embedding(params, g_train: Graph, u: int, L: int, rng: np.random.Generator | None) -> np.ndarray:
    """Mean of ``u``'s representations over its incident training edges."""
    if not 0 <= u < g_train.num_nodes:
        raise ValueError(f"node {u} out of range")
    as_source = g_train.out_adj[u]
    as_target = g_train.in_adj[u]
    if len(as_source) + len(as_target) == 0:
        r_u, _ = pair_embed(params, g_train, u, u, L, rng)
        return r_u
    reps = [pair_embed(params, g_train, u, v, L, rng)[0] for v in as_source.tolist()]
    reps += [pair_embed(params, g_train, w, u, L, rng)[1] for w in as_target.tolist()]
    return np.mean(reps, axis=0)


def static_embeddings(params, g_train: Graph, L: int, rng: np.random.Generator | None,
                      batch_size: int = 256) -> np.ndarray:
    """:func:`static_embedding` for every node, one forward per stored orientation."""
    n, d = g_train.num_nodes, params.dim
    table = NeighborhoodTable(g_train, L)
    pairs = g_train.oriented_pairs()
    total = np.zeros((n, d))
    count = np.zeros(n)
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        w = table.width(chunk)
        st = run_forward(params, table.batch(chunk[:, 0], rng, w), table.batch(chunk[:, 1], rng, w))
        np.add.at(total, chunk[:, 0], st.r_s)
        np.add.at(total, chunk[:, 1], st.r_t)
        np.add.at(count, chunk[:, 0], 1)
        np.add.at(count, chunk[:, 1], 1)
    lonely = np.flatnonzero(count == 0)
    if len(lonely):
        seqs = table.batch(lonely, rng, table.width(lonely))
        total[lonely] = run_forward(params, seqs, seqs).r_s
        count[lonely] = 1
    return total / count[:, None]


def _write_matrix(fh, arr: np.ndarray) -> None:
    for row in np.atleast_2d(arr).tolist():
        fh.write(" ".join(map(repr, row)))
        fh.write("\n")


def save_checkpoint(path: str | os.PathLike, params, L: int) -> None:
    """Plain-text checkpoint; floats are written with ``repr`` so reloads are bit-exact."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{CHECKPOINT_MAGIC[params.kind]} {params.num_nodes} {params.dim} {L}\n")
        _write_matrix(fh, params.embeddings)
        for arr in params.dense().values():
            _write_matrix(fh, arr)


def load_checkpoint(path: str | os.PathLike):
    """Return ``(params, L)``."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        kinds = {v: k for k, v in CHECKPOINT_MAGIC.items()}
        if len(header) != 4 or header[0] not in kinds:
            raise ValueError(f"{path}: not a checkpoint file")
        n, d, L = map(int, header[1:])
        values = np.array(fh.read().split(), dtype=np.float64)
    kind = kinds[header[0]]
    sizes = [(n + 1) * d, d * d] + ([d] if kind == "mlp" else [])
    if len(values) != sum(sizes):
        raise ValueError(f"{path}: expected {sum(sizes)} values, found {len(values)}")
    parts = np.split(values, np.cumsum(sizes)[:-1])
    emb = parts[0].reshape(n + 1, d)
    if kind == "gap":
        return GapParams(emb, parts[1].reshape(d, d)), L
    return MlpParams(emb, parts[1].reshape(d, d), parts[2].copy()), L
