"""Margin-ranking training with hand-written backprop and lazy sparse Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .graph import EdgeSplit, Graph, sample_negatives, sample_nonedges
from .model import (
    ForwardState,
    GapParams,
    MlpParams,
    MlpState,
    init_mlp_params,
    init_params,
    pair_scores,
    run_forward,
)
from .neighborhood import NeighborhoodTable

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    L: int = 100
    d: int = 200
    dropout_keep: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"
    model: str = "gap"
    exclude_partner: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, max_epochs non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.model not in ("gap", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")


@dataclass
class GradientSet:
    rows: np.ndarray  # touched embedding rows, sorted, pad excluded
    row_grads: np.ndarray  # (len(rows), d)
    dense: dict[str, np.ndarray]

    def check_finite(self) -> None:
        if not np.isfinite(self.row_grads).all():
            raise FloatingPointError("non-finite gradient in 'embeddings'")
        for name, g in self.dense.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in '{name}'")

    def to_dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros((num_rows, self.row_grads.shape[1]))
        out[self.rows] = self.row_grads
        return out


def hinge_loss(pos, neg):
    """``max(0, 1 - pos + neg)``, elementwise for arrays."""
    out = np.maximum(0.0, 1.0 - np.asarray(pos, dtype=float) + np.asarray(neg, dtype=float))
    return float(out) if out.ndim == 0 else out


def _check(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite intermediate '{name}'")


def _gap_grads(params: GapParams, st: ForwardState, g: np.ndarray):
    """Gradients of ``sum_b g[b] * (r_s[b] . r_t[b])``; returns (dS, dT, dP)."""
    dr_s = g[:, None] * st.r_t
    dr_t = g[:, None] * st.r_s
    dS = st.attn_s[:, :, None] * dr_s[:, None, :]
    dT = st.attn_t[:, :, None] * dr_t[:, None, :]
    da_s = np.einsum("bid,bd->bi", st.S_emb, dr_s)
    da_t = np.einsum("bjd,bd->bj", st.T_emb, dr_t)
    # softmax Jacobian; pad slots have zero attention and drop out here
    draw_s = st.attn_s * (da_s - np.sum(st.attn_s * da_s, axis=1, keepdims=True))
    draw_t = st.attn_t * (da_t - np.sum(st.attn_t * da_t, axis=1, keepdims=True))
    _check("d_raw_s", draw_s)
    _check("d_raw_t", draw_t)

    # max-pooling routes each pooled gradient to its (lowest-index) argmax cell
    dA_rows = np.zeros_like(st.A)
    np.put_along_axis(dA_rows, st.arg_s[:, :, None], np.where(st.mask_s, draw_s, 0.0)[:, :, None], axis=2)
    dA_cols = np.zeros_like(st.A)
    np.put_along_axis(dA_cols, st.arg_t[:, None, :], np.where(st.mask_t, draw_t, 0.0)[:, None, :], axis=1)
    dZ = (dA_rows + dA_cols) * (1.0 - st.A ** 2)
    _check("dA", dZ)

    G = dZ @ st.T_emb  # (B, L, d)
    dS += G @ params.attn.T
    dT += dZ.transpose(0, 2, 1) @ st.SP
    d = params.dim
    dP = st.S_emb.reshape(-1, d).T @ G.reshape(-1, d)
    return dS, dT, {"attn": dP}


def _mlp_grads(params: MlpParams, st: MlpState, g: np.ndarray):
    dh_s = g[:, None] * st.r_t * (1.0 - st.r_s ** 2)
    dh_t = g[:, None] * st.r_s * (1.0 - st.r_t ** 2)
    dW = dh_s.T @ st.mean_s + dh_t.T @ st.mean_t
    db = dh_s.sum(axis=0) + dh_t.sum(axis=0)
    dm_s, dm_t = dh_s @ params.weight, dh_t @ params.weight
    w_s = st.mask_s / st.mask_s.sum(axis=1, keepdims=True)
    w_t = st.mask_t / st.mask_t.sum(axis=1, keepdims=True)
    dS = w_s[:, :, None] * dm_s[:, None, :]
    dT = w_t[:, :, None] * dm_t[:, None, :]
    return dS, dT, {"weight": dW, "bias": db}


def state_gradients(params, st, upstream: np.ndarray):
    """Embedding-slot and dense gradients of ``sum_b upstream[b] * score_b``."""
    if isinstance(st, MlpState):
        dS, dT, dense = _mlp_grads(params, st, upstream)
    else:
        dS, dT, dense = _gap_grads(params, st, upstream)
    # replay inverted dropout
    if st.drop_s is not None:
        dS = dS * st.drop_s
        dT = dT * st.drop_t
    return dS, dT, dense


def backward(params, state_pos, state_neg, loss) -> GradientSet:
    """Subgradient of the summed hinge loss of a batch of (positive, negative) pairs.

    ``loss`` is the per-pair hinge value; pairs with zero loss contribute
    nothing.
    """
    loss = np.atleast_1d(np.asarray(loss, dtype=float))
    active = (loss > 0).astype(float)
    parts_ids, parts_grad = [], []
    dense: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.dense().items()}
    for st, sign in ((state_pos, -1.0), (state_neg, 1.0)):
        dS, dT, dd = state_gradients(params, st, sign * active)
        for k, v in dd.items():
            dense[k] += v
        parts_ids += [st.ids_s.ravel(), st.ids_t.ravel()]
        parts_grad += [dS.reshape(-1, params.dim), dT.reshape(-1, params.dim)]
    ids = np.concatenate(parts_ids)
    grads = np.concatenate(parts_grad)
    keep = ids != params.pad
    rows, inv = np.unique(ids[keep], return_inverse=True)
    row_grads = np.zeros((len(rows), params.dim))
    np.add.at(row_grads, inv, grads[keep])
    out = GradientSet(rows, row_grads, dense)
    out.check_finite()
    return out


class Adam:
    """Adam with lazy row updates for the embedding table.

    Only rows present in a gradient have their moments decayed and their
    values updated; bias correction uses the global step count.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m_emb = np.zeros_like(params.embeddings)
        self.v_emb = np.zeros_like(params.embeddings)
        self.m = {k: np.zeros_like(v) for k, v in params.dense().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.dense().items()}

    def _delta(self, m, v, g):
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        with np.errstate(invalid="ignore", over="ignore"):  # caught by the finiteness check in step()
            return m, v, -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params, grads: GradientSet) -> None:
        self.t += 1
        rows = grads.rows
        m, v, delta_rows = self._delta(self.m_emb[rows], self.v_emb[rows], grads.row_grads)
        updates = {}
        for k, arr in params.dense().items():
            self.m[k], self.v[k], updates[k] = self._delta(self.m[k], self.v[k], grads.dense[k])
        if not (np.isfinite(delta_rows).all() and all(np.isfinite(u).all() for u in updates.values())):
            raise FloatingPointError(f"non-finite optimizer update at step {self.t}")
        self.m_emb[rows], self.v_emb[rows] = m, v
        params.embeddings[rows] += delta_rows
        for k, arr in params.dense().items():
            arr += updates[k]
        params.embeddings[params.pad] = 0.0


def adam_step(params, grads: GradientSet, opt: Adam) -> None:
    opt.step(params, grads)


class SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads: GradientSet) -> None:
        params.embeddings[grads.rows] -= self.lr * grads.row_grads
        for k, arr in params.dense().items():
            arr -= self.lr * grads.dense[k]
        params.embeddings[params.pad] = 0.0


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    valid_auc: float
    elapsed_ms: float = field(default=0.0, compare=False)


def batch_loss(params, ids_s, ids_t, ids_neg, dropout_keep=1.0, rng=None, training=False):
    """Forward the positive ``(s, t)`` and negative ``(s, t-)`` pairs; per-pair hinge."""
    st_pos = run_forward(params, ids_s, ids_t, dropout_keep, rng, training)
    st_neg = run_forward(params, ids_s, ids_neg, dropout_keep, rng, training)
    pos = np.einsum("bd,bd->b", st_pos.r_s, st_pos.r_t)
    neg = np.einsum("bd,bd->b", st_neg.r_s, st_neg.r_t)
    return hinge_loss(pos, neg), st_pos, st_neg


def make_params(cfg: TrainConfig, n: int):
    return init_mlp_params(n, cfg.d, cfg.seed) if cfg.model == "mlp" else init_params(n, cfg.d, cfg.seed)


def train(split: EdgeSplit, cfg: TrainConfig, log: TextIO | None = None, params=None):
    """Train on the split's training edges; early-stop on validation AUC.

    Returns ``(params, history)`` where ``params`` are those of the best
    validation epoch (or of the last epoch when there is no validation set).
    """
    g: Graph = split.train_graph
    n = g.num_nodes
    params = make_params(cfg, n) if params is None else params
    history: list[EpochRecord] = []
    if cfg.max_epochs == 0:
        return params, history

    rng = np.random.default_rng(cfg.seed)
    table = NeighborhoodTable(g, cfg.L)
    pairs = g.oriented_pairs()
    if len(pairs) == 0:
        raise ValueError("no training edges")
    keys = g.edge_keys()
    opt = Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else SGD(params, cfg.learning_rate)

    valid = split.valid_edges
    valid_neg = None
    if len(valid):
        valid_neg = sample_nonedges(split.graph, len(valid), rng=np.random.default_rng(cfg.seed + 1))

    best, best_auc, stale = params.copy(), -np.inf, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(pairs))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = pairs[order[lo:lo + cfg.batch_size]]
            s, t = batch[:, 0], batch[:, 1]
            t_neg = sample_negatives(g, s, rng, keys)
            w = table.width(s, t, t_neg)
            if cfg.exclude_partner:
                # hide the edge being scored, as it is hidden for test pairs
                ids_s, ids_t = table.batch(s, rng, w, exclude=t), table.batch(t, rng, w, exclude=s)
            else:
                ids_s, ids_t = table.batch(s, rng, w), table.batch(t, rng, w)
            ids_neg = table.batch(t_neg, rng, w)
            loss, st_pos, st_neg = batch_loss(params, ids_s, ids_t, ids_neg, cfg.dropout_keep, rng, True)
            if not np.isfinite(loss).all():
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", epoch)
            total += float(loss.sum())
            try:
                opt.step(params, backward(params, st_pos, st_neg, loss))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch) from exc
        mean_loss = total / len(pairs)

        valid_auc = float("nan")
        if valid_neg is not None:
            from .metrics import auc

            eval_rng = np.random.default_rng(cfg.seed + 2)
            valid_auc = auc(pair_scores(params, table, valid, eval_rng),
                            pair_scores(params, table, valid_neg, eval_rng))
        rec = EpochRecord(epoch, mean_loss, valid_auc, (time.perf_counter() - t0) * 1000.0)
        history.append(rec)
        line = f"{epoch}\t{mean_loss:.6f}\t{valid_auc:.6f}\t{rec.elapsed_ms:.0f}"
        logger.info(line)
        if log is not None:
            log.write(line + "\n")
            log.flush()

        if valid_neg is None:
            best = params
            continue
        if valid_auc > best_auc:
            best, best_auc, stale = params.copy(), valid_auc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    block_errors: dict[str, float]
    loss: float
    passed: bool
    tolerance: float


def _numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float, index=None) -> np.ndarray:
    out = np.zeros_like(arr)
    it = np.ndindex(arr.shape) if index is None else index
    for ix in it:
        old = arr[ix]
        arr[ix] = old + eps
        fp = f()
        arr[ix] = old - eps
        fm = f()
        arr[ix] = old
        out[ix] = (fp - fm) / (2 * eps)
    return out


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(params, ids_s, ids_t, ids_neg, eps: float = 1e-5, tolerance: float = 1e-4,
                    backward_fn=backward) -> GradCheckReport:
    """Compare ``backward_fn`` with central differences on every parameter entry, pad row included."""

    def f() -> float:
        return float(batch_loss(params, ids_s, ids_t, ids_neg)[0].sum())

    loss, st_pos, st_neg = batch_loss(params, ids_s, ids_t, ids_neg)
    grads = backward_fn(params, st_pos, st_neg, loss)
    analytic = {"embeddings": grads.to_dense(params.embeddings.shape[0]), **grads.dense}
    errors = {"embeddings": _rel_error(analytic["embeddings"], _numeric_grad(f, params.embeddings, eps))}
    for name, arr in params.dense().items():
        errors[name] = _rel_error(analytic[name], _numeric_grad(f, arr, eps))
    worst = max(errors.values())
    return GradCheckReport(worst, errors, float(loss.sum()), worst < tolerance, tolerance)


def _is_smooth(params, ids_s, ids_t, ids_neg, margin: float) -> bool:
    loss, st_pos, st_neg = batch_loss(params, ids_s, ids_t, ids_neg)
    if np.any(np.abs(loss) < margin) or not np.any(loss > 0):
        return False
    for st in (st_pos, st_neg):
        if isinstance(st, MlpState):
            continue
        valid = st.mask_s[:, :, None] & st.mask_t[:, None, :]
        Am = np.where(valid, st.A, -np.inf)
        for axis, mask in ((2, st.mask_s), (1, st.mask_t)):
            top2 = -np.sort(-Am, axis=axis).take([0, 1], axis=axis) if Am.shape[axis] > 1 else None
            if top2 is None:
                continue
            with np.errstate(invalid="ignore"):
                gap = np.abs(top2.take(0, axis=axis) - top2.take(1, axis=axis))
            gap = np.where(np.isfinite(gap), gap, np.inf)
            if np.any(gap[mask] < margin):
                return False
    return True


def random_instance(seed: int, n: int = 8, d: int = 5, L: int = 4, batch: int = 3, model: str = "gap",
                    margin: float = 1e-3, max_tries: int = 200):
    """A tiny random graph, parameters and batch at a smooth point of the loss."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.4]
        if len(edges) < batch:
            continue
        g = Graph.from_edges(n, edges, directed=False)
        cfg = TrainConfig(L=L, d=d, seed=int(rng.integers(1 << 31)), model=model)
        params = make_params(cfg, n)
        # scale up so scores are not all near zero and the hinge is non-trivial
        params.embeddings *= rng.uniform(1.0, 8.0)
        params.embeddings[n] = 0.0
        if model == "mlp":
            params.bias[:] = rng.normal(0, 0.3, size=d)
        table = NeighborhoodTable(g, L)
        pairs = g.oriented_pairs()
        pick = pairs[rng.choice(len(pairs), size=batch, replace=False)]
        s, t = pick[:, 0], pick[:, 1]
        try:
            t_neg = sample_negatives(g, s, rng)
        except ValueError:
            continue
        ids = table.batch(s, rng), table.batch(t, rng), table.batch(t_neg, rng)
        if _is_smooth(params, *ids, margin=margin):
            return params, ids
    raise RuntimeError("could not find a smooth instance")


def grad_check(seed: int = 0, model: str = "gap", eps: float = 1e-5, tolerance: float = 1e-4, **kwargs) -> GradCheckReport:
    params, ids = random_instance(seed, model=model, **kwargs)
    return check_gradients(params, *ids, eps=eps, tolerance=tolerance)
