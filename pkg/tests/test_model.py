import numpy as np
import pytest

from conftest import random_graph
from gap_nrl.graph import Graph
from gap_nrl.model import (
    GapParams,
    MlpParams,
    forward,
    init_mlp_params,
    init_params,
    load_checkpoint,
    mlp_forward,
    pair_embed,
    pair_scores,
    save_checkpoint,
    score,
    static_embedding,
    static_embeddings,
)
from gap_nrl.neighborhood import NeighborhoodTable
from oracles import naive_forward, naive_mlp


def random_params(n, d, seed, scale=1.0):
    r = np.random.default_rng(seed)
    emb = r.normal(size=(n + 1, d)) * scale
    emb[n] = 0.0
    return GapParams(emb, r.normal(size=(d, d)) * scale)


def test_init_shapes_and_pad_row():
    p = init_params(5, 200, seed=0)
    assert p.embeddings.shape == (6, 200) and p.attn.shape == (200, 200)
    assert not p.embeddings[5].any()
    q = init_params(5, 200, seed=0)
    assert np.array_equal(p.embeddings, q.embeddings) and np.array_equal(p.attn, q.attn)
    assert not np.array_equal(p.attn, init_params(5, 200, seed=1).attn)


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_params(0, 4, seed=0)


def test_zero_attention_matrix_gives_uniform_mean():
    p = random_params(6, 3, seed=2)
    p.attn[:] = 0.0
    st = forward(p, [0, 1, 2, 6], [3, 4, 6, 6])
    np.testing.assert_allclose(st.attn_s[0, :3], 1 / 3)
    assert st.attn_s[0, 3] == 0.0
    np.testing.assert_allclose(st.r_s[0], p.embeddings[[0, 1, 2]].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(st.r_t[0], p.embeddings[[3, 4]].mean(axis=0), atol=1e-15)


def test_singleton_neighborhood_passes_through():
    p = random_params(4, 5, seed=3)
    st = forward(p, [2], [1])
    assert st.attn_s[0, 0] == 1.0
    np.testing.assert_array_equal(st.r_s[0], p.embeddings[2])
    np.testing.assert_array_equal(st.r_t[0], p.embeddings[1])


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_naive_oracle(seed):
    n, d, L = 7, 4, 3
    r = np.random.default_rng(seed)
    p = random_params(n, d, seed)
    ids_s = r.integers(0, n + 1, L)
    ids_t = r.integers(0, n + 1, L)
    ids_s[0] = r.integers(0, n)
    ids_t[0] = r.integers(0, n)
    st = forward(p, ids_s, ids_t)
    A, s_raw, t_raw, attn_s, attn_t, r_s, r_t = naive_forward(
        p.embeddings.tolist(), p.attn.tolist(), ids_s.tolist(), ids_t.tolist(), n)
    ms, mt = ids_s != n, ids_t != n
    np.testing.assert_allclose(st.A[0][np.ix_(ms, mt)], A, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.raw_s[0][ms], s_raw, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.raw_t[0][mt], t_raw, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.attn_s[0][ms], attn_s, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.attn_t[0][mt], attn_t, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.r_s[0], r_s, atol=1e-12, rtol=0)
    np.testing.assert_allclose(st.r_t[0], r_t, atol=1e-12, rtol=0)


def test_batched_forward_equals_rowwise():
    n, d = 9, 6
    p = random_params(n, d, seed=4)
    r = np.random.default_rng(0)
    S = r.integers(0, n, (5, 4))
    T = r.integers(0, n, (5, 4))
    S[:, 2:] = n
    batch = forward(p, S, T)
    for b in range(5):
        one = forward(p, S[b], T[b])
        np.testing.assert_allclose(batch.r_s[b], one.r_s[0], rtol=1e-13)
        np.testing.assert_allclose(batch.r_t[b], one.r_t[0], rtol=1e-13)


def test_attention_invariants():
    n, d = 12, 8
    p = random_params(n, d, seed=5, scale=2.0)
    r = np.random.default_rng(1)
    S = r.integers(0, n + 1, (40, 6))
    T = r.integers(0, n + 1, (40, 6))
    S[:, 0] = r.integers(0, n, 40)
    T[:, 0] = r.integers(0, n, 40)
    st = forward(p, S, T)
    for attn, mask in ((st.attn_s, st.mask_s), (st.attn_t, st.mask_t)):
        assert np.all(attn >= 0) and np.all(attn[~mask] == 0)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(st.A) <= 1.0)
    # r lies in the convex hull of the valid rows: check per coordinate bounds
    for b in range(40):
        rows = p.embeddings[S[b][st.mask_s[b]]]
        assert np.all(st.r_s[b] >= rows.min(axis=0) - 1e-12)
        assert np.all(st.r_s[b] <= rows.max(axis=0) + 1e-12)


def test_permutation_invariance():
    n, d = 10, 5
    p = random_params(n, d, seed=6)
    r = np.random.default_rng(2)
    S, T = r.choice(n, 6, replace=False), r.choice(n, 6, replace=False)
    base = forward(p, S, T)
    for _ in range(10):
        st = forward(p, r.permutation(S), r.permutation(T))
        np.testing.assert_allclose(st.r_s, base.r_s, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(st.r_t, base.r_t, rtol=1e-12, atol=1e-14)


def test_padding_does_not_change_output():
    p = random_params(8, 4, seed=7)
    a = forward(p, [1, 2], [3, 4])
    b = forward(p, [1, 2, 8, 8, 8], [3, 4, 8, 8, 8])
    np.testing.assert_allclose(a.r_s, b.r_s, rtol=1e-14)
    np.testing.assert_allclose(a.r_t, b.r_t, rtol=1e-14)


def test_forward_errors():
    p = random_params(4, 3, seed=0)
    with pytest.raises(ValueError):
        forward(p, [0, 1], [2])
    with pytest.raises(ValueError):
        forward(p, [4], [1])  # all pad
    with pytest.raises(ValueError):
        forward(p, [5], [1])
    p.embeddings[1, 0] = np.nan
    with pytest.raises(FloatingPointError):
        forward(p, [1], [2])


def test_dropout_only_in_training():
    p = random_params(6, 5, seed=1)
    a = forward(p, [0, 1], [2, 3], dropout_keep=0.5, rng=np.random.default_rng(0))
    b = forward(p, [0, 1], [2, 3])
    np.testing.assert_array_equal(a.r_s, b.r_s)
    c = forward(p, [0, 1], [2, 3], dropout_keep=0.5, rng=np.random.default_rng(0), training=True)
    assert set(np.unique(c.drop_s).tolist()) <= {0.0, 2.0}


def test_score():
    assert score([1, 2], [3, -1]) == 1.0
    r = np.random.default_rng(0).normal(size=7)
    q = np.random.default_rng(1).normal(size=7)
    assert score(r, q) == score(q, r)
    with pytest.raises(ValueError):
        score([1, 2], [1, 2, 3])


def test_pair_embed_symmetric_for_undirected():
    g = random_graph(12, 0.4, seed=2)
    p = random_params(12, 6, seed=3)
    p.attn = p.attn + p.attn.T  # the swap identity needs a symmetric bilinear form
    ru, rv = pair_embed(p, g, 1, 4, 20, None)
    rv2, ru2 = pair_embed(p, g, 4, 1, 20, None)
    assert score(ru, rv) == pytest.approx(score(ru2, rv2), abs=1e-9)


def test_pair_embed_isolated_node_uses_itself():
    g = Graph.from_edges(4, [(0, 1), (1, 2)], directed=False)
    p = random_params(4, 3, seed=4)
    ru, _ = pair_embed(p, g, 3, 0, 5, None)
    np.testing.assert_array_equal(ru, p.embeddings[3])


def test_pair_embed_deterministic_with_seed():
    g = random_graph(30, 0.6, seed=5)
    p = random_params(30, 4, seed=5)
    a = pair_embed(p, g, 0, 1, 3, np.random.default_rng(9))
    b = pair_embed(p, g, 0, 1, 3, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])


def test_pair_scores_matches_pair_embed():
    g = random_graph(15, 0.3, seed=6)
    p = random_params(15, 5, seed=6)
    pairs = np.array([[0, 3], [4, 9], [2, 2], [14, 1]])
    got = pair_scores(p, NeighborhoodTable(g, 50), pairs, None)
    want = [score(*pair_embed(p, g, u, v, 50, None)) for u, v in pairs.tolist()]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_static_embedding_single_edge():
    g = Graph.from_edges(2, [(0, 1)], directed=False)
    p = random_params(2, 4, seed=7)
    np.testing.assert_allclose(static_embedding(p, g, 0, 5, None), p.embeddings[1])


def test_static_embedding_isolated_and_mean():
    g = Graph.from_edges(5, [(0, 1), (0, 2)], directed=True)
    p = random_params(5, 4, seed=8)
    np.testing.assert_allclose(static_embedding(p, g, 4, 5, None), p.embeddings[4])
    want = (pair_embed(p, g, 0, 1, 5, None)[0] + pair_embed(p, g, 0, 2, 5, None)[0]) / 2
    np.testing.assert_allclose(static_embedding(p, g, 0, 5, None), want, rtol=1e-12)


@pytest.mark.parametrize("directed", [False, True])
def test_batched_static_embeddings(directed):
    g = random_graph(14, 0.2, seed=9, directed=directed)
    p = random_params(14, 3, seed=9)
    allx = static_embeddings(p, g, 40, None)
    for u in range(14):
        np.testing.assert_allclose(allx[u], static_embedding(p, g, u, 40, None), rtol=1e-10, atol=1e-13)


def test_mlp_identity_weights_give_tanh_of_mean():
    p = init_mlp_params(6, 4, seed=0)
    p.weight[:] = np.eye(4)
    st = mlp_forward(p, [0, 1, 6], [2, 6, 6])
    np.testing.assert_allclose(st.r_s[0], np.tanh(p.embeddings[[0, 1]].mean(axis=0)))
    p.weight[:] = 0.0
    p.bias[:] = [0.1, -0.2, 0.3, 0.0]
    st = mlp_forward(p, [0], [1])
    np.testing.assert_allclose(st.r_t[0], np.tanh(p.bias))


def test_mlp_matches_naive():
    r = np.random.default_rng(3)
    p = MlpParams(r.normal(size=(8, 3)), r.normal(size=(3, 3)), r.normal(size=3))
    p.embeddings[7] = 0.0
    ids = [1, 5, 7, 2]
    st = mlp_forward(p, ids, ids)
    want = naive_mlp(p.embeddings.tolist(), p.weight.tolist(), p.bias.tolist(), ids, 7)
    np.testing.assert_allclose(st.r_s[0], want, atol=1e-12)


@pytest.mark.parametrize("maker", [init_params, init_mlp_params])
def test_checkpoint_round_trip_bit_exact(tmp_path, maker):
    p = maker(7, 5, seed=11)
    save_checkpoint(tmp_path / "c", p, 33)
    q, L = load_checkpoint(tmp_path / "c")
    assert L == 33 and type(q) is type(p)
    for a, b in zip([p.embeddings, *p.dense().values()], [q.embeddings, *q.dense().values()]):
        assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "d", q, 33)
    assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_text("hello 1 2 3\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
    (tmp_path / "y").write_text("gap-v1 1 1 5\n0.0\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "y")
