import numpy as np
import pytest

from macl.autodiff import Tensor
from macl.errors import ConfigError, ContractError, DimensionError
from macl.model import ModelConfig, encode_sessions, fuse_item, fused_item_table, init_params, session_embeddings
from oracles import central_difference, relative_error


def params_for(d=4, n=6, seed=0, **kw):
    cfg = ModelConfig(n, d, max_len=kw.pop("max_len", 8), **kw)
    return cfg, init_params(cfg, np.random.default_rng(seed))


# -- fusion ------------------------------------------------------------------------
def test_zero_fusion_weights_return_id_embedding():
    _, p = params_for()
    for k in ("fusion.W", "fusion.W1", "fusion.W2", "fusion.W3", "fusion.W4"):
        p[k] = Tensor(np.zeros(p[k].shape))
    rng = np.random.default_rng(1)
    e_id, e_img, e_txt = rng.normal(size=(3, 4))
    assert np.array_equal(fuse_item(p, e_id, e_img, e_txt).data, e_id)


def test_missing_modalities_contribute_nothing():
    _, p = params_for()
    e_id = np.random.default_rng(2).normal(size=4)
    out = fuse_item(p, e_id, np.zeros(4), np.zeros(4), img_missing=True, txt_missing=True)
    assert np.array_equal(out.data, e_id)


def test_fusion_matches_straight_line_evaluation():
    _, p = params_for(seed=3)
    rng = np.random.default_rng(4)
    e_id, e_img, e_txt = rng.normal(size=(3, 4))
    W, W1, W2, W3, W4 = (p[f"fusion.{k}"].data for k in ("W", "W1", "W2", "W3", "W4"))
    m = np.zeros(4)
    x = np.concatenate([e_id, e_img, e_txt])
    for r in range(4):
        m[r] = sum(W[r, c] * x[c] for c in range(12))
    g1 = np.tanh([sum(W1[r, c] * m[c] + W2[r, c] * e_img[c] for c in range(4)) for r in range(4)])
    g2 = np.tanh([sum(W3[r, c] * m[c] + W4[r, c] * e_txt[c] for c in range(4)) for r in range(4)])
    expected = e_id + g1 * e_img + g2 * e_txt
    assert np.max(np.abs(fuse_item(p, e_id, e_img, e_txt).data - expected)) < 1e-12


def test_gated_terms_bounded_by_modality_magnitude():
    _, p = params_for(seed=5)
    rng = np.random.default_rng(6)
    for _ in range(20):
        e_id, e_img, e_txt = rng.normal(size=(3, 4)) * 3
        only_img = fuse_item(p, e_id, e_img, e_txt, txt_missing=True).data - e_id
        assert np.all(np.abs(only_img) <= np.abs(e_img))


def test_fusion_dimension_mismatch():
    _, p = params_for()
    with pytest.raises(DimensionError):
        fuse_item(p, np.zeros(4), np.zeros(3), np.zeros(4))


def test_fused_table_padding_row_and_shapes():
    cfg, p = params_for(n=5)
    rng = np.random.default_rng(7)
    table = fused_item_table(p, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), np.ones(5), np.ones(5))
    assert table.shape == (6, 4) and np.all(table.data[0] == 0)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ModelConfig(5, d=6, n_heads=4)


# -- encoder -------------------------------------------------------------------------
def test_length_one_ignores_padding_content():
    cfg, p = params_for(d=8, max_len=6, n_heads=2)
    rng = np.random.default_rng(8)
    seq = rng.normal(size=(1, 6, 8))
    a = encode_sessions(p, Tensor(seq), [1], cfg).data
    seq2 = seq.copy()
    seq2[0, :5] = rng.normal(size=(5, 8)) * 100
    b = encode_sessions(p, Tensor(seq2), [1], cfg).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_padding_invariance_random_lengths():
    cfg, p = params_for(d=8, max_len=7)
    rng = np.random.default_rng(9)
    seq = rng.normal(size=(4, 7, 8))
    lengths = np.array([1, 3, 5, 7])
    a = encode_sessions(p, Tensor(seq), lengths, cfg).data
    noisy = seq.copy()
    for r, L in enumerate(lengths):
        noisy[r, : 7 - L] = rng.normal(size=(7 - L, 8)) * 50
    assert np.max(np.abs(encode_sessions(p, Tensor(noisy), lengths, cfg).data - a)) < 1e-10


def test_trimming_padding_width_gives_same_embedding():
    cfg, p = params_for(d=8, max_len=7)
    seq = np.random.default_rng(10).normal(size=(2, 7, 8))
    seq[:, :4] = 0
    full = encode_sessions(p, Tensor(seq), [3, 2], cfg).data
    trimmed = encode_sessions(p, Tensor(seq[:, 4:]), [3, 2], cfg).data
    assert np.max(np.abs(full - trimmed)) < 1e-12


def test_order_changes_embedding():
    cfg, p = params_for(d=8, max_len=4)
    seq = np.random.default_rng(11).normal(size=(1, 4, 8))
    a = encode_sessions(p, Tensor(seq), [4], cfg).data
    b = encode_sessions(p, Tensor(seq[:, [1, 0, 2, 3]]), [4], cfg).data
    assert np.max(np.abs(a - b)) > 1e-6


def test_causality_numerically_and_by_finite_differences():
    cfg, p = params_for(d=8, max_len=4)
    seq = np.random.default_rng(12).normal(size=(1, 4, 8))
    base = encode_sessions(p, Tensor(seq), [4], cfg, return_all=True).data
    changed = seq.copy()
    changed[0, 2] += 5.0
    after = encode_sessions(p, Tensor(changed), [4], cfg, return_all=True).data
    assert np.array_equal(base[0, :2], after[0, :2])
    # d(hidden at position 1) / d(input at position 3) == 0
    w = np.random.default_rng(13).normal(size=8)

    def f():
        return float(encode_sessions(p, Tensor(seq), [4], cfg, return_all=True).data[0, 1] @ w)

    grad = central_difference(f, [seq])[0]
    assert np.all(grad[0, 2:] == 0)
    assert np.any(grad[0, :2] != 0)


def test_too_long_sequence_is_contract_error():
    cfg, p = params_for(d=8, max_len=3)
    with pytest.raises(ContractError):
        encode_sessions(p, Tensor(np.zeros((1, 4, 8))), [4], cfg)


def test_fused_encode_pipeline_gradients():
    cfg, p = params_for(d=8, n=5, max_len=4, seed=14)
    rng = np.random.default_rng(15)
    img, txt = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    tokens = np.array([[0, 1, 2, 3], [0, 0, 4, 5]])
    lengths = np.array([3, 2])
    w = rng.normal(size=(2, 8))
    names = [k for k in p if not k.startswith("wnet")]

    def loss(params):
        table = fused_item_table(params, img, txt, np.ones(5), np.ones(5))
        return (session_embeddings(params, table, tokens, lengths, cfg) * Tensor(w)).sum()

    loss(p).backward()
    raw = {k: p[k].data.copy() for k in names}
    frozen = {k: Tensor(v) for k, v in raw.items()}
    numeric = central_difference(lambda: float(loss(frozen).data), [frozen[k].data for k in names])
    for k, num in zip(names, numeric):
        assert relative_error(p[k].grad, num) < 1e-4, k
