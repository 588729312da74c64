import math

import numpy as np
import pytest

from macl.data import Session, chronological_split, encode_prefixes, filter_corpus, make_batches
from macl.errors import (
    ConfigError,
    EmptySetError,
    FormatError,
    IncompatibleCheckpointError,
    ItemLookupError,
    TrainingDivergenceError,
)
from macl.synth import SyntheticSpec, generate_synthetic
from macl.training import (
    LOSS_LOG_COLUMNS,
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    forward_loss,
    make_step_inputs,
    metrics_from_ranks,
    prepare_augmentation,
    ranks_from_scores,
    recommend,
    stratified_evaluate,
    stream,
    target_ranks,
    train,
    training_popularity,
)
from macl.embedders import build_embedders
from oracles import brute_force_metrics

SMALL = SyntheticSpec(n_items=24, n_groups=3, sessions=240, image_size=8, max_length=6, seed=3)
FAST = TrainConfig(d=8, M=4, N=16, epochs=2, max_len=5, lr=0.01, keep_unpopular=True, seed=1)


@pytest.fixture(scope="module")
def corpus():
    data = generate_synthetic(SMALL)
    sessions, catalog = filter_corpus(data.sessions, data.catalog, keep_unpopular=True)
    return chronological_split(sessions), catalog


@pytest.fixture(scope="module")
def trained(corpus):
    splits, catalog = corpus
    return train(FAST, splits, catalog)


# -- config --------------------------------------------------------------------------
def test_defaults():
    c = TrainConfig()
    assert (c.d, c.lam, c.M, c.N, c.lr, c.max_len, c.tau, tuple(c.k_list)) == (100, 0.01, 100, 100, 0.001, 50, 1.0, (10, 20))


def test_config_text_round_trip_and_unknown_key():
    c = TrainConfig(d=16, lam=0.5, no_item_cl=True, k_list=(5, 20))
    assert TrainConfig.from_text(c.to_text()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_text("d = 8\nlamda = 0.1\n")
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0)


def test_streams_are_independent_and_reproducible():
    a = stream(5, "data").random(4)
    assert np.array_equal(a, stream(5, "data").random(4))
    assert not np.array_equal(a, stream(5, "sampling").random(4))


# -- metrics -----------------------------------------------------------------------------
def test_metric_oracle_random_sessions():
    rng = np.random.default_rng(0)
    for _ in range(5):
        scores = rng.integers(0, 6, size=(50, 30)).astype(float)  # many ties
        labels = rng.integers(0, 30, size=50)
        rep = metrics_from_ranks(ranks_from_scores(scores, labels), (1, 5, 10, 20))
        prec, mrr = brute_force_metrics(scores, labels, (1, 5, 10, 20))
        assert rep.precision == prec and rep.mrr == mrr
        assert rep.precision[10] <= rep.precision[20] and rep.mrr[10] <= rep.mrr[20]


def test_rank_three_example():
    rep = metrics_from_ranks(np.array([3]), (2, 10))
    assert rep.precision == {2: 0.0, 10: 1.0}
    assert rep.mrr[2] == 0.0 and abs(rep.mrr[10] - 1 / 3) < 1e-15
    top = metrics_from_ranks(np.ones(7, dtype=int), (1, 20))
    assert top.precision == {1: 1.0, 20: 1.0} and top.mrr == {1: 1.0, 20: 1.0}


def test_empty_evaluation_set(trained):
    with pytest.raises(EmptySetError):
        evaluate(trained.model, [])


def test_metrics_rows_shape():
    rows = metrics_from_ranks(np.array([1, 4]), (10, 20)).rows("validation", "all")
    assert [r["k"] for r in rows] == [10, 20] and all(r["count"] == 2 for r in rows)


# -- training ---------------------------------------------------------------------------------
def test_loss_log_columns_and_determinism(corpus, trained):
    splits, catalog = corpus
    assert set(trained.loss_log[0]) == set(LOSS_LOG_COLUMNS)
    again = train(FAST, splits, catalog)
    assert again.loss_log == trained.loss_log
    assert evaluate(again.model, splits.test).precision == evaluate(trained.model, splits.test).precision


def test_training_reduces_loss(trained):
    first = np.mean([r["rec"] for r in trained.loss_log if r["epoch"] == 1])
    last = np.mean([r["rec"] for r in trained.loss_log if r["epoch"] == FAST.epochs])
    assert last < first


def test_no_adaptive_logs_unit_weights(corpus):
    splits, catalog = corpus
    cfg = TrainConfig(**{**FAST.to_dict(), "no_adaptive": True, "epochs": 1, "k_list": FAST.k_list})
    res = train(cfg, splits, catalog)
    assert all(r["mean_alpha"] == 1.0 and r["mean_beta"] == 1.0 for r in res.loss_log)


def test_loss_is_rec_plus_weighted_contrast(corpus):
    splits, catalog = corpus
    for lam in (0.0, 0.3):
        cfg = TrainConfig(**{**FAST.to_dict(), "lam": lam, "k_list": FAST.k_list})
        emb = build_embedders(catalog, cfg.d, cfg.projector, cfg.seed)
        _, bank = prepare_augmentation(cfg, catalog, emb)
        model = build_model(cfg, catalog, emb)
        batch = make_batches(splits.train, cfg.N, cfg.max_len, seed=0)[0]
        si = make_step_inputs(model, batch, bank, stream(1, "augmentation"), stream(1, "sampling"))
        total, br = forward_loss(model, si)
        assert abs(br.total - (br.rec + lam * (br.item_con + br.sess_con))) < 1e-12
        assert total.item() == br.total


def test_all_contrast_off_matches_plain_supervision(corpus):
    splits, catalog = corpus
    base = {**FAST.to_dict(), "k_list": FAST.k_list, "epochs": 1}
    a = train(TrainConfig(**{**base, "no_item_cl": True, "no_sess_cl": True}), splits, catalog)
    b = train(TrainConfig(**{**base, "no_item_cl": True, "no_sess_cl": True, "lam": 0.0}), splits, catalog)
    assert [r["rec"] for r in a.loss_log] == [r["rec"] for r in b.loss_log]
    assert all(r["item_con"] == 0.0 and r["sess_con"] == 0.0 for r in a.loss_log)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    splits, catalog = corpus
    cfg = TrainConfig(**{**FAST.to_dict(), "lr": 1e300, "epochs": 3, "k_list": FAST.k_list})
    with pytest.raises(TrainingDivergenceError, match="epoch"):
        train(cfg, splits, catalog)


def test_evaluation_does_not_mutate(corpus, trained):
    splits, _ = corpus
    before = trained.model.parameter_snapshot()
    evaluate(trained.model, splits.test)
    after = trained.model.parameter_snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_evaluate_matches_brute_force_scores(corpus, trained):
    splits, _ = corpus
    model, sessions = trained.model, splits.test
    tokens, lengths = encode_prefixes([s.prefix for s in sessions], model.config.max_len)
    scores = model.scores(tokens, lengths)
    prec, mrr = brute_force_metrics(scores, [s.label for s in sessions], (10, 20))
    rep = evaluate(model, sessions)
    assert rep.precision == prec and rep.mrr == mrr


# -- stratified ---------------------------------------------------------------------------------
def test_stratified_weighted_mean(corpus, trained):
    splits, _ = corpus
    rep = evaluate(trained.model, splits.test)
    parts = stratified_evaluate(trained.model, splits.test, "session_length", [4])
    total = sum(g.count for g, _ in parts)
    assert total == rep.count
    for k in (10, 20):
        wp = sum(g.count * r.precision[k] for g, r in parts if r) / total
        wm = sum(g.count * r.mrr[k] for g, r in parts if r) / total
        assert abs(wp - rep.precision[k]) < 1e-9 and abs(wm - rep.mrr[k]) < 1e-9


def test_single_group_equals_global_and_empty_group_is_null(corpus, trained):
    splits, _ = corpus
    rep = evaluate(trained.model, splits.test)
    (g, r), (empty, none) = stratified_evaluate(trained.model, splits.test, "session_length", [1000])
    assert r.precision == rep.precision and r.mrr == rep.mrr and g.count == rep.count
    assert empty.count == 0 and none is None


def test_unseen_target_falls_in_lowest_popularity_bucket(corpus, trained):
    splits, _ = corpus
    pop = training_popularity(splits.train)
    pop_no_label = {k: v for k, v in pop.items() if k != splits.test[0].label}
    parts = stratified_evaluate(trained.model, splits.test[:1], "item_popularity", [0, 10, 10**9], popularity=pop_no_label)
    assert parts[0][0].count == 1
    with pytest.raises(ConfigError):
        stratified_evaluate(trained.model, splits.test, "item_popularity", [10])


# -- recommend ---------------------------------------------------------------------------------
def test_recommend_argmax_saturation_and_lookup(trained, corpus):
    _, catalog = corpus
    model = trained.model
    prefix = [catalog[0].external_id, catalog[1].external_id]
    full = recommend(model, prefix, k=10_000)
    assert len(full) == model.n_items
    assert abs(sum(p for _, p in full) - 1.0) < 1e-9
    assert recommend(model, prefix, k=1)[0] == full[0]
    probs = [p for _, p in full]
    assert probs == sorted(probs, reverse=True)
    with pytest.raises(ItemLookupError, match="nope"):
        recommend(model, ["nope", prefix[0]], k=3)
    excluded = [x for x, _ in recommend(model, prefix, k=10_000, exclude_seen=True)]
    assert not set(prefix) & set(excluded) and len(excluded) == model.n_items - 2


def test_recommend_ties_go_to_lower_id(trained, corpus):
    _, catalog = corpus
    model = trained.model
    snap = model.parameter_snapshot()
    tables = model.image_table, model.text_table
    try:
        model.params["id_table"].data[...] = 0.0
        model.image_table = np.zeros_like(tables[0])
        model.text_table = np.zeros_like(tables[1])
        out = recommend(model, [catalog[3].external_id], k=5)
        assert [x for x, _ in out] == model.external_ids[:5]
        ranks = target_ranks(model, [Session("t", (3, 2))])
        assert ranks.tolist() == [3]
    finally:
        model.load_snapshot(snap)
        model.image_table, model.text_table = tables


# -- checkpoints -------------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, corpus, trained):
    splits, _ = corpus
    path = tmp_path / "c.bin"
    checkpoint_save(trained.model, path)
    loaded = checkpoint_load(path, FAST, trained.model.id_digest)
    a, b = trained.model.parameter_snapshot(), loaded.parameter_snapshot()
    assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.epoch == trained.model.epoch and loaded.config == trained.model.config
    ra, rb = evaluate(trained.model, splits.test), evaluate(loaded, splits.test)
    assert ra.precision == rb.precision and ra.mrr == rb.mrr


def test_checkpoint_errors(tmp_path, trained):
    path = tmp_path / "c.bin"
    checkpoint_save(trained.model, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint_load(bad)
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        checkpoint_load(bad)
    with pytest.raises(IncompatibleCheckpointError):
        checkpoint_load(path, TrainConfig(d=4))
    with pytest.raises(IncompatibleCheckpointError):
        checkpoint_load(path, id_map_digest_expected="0" * 64)


def test_best_epoch_is_restored(trained):
    best = max(trained.history, key=lambda h: h["val_prec20"])
    assert trained.best_epoch == best["epoch"] == trained.model.epoch
    assert not math.isnan(best["val_prec20"])
