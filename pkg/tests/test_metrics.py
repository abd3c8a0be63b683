"""Metric functions and the held-out evaluation protocol."""
from __future__ import annotations

import numpy as np
import pytest

from grlayout.data import subsystem_seed
from grlayout.layouts import (
    ACT_SENTINEL, ACT_VALUE, N_RESERVED, SENTINEL_ID, preset, tokenize,
)
from grlayout.metrics import (
    EvalReport, evaluate, hit_rate, ndcg_at, rank_of, rmse,
    _negatives, _prepare,
)
from grlayout.model import ActionStats, ModelConfig
from grlayout.synthetic import SyntheticConfig, generate_synthetic
from grlayout.training import TrainConfig, build_model, fit_stats, train

MC = ModelConfig(vocab_size=43, d=16, n_layers=1, n_heads=2, max_seq_len=30,
                 dropout=0.0)


@pytest.fixture(scope="module")
def corpus():
    cfg = SyntheticConfig(users=80, items=40, min_len=5, max_len=12)
    users, _ = generate_synthetic(cfg, seed=11)
    return users


# -- fixtures with hand-computed values ---------------------------------------


def test_hit_rate_fixture():
    ranks = [1, 3, 10, 11, 99]
    assert hit_rate(ranks, 10) == pytest.approx(3 / 5)
    assert hit_rate(ranks, 1) == pytest.approx(1 / 5)
    with pytest.raises(ValueError):
        hit_rate([], 5)


def test_ndcg_fixture():
    # gains: 1/log2(2), 1/log2(4), 0  ->  (1 + 0.5 + 0) / 3
    assert ndcg_at([1, 3, 20], 10) == pytest.approx((1.0 + 0.5) / 3)
    assert ndcg_at([1], 1) == pytest.approx(1.0)
    assert ndcg_at([2], 1) == 0.0


def test_rmse_fixture():
    pred = np.array([[1.0, 0.0], [3.0, 4.0]])
    truth = np.array([[0.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(rmse(pred, truth),
                               [np.sqrt(5.0), np.sqrt(8.0)])
    with pytest.raises(ValueError):
        rmse(np.zeros((2, 1)), np.zeros((3, 1)))


def test_rank_of_tie_rules():
    ids = np.array([4, 5, 6])
    scores = np.array([0.5, 0.9, 0.5])
    assert rank_of(7, 0.5, ids, scores) == 4   # beaten by 0.9, both ties smaller
    assert rank_of(3, 0.5, ids, scores) == 2   # ties have larger ids
    assert rank_of(9, 1.0, ids, scores) == 1


# -- random-logit calibration -------------------------------------------------


def test_random_ranks_match_uniform_expectation():
    # rank uniform on {1..100} under 99 negatives: HR@10 should be ~0.10
    rng = np.random.default_rng(0)
    ranks = rng.integers(1, 101, size=20_000)
    assert hit_rate(ranks, 10) == pytest.approx(0.10, abs=0.01)


# -- negatives ----------------------------------------------------------------


def test_negatives_exclude_history_and_are_deterministic():
    seen = np.array([5, 6, 7], dtype=np.int64)
    a = _negatives("u1", seen, 43, 20, seed=3)
    b = _negatives("u1", seen, 43, 20, seed=3)
    np.testing.assert_array_equal(a, b)
    assert np.intersect1d(a, seen).size == 0
    assert a.min() >= N_RESERVED and a.max() < 43
    assert a.size == 20
    c = _negatives("u2", seen, 43, 20, seed=3)
    assert not np.array_equal(a, c)        # stream is keyed by user
    d = _negatives("u1", seen, 43, 20, seed=4)
    assert not np.array_equal(a, d)        # and by seed


def test_negatives_pool_exhaustion():
    seen = np.arange(N_RESERVED, 40, dtype=np.int64)
    out = _negatives("u", seen, 43, 99, seed=0)
    assert out.size == 3                   # only 3 unseen ids remain


def test_negative_stream_key_is_the_documented_one():
    seen = np.array([5], dtype=np.int64)
    got = _negatives("alice", seen, 43, 5, seed=7)
    rng = np.random.default_rng(subsystem_seed(7, "neg:alice"))
    pool = np.setdiff1d(np.arange(N_RESERVED, 43, dtype=np.int64), seen)
    np.testing.assert_array_equal(got, rng.choice(pool, size=5, replace=False))


# -- sanitization -------------------------------------------------------------


def test_retrieval_read_hides_truth_item():
    # INPUT_IA at the last history token inputs item n-1 < n; nothing to hide
    spec = preset("INPUT_IA")
    items = np.arange(N_RESERVED, N_RESERVED + 6, dtype=np.int64)
    actions = np.ones((6, 1), dtype=np.float32)
    t = tokenize(spec, items, actions)
    model = build_model(spec, MC, seed=0)
    from grlayout.data import UserSequence
    u = UserSequence(user="u", items=items, actions=actions.astype(np.float64),
                     ts=np.arange(6, dtype=np.float64))
    tp, ret_idx, act_idx = _prepare(model, u, ActionStats.identity(1))
    assert ret_idx == 4                    # token t=5 predicts item step 6
    np.testing.assert_array_equal(tp.item_ids, t.item_ids)


def test_action_read_keeps_item_but_hides_action():
    # same-step action layouts read at the final token: item n stays, a_n goes
    spec = preset("LAC")
    items = np.arange(N_RESERVED, N_RESERVED + 5, dtype=np.int64)
    actions = np.full((5, 1), 2.0, dtype=np.float64)
    model = build_model(spec, MC, seed=0)
    from grlayout.data import UserSequence
    u = UserSequence(user="u", items=items, actions=actions,
                     ts=np.arange(5, dtype=np.float64))
    tp, ret_idx, act_idx = _prepare(model, u, ActionStats.identity(1))
    assert act_idx == tp.length - 1
    assert tp.item_ids[act_idx] == items[-1]          # consumed item is legal
    # LAC inputs ACTION@-1 = a_4 at the last token; step 4 < 5 stays legal
    assert tp.action_kind[act_idx] == ACT_VALUE


def test_self_action_read_is_sanitized():
    # the anti-pattern inputs a_n at the token predicting a_n; must sentinel it
    spec = preset("ANTI_SELF_ACTION")
    items = np.arange(N_RESERVED, N_RESERVED + 5, dtype=np.int64)
    actions = np.full((5, 1), 2.0, dtype=np.float64)
    model = build_model(spec, MC, seed=0)
    from grlayout.data import UserSequence
    u = UserSequence(user="u", items=items, actions=actions,
                     ts=np.arange(5, dtype=np.float64))
    tp, _, act_idx = _prepare(model, u, ActionStats.identity(1))
    assert act_idx >= 0
    assert tp.action_kind[act_idx] == ACT_SENTINEL
    assert tp.action_input[act_idx] == 0.0


def test_self_item_read_is_sanitized():
    # a layout inputting ITEM@+1 would reveal the retrieval target; sentinel it
    from grlayout.layouts import Arrangement, ChannelRef, Conditioning, LayoutSpec
    spec = LayoutSpec(name="X_SELF_ITEM",
                      inputs=(ChannelRef.parse("ITEM@+1"),),
                      targets=(ChannelRef.parse("ITEM@+1"),),
                      arrangement=Arrangement.NON_INTERLEAVED,
                      conditioning=Conditioning.NONE)
    items = np.arange(N_RESERVED, N_RESERVED + 5, dtype=np.int64)
    model = build_model(spec, MC, seed=0)
    from grlayout.data import UserSequence
    u = UserSequence(user="u", items=items,
                     actions=np.zeros((5, 1), dtype=np.float64),
                     ts=np.arange(5, dtype=np.float64))
    tp, ret_idx, _ = _prepare(model, u, ActionStats.identity(1))
    assert ret_idx >= 0
    assert tp.item_ids[ret_idx] == SENTINEL_ID


# -- end-to-end protocol ------------------------------------------------------


def test_evaluate_report_fields(corpus):
    model = build_model(preset("LAC"), MC, seed=0)
    stats = fit_stats(corpus)
    rep = evaluate(model, corpus, stats, ks=(5, 10), n_negatives=20, seed=0)
    assert rep.layout == "LAC"
    assert rep.protocol == "sampled-20"
    assert rep.n_users == len(corpus)
    assert rep.ranked_users == len(corpus) and rep.rmse_users == len(corpus)
    assert set(rep.hr) == {5, 10} and set(rep.ndcg) == {5, 10}
    assert rep.hr[5] <= rep.hr[10]
    assert rep.rmse.shape == (1,)
    d = rep.to_json_dict()
    assert d["hr"]["10"] == rep.hr[10]
    assert isinstance(d["rmse"][0], float)
    text = rep.to_text()
    assert "HR@10" in text and "RMSE" in text


def test_evaluate_sampled_hr_upper_bounds_full_vocab(corpus):
    model = build_model(preset("ITEM_ONLY"), MC, seed=1)
    stats = fit_stats(corpus)
    sampled = evaluate(model, corpus, stats, ks=(10,), n_negatives=20, seed=0)
    full = evaluate(model, corpus, stats, ks=(10,), full_vocab=True)
    # the sampled pool is a subset, so ranks can only improve
    assert sampled.hr[10] >= full.hr[10]
    assert full.protocol == "full-vocab"
    assert sampled.rmse is None            # no action targets in this layout


def test_evaluate_is_deterministic(corpus):
    model = build_model(preset("IO_IA_BOTH"), MC, seed=2)
    stats = fit_stats(corpus)
    a = evaluate(model, corpus, stats, ks=(10,), seed=5)
    b = evaluate(model, corpus, stats, ks=(10,), seed=5)
    assert a.hr == b.hr and a.ndcg == b.ndcg
    np.testing.assert_array_equal(a.rmse, b.rmse)


def test_evaluate_batch_size_has_no_effect(corpus):
    model = build_model(preset("LAC"), MC, seed=3)
    stats = fit_stats(corpus)
    a = evaluate(model, corpus, stats, ks=(10,), seed=1, batch_size=7)
    b = evaluate(model, corpus, stats, ks=(10,), seed=1, batch_size=64)
    assert a.hr == b.hr
    np.testing.assert_allclose(a.rmse, b.rmse, atol=1e-7)


def test_trained_beats_untrained(corpus):
    stats = fit_stats(corpus)
    spec = preset("LAC")
    fresh = build_model(spec, MC, seed=4)
    before = evaluate(fresh, corpus, stats, ks=(10,), seed=0)
    res = train(build_model(spec, MC, seed=4), corpus,
                TrainConfig(steps=60, batch_size=32, seed=4, warmup_steps=10))
    after = evaluate(res.model, corpus, stats, ks=(10,), seed=0)
    assert after.rmse[0] < before.rmse[0]


def test_evaluate_rejects_empty():
    model = build_model(preset("LAC"), MC, seed=0)
    with pytest.raises(ValueError):
        evaluate(model, [], ActionStats.identity(1))
