import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotlighter.activation import combine_scores, sample_scores, select_activated, semantic_scores, stratify
from spotlighter.config import RunConfig
from spotlighter.errors import BadMagic, EmptySplit, TruncatedFile, VersionMismatch, WorkloadTooSmall
from spotlighter.features import FeatureSet, generate_base_novel
from spotlighter.memory_bank import match_class
from spotlighter.numerics import l2_normalize, normalize_rows, softmax
from spotlighter.pipeline import (
    bench_throughput,
    evaluate,
    flop_count_inference,
    harmonic_mean,
    load_state,
    make_eval_class_set,
    predict,
    predict_batch,
    save_state,
    split_accuracy,
    train,
)
from spotlighter.representative import reps_fwd


# --- harmonic mean ---------------------------------------------------------------

def test_harmonic_mean_reference_values():
    assert abs(harmonic_mean(77.62, 71.71) - 74.55) < 0.01
    assert abs(harmonic_mean(69.34, 74.22) - 71.70) < 0.01


def test_harmonic_mean_identity_and_zero():
    for x in (0.0, 12.5, 77.7, 100.0):
        assert abs(harmonic_mean(x, x) - x) < 1e-12
    assert harmonic_mean(100.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_mean_bounds(b, n):
    hm = harmonic_mean(b, n)
    assert hm <= (b + n) / 2 + 1e-9
    assert min(b, n) - 1e-9 <= hm <= max(b, n) + 1e-9


# --- training -------------------------------------------------------------------

def test_zero_epochs_initialized_empty_history(tiny_config, tiny_episode):
    base_train, _, _ = tiny_episode
    state = train(tiny_config.with_overrides(epochs=0), base_train)
    assert state.history == []
    assert state.trainable_params > 0


def test_training_leaves_frozen_parts_untouched(tiny_config, tiny_episode):
    base_train, _, _ = tiny_episode
    tokens_before = base_train.tokens.tobytes()
    text_before = base_train.text_embeddings.tobytes()
    state0 = train(tiny_config.with_overrides(epochs=0), base_train)
    theta_before = state0.theta.to_bytes()
    state = train(tiny_config, base_train)
    assert base_train.tokens.tobytes() == tokens_before
    assert base_train.text_embeddings.tobytes() == text_before
    assert state.theta.to_bytes() == theta_before  # same seed, untouched by steps


def test_training_updates_only_fusion_params(tiny_config, tiny_episode):
    base_train, _, _ = tiny_episode
    init = train(tiny_config.with_overrides(epochs=0), base_train)
    trained = train(tiny_config, base_train)
    changed = any(
        not np.array_equal(a, b)
        for (_, a), (_, b) in zip(init.params.tensors(), trained.params.tensors())
    )
    assert changed
    assert trained.theta.to_bytes() == init.theta.to_bytes()


def test_history_records_every_epoch(tiny_state, tiny_config):
    assert len(tiny_state.history) == tiny_config.epochs
    for i, rec in enumerate(tiny_state.history):
        assert rec["epoch"] == i
        for key in ("cls", "cls_low", "cls_high", "reg_text", "kl_visual",
                    "local", "total", "train_acc"):
            assert np.isfinite(rec[key])


def test_determinism_identical_states(tiny_config, tiny_episode, tmp_path):
    base_train, base_test, novel_test = tiny_episode
    a = train(tiny_config, base_train)
    b = train(tiny_config, base_train)
    save_state(a, tmp_path / "a.ckpt")
    save_state(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ma = evaluate(a, base_test, novel_test)
    mb = evaluate(b, base_test, novel_test)
    assert ma.to_dict() == mb.to_dict()


# --- prediction -----------------------------------------------------------------

def test_predict_separable_item(tiny_config):
    # every token is a clean class direction: identification is exact
    cfg = tiny_config.with_overrides(noise_sigma=0.0, signal_tokens=8, epochs=0)
    base_train, base_test, _ = generate_base_novel(cfg.synth_spec(), cfg.shots,
                                                   cfg.test_per_class)
    state = train(cfg, base_train)
    ctx = make_eval_class_set(state, base_test.text_embeddings, True)
    for i in range(base_test.n_items):
        pred, probs = predict(base_test.tokens[i].astype(float), state, ctx)
        assert pred == int(base_test.labels[i])
        assert abs(probs.sum() - 1.0) < 1e-9


def test_predict_probability_contract(tiny_state, tiny_episode):
    _, base_test, _ = tiny_episode
    ctx = make_eval_class_set(tiny_state, base_test.text_embeddings, True)
    pred, probs = predict(base_test.tokens[0].astype(float), tiny_state, ctx)
    assert probs.shape == (base_test.n_classes,)
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) < 1e-9
    assert pred == int(np.argmax(probs))


def test_predict_batch_matches_per_item(tiny_state, tiny_episode):
    _, base_test, novel_test = tiny_episode
    for split, trained in ((base_test, True), (novel_test, False)):
        ctx = make_eval_class_set(tiny_state, split.text_embeddings, trained)
        preds, probs = predict_batch(split.tokens, tiny_state, ctx)
        for i in range(split.n_items):
            p, pr = predict(split.tokens[i].astype(float), tiny_state, ctx)
            assert preds[i] == p
            assert np.abs(probs[i] - pr).max() < 1e-9


@pytest.mark.parametrize("variant", ["bottom-k", "remove-top-k"])
@pytest.mark.parametrize("recalc", [True, False])
def test_predict_batch_matches_per_item_on_variants(tiny_config, variant, recalc):
    cfg = tiny_config.with_overrides(selection_variant=variant, recalc_on=recalc,
                                     epochs=1)
    tr, bt, _ = generate_base_novel(cfg.synth_spec(), cfg.shots, cfg.test_per_class)
    state = train(cfg, tr)
    ctx = make_eval_class_set(state, bt.text_embeddings, True)
    preds, probs = predict_batch(bt.tokens, state, ctx)
    for i in range(bt.n_items):
        p, pr = predict(bt.tokens[i].astype(float), state, ctx)
        assert preds[i] == p
        assert np.abs(probs[i] - pr).max() < 1e-9


def test_predict_matches_independent_composition(tiny_state, tiny_episode):
    """Five items through a by-hand composition of the stage operations."""
    _, base_test, _ = tiny_episode
    cfg = tiny_state.config
    ctx = make_eval_class_set(tiny_state, base_test.text_embeddings, True)
    for i in range(5):
        X = base_test.tokens[i].astype(float)
        c_hat = match_class(l2_normalize(X.mean(axis=0)), ctx.matching_bank)
        protos = ctx.fusion_bank.prototypes[c_hat]
        combined = combine_scores(sample_scores(X, ctx.text[c_hat]),
                                  semantic_scores(X, protos), cfg.semantic_on)
        sel = select_activated(combined, cfg.k_act, cfg.selection_variant)
        t1, t2 = stratify(sel, combined, X, protos, cfg.recalc_on)
        tiers = [(0, X[t1])] + ([(1, X[t2])] if t2.size else [])
        V, R, _ = reps_fwd(tiers, protos, ctx.text, tiny_state.params,
                           tiny_state.theta, cfg.tau)
        v = l2_normalize(np.vstack(V).mean(axis=0))
        Tp = normalize_rows(np.stack(R, axis=1).mean(axis=1))
        want_probs = softmax(Tp @ v, cfg.tau)
        want = int(np.argmax(want_probs))
        got, got_probs = predict(X, tiny_state, ctx)
        assert got == want
        assert np.abs(got_probs - want_probs).max() < 1e-12


def test_tier_mode_lev1_lev2_run(tiny_state, tiny_episode):
    _, base_test, novel_test = tiny_episode
    for mode in ("lev1", "lev2"):
        m = evaluate(tiny_state, base_test, novel_test, tier_mode=mode)
        assert 0 <= m.base_acc <= 100
        assert 0 <= m.novel_acc <= 100


def test_config_variants_train_and_evaluate(tiny_config, tiny_episode):
    base_train, base_test, novel_test = tiny_episode
    from spotlighter.representative import trainable_param_count

    for kw in ({"share_irm": True}, {"sgd_momentum": 0.9}, {"k_act": 1},
               {"proto_renorm": False}):
        cfg = tiny_config.with_overrides(epochs=1, **kw)
        state = train(cfg, base_train)
        m = evaluate(state, base_test, novel_test)
        assert np.isfinite(m.harmonic)
        assert state.trainable_params == trainable_param_count(
            cfg.d, cfg.ffn_mult, cfg.share_irm)


# --- evaluation -----------------------------------------------------------------

def test_evaluate_perfect_case(tiny_config):
    cfg = tiny_config.with_overrides(noise_sigma=0.0, signal_tokens=8, epochs=1)
    tr, bt, nt = generate_base_novel(cfg.synth_spec(), cfg.shots, cfg.test_per_class)
    state = train(cfg, tr)
    m = evaluate(state, bt, nt)
    assert m.base_acc == 100.0
    assert m.novel_acc == 100.0
    assert m.harmonic == 100.0
    assert all(x == 100.0 for x in m.per_class_base + m.per_class_novel)


def test_evaluate_hand_tally(tiny_state, tiny_episode):
    _, base_test, _ = tiny_episode
    sub = FeatureSet(tokens=base_test.tokens[:10].copy(),
                     labels=base_test.labels[:10].copy(),
                     text_embeddings=base_test.text_embeddings.copy())
    acc, per_class = split_accuracy(tiny_state, sub, use_trained_bank=True)
    ctx = make_eval_class_set(tiny_state, sub.text_embeddings, True)
    hits = 0
    per = {c: [0, 0] for c in range(sub.n_classes)}
    for i in range(10):
        pred, _ = predict(sub.tokens[i].astype(float), tiny_state, ctx)
        y = int(sub.labels[i])
        hits += pred == y
        per[y][1] += 1
        per[y][0] += pred == y
    assert abs(acc - 100.0 * hits / 10) < 1e-9
    for c in range(sub.n_classes):
        want = 100.0 * per[c][0] / per[c][1] if per[c][1] else 0.0
        assert abs(per_class[c] - want) < 1e-9


def test_evaluate_metrics_invariant(tiny_state, tiny_episode):
    _, base_test, novel_test = tiny_episode
    m = evaluate(tiny_state, base_test, novel_test)
    assert min(m.base_acc, m.novel_acc) - 1e-9 <= m.harmonic
    assert m.harmonic <= max(m.base_acc, m.novel_acc) + 1e-9


def test_evaluate_empty_split_rejected(tiny_state, tiny_episode):
    _, base_test, _ = tiny_episode
    empty = FeatureSet(tokens=np.zeros((0, base_test.n_tok, base_test.d), np.float32),
                       labels=np.zeros(0, np.uint32),
                       text_embeddings=base_test.text_embeddings.copy())
    with pytest.raises(EmptySplit):
        evaluate(tiny_state, empty, base_test)


# --- checkpointing -----------------------------------------------------------------

def test_save_load_round_trip(tiny_state, tmp_path):
    p1 = tmp_path / "state.ckpt"
    save_state(tiny_state, p1)
    loaded = load_state(p1)
    p2 = tmp_path / "state2.ckpt"
    save_state(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == tiny_state.config
    assert loaded.history == tiny_state.history


def test_loaded_state_predicts_identically(tiny_state, tiny_episode, tmp_path):
    _, base_test, _ = tiny_episode
    path = tmp_path / "state.ckpt"
    save_state(tiny_state, path)
    loaded = load_state(path)
    ctx_a = make_eval_class_set(tiny_state, base_test.text_embeddings, True)
    ctx_b = make_eval_class_set(loaded, base_test.text_embeddings, True)
    n = min(20, base_test.n_items)
    preds_a, _ = predict_batch(base_test.tokens[:n], tiny_state, ctx_a)
    preds_b, _ = predict_batch(base_test.tokens[:n], loaded, ctx_b)
    assert np.array_equal(preds_a, preds_b)


def test_load_rejects_bad_magic(tiny_state, tmp_path):
    path = tmp_path / "state.ckpt"
    save_state(tiny_state, path)
    raw = bytearray(path.read_bytes())
    raw[:8] = b"WRONGMAG"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        load_state(path)


def test_load_rejects_version_mismatch(tiny_state, tmp_path):
    path = tmp_path / "state.ckpt"
    save_state(tiny_state, path)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_state(path)


def test_load_rejects_truncation(tiny_state, tmp_path):
    path = tmp_path / "state.ckpt"
    save_state(tiny_state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(TruncatedFile):
        load_state(path)


# --- benchmark -----------------------------------------------------------------

def test_bench_requires_minimum_workload(tiny_state):
    with pytest.raises(WorkloadTooSmall):
        bench_throughput(tiny_state, n_items=50, k_list=[2])


def test_bench_report_contract(tiny_state):
    rep = bench_throughput(tiny_state, n_items=120, k_list=[2, 4], reps=2, warmup=1)
    assert {r.k for r in rep.rows} == {2, 4}
    assert rep.full_row.k == tiny_state.config.n_tok
    for row in rep.rows + [rep.full_row]:
        assert row.items_per_sec > 0
        assert len(row.rep_times) == 2
    assert rep.trainable_param_count == tiny_state.trainable_params
    # identical seeds give identical accuracy numbers
    rep2 = bench_throughput(tiny_state, n_items=120, k_list=[2, 4], reps=2, warmup=1)
    assert [r.accuracy for r in rep2.rows] == [r.accuracy for r in rep.rows]


def test_bench_tiny_k_accuracy_not_better(tiny_state):
    cfg = tiny_state.config
    rep = bench_throughput(tiny_state, n_items=120, k_list=[1, cfg.k_act], reps=1)
    assert rep.row_at(1).accuracy <= rep.row_at(cfg.k_act).accuracy + 1e-9


def test_flop_count_strictly_increasing(tiny_state):
    cfg = tiny_state.config
    flops = [flop_count_inference(cfg, k) for k in range(1, cfg.n_tok + 1)]
    assert all(b > a for a, b in zip(flops, flops[1:]))


def test_flop_count_full_exceeds_pruned():
    cfg = RunConfig()
    assert flop_count_inference(cfg, 32) > flop_count_inference(cfg, 8)
