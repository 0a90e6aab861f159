"""Retrieval, salience, and embedding-export tests."""

import numpy as np
import pytest

from groundsent.data import build_vocab, gen_synthetic, numericalize
from groundsent.evaluation import (
    embed_lines, mean_token_nll, rank_of, retrieval_eval, salience, salient_hit_rate,
)
from groundsent.training import TrainConfig, init_params

TINY = dict(d_cell=4, d_a=3, n_a=2, d_e=4, d_img=5, batch_size=3, epochs=1, seed=0)


def setup_model(n=16, seed=0, v_content=8):
    config = TrainConfig(objective="cap2img", **{**TINY, "seed": seed})
    corpus = gen_synthetic(n, v_content, config.d_img, seed=seed)
    vocab = build_vocab(corpus, 1)
    params = init_params(config, vocab.size)
    return config, corpus, vocab, params, numericalize(corpus, vocab)


# ---------------------------------------------------------------------------
# retrieval


def test_retrieval_rejects_tiny_pool():
    _, _, _, params, samples = setup_model(n=16)
    with pytest.raises(ValueError):
        retrieval_eval(params, samples[:1])


def test_rank_of_breaks_ties_by_corpus_order():
    scores = np.array([0.5, 0.9, 0.5, 0.5])
    assert rank_of(scores, 0) == 2   # one strictly better, no earlier ties
    assert rank_of(scores, 2) == 3   # index 0 ties and comes earlier
    assert rank_of(scores, 1) == 1


def test_retrieval_matches_brute_force_ranker():
    # independent similarity routine + explicit sort, pool of 16
    from groundsent.autodiff import Matrix
    from groundsent.evaluation import encode_reps
    from groundsent.grounding import project

    _, _, _, params, samples = setup_model(n=16)
    s2i, i2s = retrieval_eval(params, samples)

    preds = project(params.projection, Matrix(encode_reps(params, samples))).data
    images = np.vstack([s.img for s in samples])

    def cos(a, b):
        # same epsilon guard as the scoring contract: an untrained head can
        # emit an exactly-zero prediction (dead ReLU layer)
        return float(a @ b) / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-8)

    ranks = []
    for k in range(len(samples)):
        sims = [cos(preds[k], images[j]) for j in range(len(samples))]
        order = sorted(range(len(samples)), key=lambda j: (-sims[j], j))
        ranks.append(order.index(k) + 1)
    assert float(np.median(ranks)) == s2i.median_rank
    assert float(np.mean(np.array(ranks) <= 1)) == s2i.recall_at_1
    assert float(np.mean(np.array(ranks) <= 5)) == s2i.recall_at_5

    ranks_t = []
    for j in range(len(samples)):
        sims = [cos(preds[k], images[j]) for k in range(len(samples))]
        order = sorted(range(len(samples)), key=lambda k: (-sims[k], k))
        ranks_t.append(order.index(j) + 1)
    assert float(np.median(ranks_t)) == i2s.median_rank


def test_untrained_retrieval_is_at_chance():
    # recall@1 of an untrained model over a 128 pool should sit near 1/128;
    # allow 3 sigma of binomial noise around chance
    _, _, _, params, samples = setup_model(n=128, v_content=64, seed=1)
    s2i, _ = retrieval_eval(params, samples)
    p = 1.0 / 128
    sigma = np.sqrt(p * (1 - p) / 128)
    assert s2i.recall_at_1 <= p + 3 * sigma
    assert s2i.recall_at_5 <= 5 * p + 3 * np.sqrt(5 * p * (1 - 5 * p) / 128)


def test_retrieval_report_invariants():
    _, _, _, params, samples = setup_model(n=32)
    for report in retrieval_eval(params, samples):
        assert report.recall_at_1 <= report.recall_at_5 <= report.recall_at_10 <= 1.0
        assert 1.0 <= report.median_rank <= report.pool_size
        assert report.pool_size == 32


def test_retrieval_invariant_to_pool_shuffling():
    _, _, _, params, samples = setup_model(n=24)
    s2i_a, _ = retrieval_eval(params, samples)
    perm = np.random.default_rng(5).permutation(len(samples))
    s2i_b, _ = retrieval_eval(params, [samples[i] for i in perm])
    assert s2i_a.recall_at_1 == s2i_b.recall_at_1
    assert s2i_a.median_rank == s2i_b.median_rank


# ---------------------------------------------------------------------------
# salience


def test_salience_uniform_when_attn_proj_zero():
    _, corpus, vocab, params, _ = setup_model()
    params.encoder.attn_proj.data[:] = 0.0
    rec = salience(params, vocab, corpus.records[0].src)
    t = len(rec.tokens)
    np.testing.assert_allclose(rec.attention, np.full_like(rec.attention, 1.0 / t), atol=1e-9)
    np.testing.assert_allclose(rec.pooled, np.full(t, 1.0 / t), atol=1e-9)


def test_salience_single_token_is_one():
    _, corpus, vocab, params, _ = setup_model()
    token = corpus.records[0].salient
    rec = salience(params, vocab, token)
    assert rec.tokens == [token]
    np.testing.assert_allclose(rec.pooled, [1.0], atol=1e-12)


def test_salience_rows_are_distributions_over_real_tokens():
    _, corpus, vocab, params, _ = setup_model()
    rec = salience(params, vocab, corpus.records[1].src)
    assert rec.attention.shape == (2, len(rec.tokens))
    np.testing.assert_allclose(rec.attention.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(rec.pooled > 0.0) and np.all(rec.pooled <= 1.0)


def test_salience_rejects_fully_oov_sentence():
    _, _, vocab, params, _ = setup_model()
    with pytest.raises(ValueError):
        salience(params, vocab, "zzz qqq")


def test_salient_hit_rate_untrained_is_near_chance():
    _, corpus, vocab, params, _ = setup_model(n=100, v_content=64, seed=2)
    rate = salient_hit_rate(params, vocab, corpus.records)
    assert rate <= 0.5  # ~1/T in expectation, far below a trained model


# ---------------------------------------------------------------------------
# embeddings export


def test_embed_lines_empty_input():
    _, _, vocab, params, _ = setup_model()
    out = embed_lines(params, vocab, [])
    assert out.shape == (0, 8)


def test_embed_lines_identical_lines_identical_vectors():
    _, corpus, vocab, params, _ = setup_model()
    line = corpus.records[0].src
    out = embed_lines(params, vocab, [line, corpus.records[1].src, line])
    np.testing.assert_array_equal(out[0], out[2])
    assert out.shape == (3, 2 * 4)


def test_embed_lines_context_independent():
    _, corpus, vocab, params, _ = setup_model()
    a = corpus.records[0].src
    alone = embed_lines(params, vocab, [a])
    together = embed_lines(params, vocab, [corpus.records[2].src, a])
    np.testing.assert_array_equal(alone[0], together[1])


# ---------------------------------------------------------------------------
# NLL evaluation


def test_mean_token_nll_zero_logits_is_log_vocab():
    _, corpus, vocab, params, samples = setup_model()
    params.decoder.out_w.data[:] = 0.0
    params.decoder.out_b.data[:] = 0.0
    nll = mean_token_nll(params, samples)
    assert nll == pytest.approx(np.log(vocab.size), abs=1e-9)
