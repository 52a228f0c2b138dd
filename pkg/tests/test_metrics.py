"""Evaluation metrics: likelihood scoring, paired accuracy, grammar
perplexity, attribute similarity, Fréchet distance, consistency scoring."""
import math

import numpy as np
import pytest
import torch

import flowlm
from flowlm.corpus import make_consistency_pairs, make_minimal_pairs
from flowlm.errors import ContractViolation
from flowlm.metrics import (EvalReport, acoustic_consistency_score,
                            consistency_accuracy, corpus_ppl,
                            frechet_distance, gen_ppl, held_out_ce,
                            paired_accuracy, sequence_logprob,
                            speaker_similarity)
from flowlm.model import FlowSLM, ModelConfig
from flowlm.sampler import Continuation


MODEL_CFG = ModelConfig(input_mode="vector", d_model=32, n_layers=2, n_heads=2,
                        k_future=2, cfm_enabled=True, cfm_blocks=1,
                        cfm_hidden=32, vocab_size=64, embed_dim=32)


@pytest.fixture(scope="module")
def model():
    return FlowSLM(MODEL_CFG, init_seed=0)


def as_continuations(utterances):
    return [Continuation(tokens=u.tokens, embeddings=u.embeddings,
                         prompt_len=0, stopped_by="eos") for u in utterances]


# ---------------------------------------------------------------------------
# sequence_logprob
# ---------------------------------------------------------------------------

def test_uniform_model_logprob_analytic(small_corpus):
    m = FlowSLM(MODEL_CFG, init_seed=0)
    with torch.no_grad():
        m.sem_head.weight.zero_()
        m.sem_head.bias.zero_()
    u = small_corpus[0]
    assert sequence_logprob(m, u) == pytest.approx(-u.length * math.log(64), rel=1e-6)


def test_logprob_decreases_with_extra_frame(model, small_corpus):
    u = small_corpus[0]
    shorter = flowlm.decode(u.tokens[:-1], u.embeddings[:-1], u.attribute)
    assert sequence_logprob(model, u) < sequence_logprob(model, shorter)


def test_logprob_deterministic(model, small_corpus):
    u = small_corpus[1]
    assert sequence_logprob(model, u) == sequence_logprob(model, u)


def test_logprob_mode_mismatch(model, small_corpus):
    with pytest.raises(ContractViolation):
        sequence_logprob(model, small_corpus[0], mode="token")


def test_logprob_ignores_lookahead_heads(model, small_corpus):
    u = small_corpus[2]
    before = sequence_logprob(model, u)
    with torch.no_grad():  # head rows for lookahead live after the first V
        model.sem_head.weight[64:].add_(torch.randn_like(model.sem_head.weight[64:]))
        model.sem_head.bias[64:].add_(1.0)
    assert sequence_logprob(model, u) == before


# ---------------------------------------------------------------------------
# paired accuracy
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lex_pairs(grammar, render):
    return make_minimal_pairs(grammar, render, "lexical", 400, seed=1234)


def test_grammar_oracle_scores_perfectly(grammar, lex_pairs):
    acc = paired_accuracy(lambda u: flowlm.grammar_logprob(u.tokens, grammar),
                          lex_pairs)
    assert acc == 1.0


def test_coin_scorer_near_chance(lex_pairs):
    rng = np.random.default_rng(0)
    acc = paired_accuracy(lambda u: float(rng.standard_normal()), lex_pairs)
    assert 0.45 <= acc <= 0.55


def test_untrained_model_near_chance_on_syntax(grammar, render, model):
    pairs = make_minimal_pairs(grammar, render, "syntactic", 400, seed=99)
    acc = paired_accuracy(model, pairs)
    assert 0.4 <= acc <= 0.6


def test_label_swap_flips_accuracy(grammar, lex_pairs):
    scorer = lambda u: flowlm.grammar_logprob(u.tokens, grammar)
    acc = paired_accuracy(scorer, lex_pairs)
    swapped = flowlm.MinimalPairSet(
        kind="lexical", pairs=[(n, p) for p, n in lex_pairs.pairs])
    assert paired_accuracy(scorer, swapped) == pytest.approx(1.0 - acc)


def test_pair_order_invariance(grammar, lex_pairs):
    scorer = lambda u: flowlm.grammar_logprob(u.tokens, grammar)
    reordered = flowlm.MinimalPairSet(kind="lexical",
                                      pairs=list(reversed(lex_pairs.pairs)))
    assert paired_accuracy(scorer, reordered) == paired_accuracy(scorer, lex_pairs)


def test_constant_scorer_all_ties():
    pairs = flowlm.MinimalPairSet(kind="lexical", pairs=[(None, None)] * 10)
    assert paired_accuracy(lambda u: 0.0, pairs) == 0.5


def test_empty_pairs_rejected(model):
    with pytest.raises(ContractViolation):
        paired_accuracy(model, flowlm.MinimalPairSet(kind="lexical", pairs=[]))


# ---------------------------------------------------------------------------
# grammar perplexity
# ---------------------------------------------------------------------------

def test_gen_ppl_matches_corpus_ppl_on_same_set(grammar, small_corpus):
    assert gen_ppl(as_continuations(small_corpus), grammar) == pytest.approx(
        corpus_ppl(small_corpus, grammar))


def test_gen_ppl_verbatim_heldout_close_to_corpus(grammar, render):
    ref = flowlm.generate_corpus(grammar, render, 120, seed=5000)
    other = flowlm.generate_corpus(grammar, render, 120, seed=9000)
    a = gen_ppl(as_continuations(other), grammar)
    b = corpus_ppl(ref, grammar)
    assert abs(a - b) / b < 0.1


def test_gen_ppl_random_streams_blow_up(grammar, small_corpus):
    rng = np.random.default_rng(0)
    junk = [Continuation(tokens=rng.integers(0, 64, size=30),
                         embeddings=np.zeros((30, 4), dtype=np.float32),
                         prompt_len=0, stopped_by="max_frames")
            for _ in range(40)]
    assert gen_ppl(junk, grammar) >= 5 * corpus_ppl(small_corpus, grammar)


def test_gen_ppl_order_invariant(grammar, small_corpus):
    conts = as_continuations(small_corpus)
    assert gen_ppl(conts, grammar) == pytest.approx(
        gen_ppl(list(reversed(conts)), grammar), rel=1e-12)


def test_gen_ppl_empty_rejected(grammar):
    with pytest.raises(ContractViolation):
        gen_ppl([], grammar)


# ---------------------------------------------------------------------------
# speaker similarity
# ---------------------------------------------------------------------------

def test_speaker_similarity_self_is_one(render, small_corpus):
    u = small_corpus[0]
    sim = speaker_similarity(u.embeddings, u.embeddings, render)
    assert sim == pytest.approx(1.0, abs=1e-6)


def test_speaker_similarity_scale_invariant(render, small_corpus):
    u = small_corpus[0]
    v = small_corpus[1]
    a = speaker_similarity(u.embeddings, v.embeddings, render)
    b = speaker_similarity(u.embeddings, 2.0 * v.embeddings, render)
    assert a == pytest.approx(b, abs=1e-9)


def test_orthogonal_attribute_low_similarity(grammar, render):
    """Different orthogonal speakers: |cosine| below 0.3 at the 95th pct."""
    from flowlm.corpus import render_tokens, sample_plan
    sims = []
    for i in range(100):
        rng = np.random.default_rng(i)
        t1 = sample_plan(grammar, rng).assemble(grammar)
        t2 = sample_plan(grammar, rng).assemble(grammar)
        x1 = render_tokens(t1, render.speaker_pool[0], render,
                           np.random.default_rng(2 * i))
        x2 = render_tokens(t2, render.speaker_pool[3], render,
                           np.random.default_rng(2 * i + 1))
        sims.append(abs(speaker_similarity(x1, x2, render)))
    assert np.percentile(sims, 95) < 0.3


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------

def test_frechet_identical_sets_zero():
    x = np.random.default_rng(0).standard_normal((500, 6))
    assert frechet_distance(x, x) <= 1e-8


def test_frechet_mean_shift_closed_form():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((10 ** 5, 4))
    b = rng.standard_normal((10 ** 5, 4)) + np.array([1.0, 0, 0, 0])
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.05)


def test_frechet_scalar_variance_mismatch():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((10 ** 5, 1))
    b = 2.0 * rng.standard_normal((10 ** 5, 1))
    # (sigma_a - sigma_b)^2 = (1 - 2)^2 = 1
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.05)


def test_frechet_symmetric_and_order_invariant():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((300, 5))
    b = rng.standard_normal((300, 5)) * 1.3 + 0.2
    d1, d2 = frechet_distance(a, b), frechet_distance(b, a)
    assert abs(d1 - d2) <= 1e-8
    perm = rng.permutation(300)
    assert frechet_distance(a[perm], b) == pytest.approx(d1, abs=1e-10)


def test_frechet_analytic_gaussian_pair():
    """Against the closed form for diagonal Gaussians:
    |mu|^2 + sum (s_a + s_b - 2 sqrt(s_a s_b))."""
    rng = np.random.default_rng(4)
    a = rng.standard_normal((2 * 10 ** 5, 2)) * np.array([1.0, 2.0])
    b = rng.standard_normal((2 * 10 ** 5, 2)) * np.array([0.5, 1.0]) + 0.3
    expected = (2 * 0.09
                + (1 + 0.25 - 2 * 0.5)
                + (4 + 1 - 2 * 2.0))
    assert frechet_distance(a, b) == pytest.approx(expected, abs=0.05)


def test_frechet_insufficient_samples():
    with pytest.raises(ContractViolation):
        frechet_distance(np.zeros((4, 4)), np.zeros((10, 4)))


# ---------------------------------------------------------------------------
# acoustic consistency
# ---------------------------------------------------------------------------

def test_identical_pair_is_tie(model, small_corpus):
    u = small_corpus[0]
    g = torch.Generator().manual_seed(0)
    assert acoustic_consistency_score(model, u, u, g) == 0.5


def test_token_mismatch_rejected(model, small_corpus):
    with pytest.raises(ContractViolation):
        acoustic_consistency_score(model, small_corpus[0], small_corpus[1],
                                   torch.Generator())


def test_untrained_consistency_near_chance(grammar, render, model):
    pairs = make_consistency_pairs(grammar, render, 200, seed=77)
    acc = consistency_accuracy(model, pairs, seed=0)
    assert 0.4 <= acc <= 0.6


# ---------------------------------------------------------------------------
# held-out CE and reports
# ---------------------------------------------------------------------------

def test_held_out_ce_matches_loss_forward(small_corpus):
    cfg = ModelConfig(**{**MODEL_CFG.to_dict(), "cfm_enabled": False})
    m = FlowSLM(cfg, init_seed=1)
    batch = small_corpus[:8]
    tokens, embeds, lengths = flowlm.collate(batch)
    out = m.loss_forward(tokens, embeds, lengths, torch.Generator().manual_seed(0))
    assert held_out_ce(m, batch, batch_size=8) == pytest.approx(
        out.sem_loss.item(), rel=1e-6)


def test_eval_report_roundtrip(tmp_path):
    rep = EvalReport(config_hash="abc", seed=7)
    rep.add("lexical_acc", 0.93, 400)
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.metrics == rep.metrics and back.counts == rep.counts
    assert back.config_hash == "abc" and back.seed == 7


def test_eval_report_validates_counts():
    rep = EvalReport()
    rep.metrics["x"] = 1.0
    with pytest.raises(ContractViolation):
        rep.to_json()
