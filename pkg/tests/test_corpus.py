"""Synthetic corpus: grammar structure, rendering identities, probes,
attribute recovery, minimal pairs, and the exact grammar scorer."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import flowlm
from flowlm.corpus import (EOS_ID, SILENCE_ID, LAMBDA_TEMPLATE, LAMBDA_WORD,
                           Q_FREE, Q_NOISE, GrammarSpec, RenderSpec,
                           Utterance, _split_runs, generate_corpus,
                           grammar_logprob, make_consistency_pairs,
                           make_default_grammar, make_minimal_pairs,
                           matches_grammar, recover_attribute, render_tokens,
                           sample_plan)
from flowlm.errors import ConfigurationError, ContractViolation


# ---------------------------------------------------------------------------
# Grammar construction and sampling
# ---------------------------------------------------------------------------

def test_default_grammar_is_valid(grammar):
    assert grammar.vocab_size == 64
    assert len(grammar.lexicon) == 40
    for toks in grammar.lexicon.values():
        assert 2 <= len(toks) <= 4
        assert all(t >= 2 for t in toks)
    assigned = sorted(w for ws in grammar.word_classes.values() for w in ws)
    assert assigned == sorted(grammar.lexicon)
    for tpl in grammar.templates:
        assert all(c in grammar.word_classes for c in tpl)


def test_vocab_exhausted_by_reserved_ids():
    with pytest.raises(ContractViolation):
        make_default_grammar(vocab_size=1)
    with pytest.raises(ContractViolation):
        make_default_grammar(vocab_size=3)


def test_grammar_rejects_reserved_ids_in_words():
    with pytest.raises(ContractViolation):
        GrammarSpec(vocab_size=8, lexicon={0: (0, 3)},
                    word_classes={"A": (0,)}, templates=(("A",),), seed=0)


def test_generated_utterances_parse(grammar, render, small_corpus):
    for u in small_corpus:
        assert matches_grammar(u.tokens, grammar)
        assert u.tokens[-1] == EOS_ID
        assert u.length == len(u.embeddings)


def test_generation_deterministic(grammar, render):
    a = generate_corpus(grammar, render, 6, seed=5)
    b = generate_corpus(grammar, render, 6, seed=5)
    for ua, ub in zip(a, b):
        assert np.array_equal(ua.tokens, ub.tokens)
        assert np.array_equal(ua.embeddings, ub.embeddings)
        assert np.array_equal(ua.attribute, ub.attribute)
    c = generate_corpus(grammar, render, 6, seed=6)
    assert any(not np.array_equal(ua.tokens, uc.tokens) for ua, uc in zip(a, c))


def test_per_utterance_seed_stream(grammar, render):
    """Utterance i only depends on seed + i, so shards can be cut anywhere."""
    whole = generate_corpus(grammar, render, 8, seed=42)
    tail = generate_corpus(grammar, render, 3, seed=42 + 5)
    for ua, ub in zip(whole[5:], tail):
        assert np.array_equal(ua.tokens, ub.tokens)
        assert np.array_equal(ua.embeddings, ub.embeddings)


def test_encode_decode_roundtrip(small_corpus):
    u = small_corpus[0]
    toks, emb = flowlm.encode(u)
    assert toks is u.tokens and emb is u.embeddings
    again = flowlm.encode(flowlm.decode(toks, emb))
    assert np.array_equal(again[0], toks)
    assert np.array_equal(again[1], emb)


def test_word_token_stream_contains_lexicon_sequence(grammar, render):
    rng = np.random.default_rng(3)
    plan = sample_plan(grammar, rng)
    toks = plan.assemble(grammar)
    word = grammar.lexicon[plan.word_ids[0]]
    s = "".join(chr(t) for t in toks)
    assert "".join(chr(t) for t in word) in s


def test_utterance_length_mismatch_rejected():
    with pytest.raises(ContractViolation):
        Utterance(np.array([2, 3, 1]), np.zeros((2, 4), dtype=np.float32),
                  np.zeros(2, dtype=np.float32))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def test_render_equation_noiseless(grammar):
    r = RenderSpec(seed=12, vocab_size=grammar.vocab_size,
                   leak_beta=0.0, smooth_alpha=0.0, noise_sigma=0.0)
    u = generate_corpus(grammar, r, 1, seed=9)[0]
    e = r.token_codebook[u.tokens]
    nxt = np.concatenate([u.tokens[1:], [EOS_ID]])
    expected = (e @ r.mix_token.T
                + 0.0 * (r.token_codebook[nxt] @ r.mix_leak.T)
                + u.attribute.astype(np.float64) @ r.attr_projection)
    assert np.allclose(u.embeddings, expected, atol=1e-5)


def test_noiseless_probe_recovers_tokens_exactly(grammar, probe):
    r = RenderSpec(seed=12, vocab_size=grammar.vocab_size,
                   leak_beta=0.0, smooth_alpha=0.0, noise_sigma=0.0)
    corpus = generate_corpus(grammar, r, 60, seed=9)
    frames = np.concatenate([u.embeddings for u in corpus])
    labels = np.concatenate([u.tokens for u in corpus])
    assert probe(frames, labels, r.token_codebook) == 1.0


def test_leak_probe_predicts_next_token(grammar, render, probe):
    corpus = generate_corpus(grammar, render, 60, seed=9)
    frames = np.concatenate([u.embeddings[:-1] for u in corpus])
    labels = np.concatenate([u.tokens[1:] for u in corpus])
    acc = probe(frames, labels, render.token_codebook)
    assert acc > 3.0 / render.vocab_size * 3  # far above chance


def test_leak_monotonicity(grammar, probe):
    """Next-token probe accuracy is non-decreasing in the leak weight,
    averaged over 5 seeds."""
    means = []
    for beta in (0.0, 0.25, 0.5):
        accs = []
        for seed in range(5):
            r = RenderSpec(seed=12, vocab_size=grammar.vocab_size,
                           leak_beta=beta)
            corpus = generate_corpus(grammar, r, 40, seed=1000 + seed)
            frames = np.concatenate([u.embeddings[:-1] for u in corpus])
            labels = np.concatenate([u.tokens[1:] for u in corpus])
            accs.append(probe(frames, labels, r.token_codebook))
        means.append(np.mean(accs))
    assert means[0] <= means[1] <= means[2]


def test_last_frame_leak_uses_eos_row(grammar):
    r = RenderSpec(seed=12, vocab_size=grammar.vocab_size,
                   smooth_alpha=0.0, noise_sigma=0.0)
    toks = np.array([2, 3, EOS_ID])
    attr = np.zeros(r.attr_dim)
    x = render_tokens(toks, attr, r, np.random.default_rng(0))
    leak_part = x[-1] - r.token_codebook[EOS_ID] @ r.mix_token.T
    expected = r.leak_beta * r.token_codebook[EOS_ID] @ r.mix_leak.T
    assert np.allclose(leak_part, expected, atol=1e-6)


def test_render_spec_validation():
    with pytest.raises(ConfigurationError):
        RenderSpec(embed_dim=16, token_dim=10, attr_dim=8)  # subspaces do not fit
    with pytest.raises(ConfigurationError):
        RenderSpec(n_speakers=20, attr_dim=8)
    with pytest.raises(ContractViolation):
        RenderSpec(smooth_alpha=1.0)


def test_render_params_roundtrip(render):
    clone = RenderSpec.from_params(render.params())
    assert np.array_equal(clone.token_codebook, render.token_codebook)
    assert np.array_equal(clone.attr_projection, render.attr_projection)
    assert np.array_equal(clone.speaker_pool, render.speaker_pool)


# ---------------------------------------------------------------------------
# Attribute recovery
# ---------------------------------------------------------------------------

def test_recover_attribute_exact_noiseless(grammar):
    r = RenderSpec(seed=12, vocab_size=grammar.vocab_size, noise_sigma=0.0)
    u = generate_corpus(grammar, r, 1, seed=3)[0]
    est = recover_attribute(u.embeddings, r)
    cos = est @ u.attribute / (np.linalg.norm(est) * np.linalg.norm(u.attribute))
    assert cos >= 0.999


def test_recover_attribute_permutation_invariant(grammar, render, small_corpus):
    u = small_corpus[0]
    est = recover_attribute(u.embeddings, render)
    shuffled = u.embeddings[np.random.default_rng(0).permutation(u.length)]
    assert np.allclose(recover_attribute(shuffled, render), est, atol=1e-10)


def test_recover_attribute_noise_floor(grammar, render):
    """Zero-attribute noise frames recover to a small vector: 95th percentile
    of the norm stays under a tenth of the typical attribute norm."""
    typical = float(np.linalg.norm(render.speaker_pool[0]))
    norms = []
    for trial in range(1000):
        rng = np.random.default_rng(trial)
        toks = np.full(60, SILENCE_ID)
        x = render_tokens(toks, np.zeros(render.attr_dim), render, rng)
        norms.append(np.linalg.norm(recover_attribute(x, render)))
    assert np.percentile(norms, 95) <= 0.1 * typical


def test_attribute_separability(grammar, render):
    """Same-speaker recovered cosine > 0.9; different-speaker below 0.3."""
    corpus = generate_corpus(grammar, render, 60, seed=77)
    recovered = [recover_attribute(u.embeddings, render) for u in corpus]
    same, diff = [], []
    for i in range(len(corpus)):
        for j in range(i + 1, len(corpus)):
            a, b = recovered[i], recovered[j]
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            (same if corpus[i].speaker == corpus[j].speaker else diff).append(cos)
    assert np.min(same) > 0.9
    assert np.percentile(np.abs(diff), 95) < 0.3


def test_recover_attribute_needs_frames(render):
    with pytest.raises(ContractViolation):
        recover_attribute(np.zeros((3, render.embed_dim)), render)


def test_same_attribute_high_projection_cosine(grammar):
    r = RenderSpec(seed=12, vocab_size=grammar.vocab_size, noise_sigma=0.0)
    a = r.speaker_pool[2]
    rng = np.random.default_rng(5)
    t1 = sample_plan(grammar, rng).assemble(grammar)
    t2 = sample_plan(grammar, rng).assemble(grammar)
    e1 = recover_attribute(render_tokens(t1, a, r, np.random.default_rng(1)), r)
    e2 = recover_attribute(render_tokens(t2, a, r, np.random.default_rng(2)), r)
    cos = e1 @ e2 / (np.linalg.norm(e1) * np.linalg.norm(e2))
    assert cos >= 0.99


# ---------------------------------------------------------------------------
# Minimal pairs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lexical_pairs(grammar, render):
    return make_minimal_pairs(grammar, render, "lexical", 40, seed=500)


@pytest.fixture(scope="module")
def syntactic_pairs(grammar, render):
    return make_minimal_pairs(grammar, render, "syntactic", 40, seed=600)


def test_lexical_pairs_structure(grammar, lexical_pairs):
    inv = set(grammar.inverse_lexicon)
    for pos, neg in lexical_pairs.pairs:
        assert pos.length == neg.length
        assert matches_grammar(pos.tokens, grammar)
        diff = np.nonzero(pos.tokens != neg.tokens)[0]
        assert len(diff) == 1  # single-token corruption
        # the corrupted word is absent from the lexicon
        lead, words, seps, trail = _split_runs(list(neg.tokens[:-1]))
        bad = [w for w in words if w not in inv]
        assert len(bad) == 1


def test_syntactic_pairs_structure(grammar, syntactic_pairs):
    for pos, neg in syntactic_pairs.pairs:
        assert pos.length == neg.length
        assert matches_grammar(pos.tokens, grammar)
        assert not matches_grammar(neg.tokens, grammar)
        # same word multiset, order violated
        _, wp, _, _ = _split_runs(list(pos.tokens[:-1]))
        _, wn, _, _ = _split_runs(list(neg.tokens[:-1]))
        assert sorted(wp) == sorted(wn) and wp != wn


def test_negatives_are_rerendered_consistently(grammar, render, lexical_pairs):
    """Embeddings must match the corrupted tokens (token/embedding
    consistency), sharing the positive's noise draws."""
    pos, neg = lexical_pairs.pairs[0]
    # frames before the corruption's leak reach are identical
    diff = int(np.nonzero(pos.tokens != neg.tokens)[0][0])
    if diff >= 2:
        assert np.allclose(pos.embeddings[:diff - 1], neg.embeddings[:diff - 1])
    # the corrupted frame differs exactly by the codebook swap
    delta = neg.embeddings[diff].astype(np.float64) - pos.embeddings[diff]
    expected = (render.token_codebook[neg.tokens[diff]]
                - render.token_codebook[pos.tokens[diff]]) @ render.mix_token.T
    assert np.allclose(delta, expected, atol=1e-5)


def test_empty_pair_set():
    g = flowlm.make_default_grammar(seed=11)
    r = RenderSpec(seed=12, vocab_size=g.vocab_size)
    assert make_minimal_pairs(g, r, "lexical", 0, seed=0).pairs == []


def test_unknown_pair_kind(grammar, render):
    with pytest.raises(ContractViolation):
        make_minimal_pairs(grammar, render, "prosodic", 1, seed=0)


def test_consistency_pairs(grammar, render):
    pairs = make_consistency_pairs(grammar, render, 5, seed=800)
    for cons, incons in pairs:
        assert np.array_equal(cons.tokens, incons.tokens)
        assert not np.allclose(cons.embeddings, incons.embeddings)
        # first frames identical (switch happens mid-utterance)
        assert np.allclose(cons.embeddings[0], incons.embeddings[0])


# ---------------------------------------------------------------------------
# Grammar log-probability
# ---------------------------------------------------------------------------

def geom0_lp(j, p):
    return j * math.log(1 - p) + math.log(p)


def test_toy_grammar_hand_computed(toy_grammar):
    g = toy_grammar
    v = g.vocab_size - 1
    stream = [2, 3, 1]  # word (2,3), no silences, EOS
    noise = math.log(Q_NOISE) * 1 + math.log(1 - Q_NOISE) + 2 * math.log(1 / v)
    slot_hit = np.logaddexp(math.log((1 - LAMBDA_WORD) / 1),
                            math.log(LAMBDA_WORD) + noise)
    slot_miss = math.log(LAMBDA_WORD) + noise
    tpl = math.log(1 - LAMBDA_TEMPLATE) + np.logaddexp(
        math.log(0.5) + slot_hit, math.log(0.5) + slot_miss)
    free_word = np.logaddexp(math.log((1 - LAMBDA_WORD) / 2),
                             math.log(LAMBDA_WORD) + noise)
    free = (math.log(LAMBDA_TEMPLATE) + math.log(1 - Q_FREE)
            + math.log(Q_FREE) + free_word)
    expected = geom0_lp(0, g.p_edge) + geom0_lp(0, g.p_edge) + np.logaddexp(tpl, free)
    assert grammar_logprob(stream, g) == pytest.approx(float(expected), abs=1e-12)
    # close to the ideal log(1/2) once structure factors are removed
    assert grammar_logprob(stream, g) == pytest.approx(
        math.log(0.5) + 2 * math.log(g.p_edge), abs=1e-4)


def test_empty_sequence_scores_immediate_eos(toy_grammar):
    g = toy_grammar
    expected = (2 * math.log(g.p_edge)
                + math.log(LAMBDA_TEMPLATE) + math.log(1 - Q_FREE))
    assert grammar_logprob([], g) == pytest.approx(expected, abs=1e-12)


def test_real_word_beats_nonword(grammar, render):
    pairs = make_minimal_pairs(grammar, render, "lexical", 30, seed=900)
    for pos, neg in pairs.pairs:
        assert grammar_logprob(pos.tokens, grammar) > grammar_logprob(neg.tokens, grammar)


def test_grammar_logprob_matches_sampling_frequency(toy_grammar):
    """Generator and scorer agree: empirical frequency of a specific stream
    approximates exp(logprob)."""
    g = toy_grammar
    target = (2, 3, 1)
    n = 40000
    hits = 0
    for i in range(n):
        toks = sample_plan(g, np.random.default_rng(i)).assemble(g)
        if tuple(toks) == target:
            hits += 1
    p_hat = hits / n
    p = math.exp(grammar_logprob(list(target), g))
    se = math.sqrt(p * (1 - p) / n)
    assert abs(p_hat - p) < 4 * se + 1e-4


def test_prefix_probability_dominates_completion(grammar, small_corpus):
    """P(prefix) must be >= P(full stream) and non-increasing in length."""
    u = small_corpus[0]
    full = grammar_logprob(u.tokens, grammar)
    prev = 0.0
    for cut in (1, 3, u.length // 2, u.length - 1):
        lp = grammar_logprob(u.tokens[:cut], grammar)
        assert lp >= full - 1e-9
        assert lp <= prev + 1e-9
        prev = lp


@given(st.lists(st.integers(0, 63), max_size=40))
@settings(max_examples=150, deadline=None)
def test_grammar_logprob_finite_everywhere(tokens):
    g = make_default_grammar(seed=11)
    lp = grammar_logprob(tokens, g)
    assert np.isfinite(lp) and lp <= 1e-9


def test_grammar_logprob_garbage_cases(grammar):
    for toks in ([1], [0, 0, 1], [0, 0], [1, 1, 1], [5], [5, 0, 1],
                 [2, 1, 3, 0, 1], list(range(2, 40))):
        assert np.isfinite(grammar_logprob(toks, grammar))


def test_split_runs():
    lead, words, seps, trail = _split_runs([0, 0, 5, 6, 0, 7, 8, 0, 0])
    assert lead == 2 and words == [(5, 6), (7, 8)] and seps == [1] and trail == 2
    lead, words, seps, trail = _split_runs([5, 6])
    assert lead == 0 and words == [(5, 6)] and seps == [] and trail == 0
    lead, words, seps, trail = _split_runs([0, 0])
    assert lead == 2 and words == []
