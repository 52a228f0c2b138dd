"""Synthetic speech-like corpus: a probabilistic template grammar over discrete
tokens, plus a linear renderer that turns token streams into continuous frame
embeddings carrying a per-utterance speaker attribute, slow correlated noise,
and a tunable "coarticulation leak" that mixes the *next* token's embedding
into the current frame.

Token id conventions: 0 is silence, 1 is end-of-sequence, word tokens use
ids >= 2. Words are separated by at least one silence frame, so a token
stream segments deterministically into words.

Everything is a pure function of (specs, integer seed); utterance i always
uses ``numpy.random.default_rng(seed + i)`` so generation can be sharded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, GenerationError
from .seeds import derive_seed

SILENCE_ID = 0
EOS_ID = 1
RESERVED_IDS = 2

# Smoothing constants of the scoring model (see grammar_logprob).
LAMBDA_WORD = 1e-6
LAMBDA_TEMPLATE = 1e-6
Q_NOISE = 0.5
Q_FREE = 0.5


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrammarSpec:
    """Template grammar: a lexicon of multi-token words partitioned into
    classes, sentence templates over those classes, and geometric silence-run
    lengths (leading/trailing runs may be empty, separators are >= 1 frame).
    """

    vocab_size: int
    lexicon: dict  # word id -> tuple of token ids
    word_classes: dict  # class name -> tuple of word ids
    templates: tuple  # tuple of tuples of class names
    seed: int
    p_edge: float = 0.5  # geometric parameter of leading/trailing silence
    p_sep: float = 0.5  # separator length is 1 + Geom0(p_sep)

    def __post_init__(self):
        if self.vocab_size < RESERVED_IDS + 1:
            raise ContractViolation(
                f"vocab_size={self.vocab_size}: reserved ids exhaust vocabulary")
        seen = set()
        for wid, toks in self.lexicon.items():
            toks = tuple(toks)
            if not 2 <= len(toks) <= 4:
                raise ContractViolation(f"word {wid} has length {len(toks)}, want 2-4")
            if any(t < RESERVED_IDS or t >= self.vocab_size for t in toks):
                raise ContractViolation(f"word {wid} uses reserved/out-of-range ids")
            if toks in seen:
                raise ContractViolation(f"duplicate token sequence for word {wid}")
            seen.add(toks)
        assigned = [w for ws in self.word_classes.values() for w in ws]
        if sorted(assigned) != sorted(self.lexicon):
            raise ContractViolation("word_classes must partition the lexicon")
        for name, ws in self.word_classes.items():
            if not ws:
                raise ContractViolation(f"class {name} is empty")
        for tpl in self.templates:
            if len(tpl) == 0:
                raise ContractViolation("empty template")
            for cls in tpl:
                if cls not in self.word_classes:
                    raise ContractViolation(f"template references unknown class {cls}")
        if not self.templates:
            raise ContractViolation("need at least one template")

    # derived lookups -------------------------------------------------------
    @property
    def inverse_lexicon(self) -> dict:
        return {tuple(toks): wid for wid, toks in self.lexicon.items()}

    @property
    def class_of_word(self) -> dict:
        return {w: name for name, ws in self.word_classes.items() for w in ws}


def make_default_grammar(vocab_size: int = 64, n_words: int = 40, seed: int = 0,
                         n_stems: int = 14) -> GrammarSpec:
    """Seed-derived grammar: a lexicon built from shared two-token stems
    (several words per stem, distinguished only by their suffix tokens), four
    classes and three templates of 4/6/8 slots. Stem sharing makes the
    within-word continuation after a stem genuinely word-dependent, so
    next-token structure is not reducible to bigrams. Typical utterances land
    around 20-60 frames once silences and EOS are added."""
    usable = vocab_size - RESERVED_IDS
    if usable < 2:
        raise ContractViolation(
            f"vocab_size={vocab_size}: reserved ids exhaust vocabulary")
    rng = np.random.default_rng(seed)
    words = {}
    seen = set()
    stems = []
    guard = 0
    while len(stems) < min(n_stems, n_words):
        guard += 1
        if guard > 1000 * n_stems:
            raise GenerationError("could not build unique stems; vocab too small")
        stem = tuple(int(t) for t in rng.integers(RESERVED_IDS, vocab_size, size=2))
        if stem not in stems:
            stems.append(stem)
    wid = 0
    guard = 0
    while wid < n_words:
        guard += 1
        if guard > 1000 * n_words:
            raise GenerationError("could not build a unique lexicon; vocab too small")
        stem = stems[wid % len(stems)]
        suffix_len = int(rng.integers(1, 3))
        suffix = tuple(int(t) for t in rng.integers(RESERVED_IDS, vocab_size,
                                                    size=suffix_len))
        toks = stem + suffix
        if toks in seen or any(w[:len(toks)] == toks or toks[:len(w)] == w
                               for w in seen):
            continue
        seen.add(toks)
        words[wid] = toks
        wid += 1
    ids = list(range(n_words))
    n_subj = max(1, int(round(n_words * 0.3)))
    n_verb = max(1, int(round(n_words * 0.25)))
    n_obj = max(1, int(round(n_words * 0.3)))
    classes = {
        "SUBJ": tuple(ids[:n_subj]),
        "VERB": tuple(ids[n_subj:n_subj + n_verb]),
        "OBJ": tuple(ids[n_subj + n_verb:n_subj + n_verb + n_obj]),
        "FILLER": tuple(ids[n_subj + n_verb + n_obj:]),
    }
    templates = (
        ("SUBJ", "VERB", "OBJ", "FILLER"),
        ("SUBJ", "VERB", "OBJ", "FILLER", "SUBJ", "VERB"),
        ("FILLER", "SUBJ", "VERB", "OBJ", "FILLER", "SUBJ", "VERB", "OBJ"),
    )
    return GrammarSpec(vocab_size=vocab_size, lexicon=words, word_classes=classes,
                       templates=templates, seed=seed)


@dataclass(frozen=True)
class RenderSpec:
    """Linear renderer. A frame is

        x_m = W_tok e(z_m) + beta * W_leak e(z_{m+1}) + a @ attr_projection + c_m

    where e(.) are unit-norm codebook rows, W_tok / W_leak / attr_projection
    have mutually orthonormal columns (so each signal sits in its own exactly
    recoverable subspace), a is the per-utterance speaker attribute, and c_m
    is stationary AR(1) noise with per-coordinate std ``noise_sigma``:

        c_m = smooth_alpha * c_{m-1} + sqrt(1 - smooth_alpha^2) * eps_m.

    The final frame's leak term uses the EOS codebook row. Speaker attributes
    are drawn from a fixed pool of orthonormal vectors so distinct speakers
    are exactly uncorrelated.
    """

    embed_dim: int = 32
    attr_dim: int = 8
    token_dim: int = 10
    leak_beta: float = 0.5
    smooth_alpha: float = 0.9
    noise_sigma: float = 0.1
    n_speakers: int = 8
    vocab_size: int = 64
    seed: int = 0
    token_codebook: np.ndarray = field(default=None, repr=False, compare=False)
    attr_projection: np.ndarray = field(default=None, repr=False, compare=False)
    mix_token: np.ndarray = field(default=None, repr=False, compare=False)
    mix_leak: np.ndarray = field(default=None, repr=False, compare=False)
    speaker_pool: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.leak_beta < 0:
            raise ContractViolation("leak_beta must be >= 0")
        if not 0.0 <= self.smooth_alpha < 1.0:
            raise ContractViolation("smooth_alpha must be in [0, 1)")
        if 2 * self.token_dim + self.attr_dim > self.embed_dim:
            raise ConfigurationError(
                "embed_dim too small: token, leak and attribute subspaces must fit "
                f"(2*{self.token_dim} + {self.attr_dim} > {self.embed_dim})")
        if self.n_speakers > self.attr_dim:
            raise ConfigurationError("speaker pool larger than attr_dim cannot stay orthonormal")
        if self.token_codebook is None:
            rng = np.random.default_rng(self.seed)
            cb = rng.standard_normal((self.vocab_size, self.token_dim))
            cb /= np.linalg.norm(cb, axis=1, keepdims=True)
            q, _ = np.linalg.qr(rng.standard_normal(
                (self.embed_dim, 2 * self.token_dim + self.attr_dim)))
            qs, _ = np.linalg.qr(rng.standard_normal((self.attr_dim, self.attr_dim)))
            object.__setattr__(self, "token_codebook", cb)
            object.__setattr__(self, "mix_token", q[:, :self.token_dim])
            object.__setattr__(self, "mix_leak", q[:, self.token_dim:2 * self.token_dim])
            object.__setattr__(self, "attr_projection",
                               q[:, 2 * self.token_dim:].T.copy())
            # orthogonal speakers, each at norm sqrt(attr_dim) (unit variance
            # per coordinate, like an N(0, I) draw but exactly uncorrelated)
            object.__setattr__(self, "speaker_pool",
                               math.sqrt(self.attr_dim)
                               * qs[:, :self.n_speakers].T.copy())

    def params(self) -> dict:
        """Generating parameters; matrices rebuild deterministically from them."""
        return {
            "embed_dim": self.embed_dim, "attr_dim": self.attr_dim,
            "token_dim": self.token_dim, "leak_beta": self.leak_beta,
            "smooth_alpha": self.smooth_alpha, "noise_sigma": self.noise_sigma,
            "n_speakers": self.n_speakers, "vocab_size": self.vocab_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_params(params: dict) -> "RenderSpec":
        return RenderSpec(**params)


@dataclass
class Utterance:
    tokens: np.ndarray  # (M,) int64
    embeddings: np.ndarray  # (M, d) float32
    attribute: np.ndarray  # (attr_dim,) float32
    speaker: int = -1

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.attribute = np.asarray(self.attribute, dtype=np.float32)
        if len(self.tokens) != len(self.embeddings):
            raise ContractViolation("tokens and embeddings must have equal length")

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class MinimalPairSet:
    kind: str  # "lexical" | "syntactic"
    pairs: list  # of (positive, negative) Utterance tuples


# ---------------------------------------------------------------------------
# Token-stream generation
# ---------------------------------------------------------------------------

@dataclass
class SentencePlan:
    """Latents of one utterance's token stream; tokens assemble from it
    deterministically, which lets minimal pairs reuse silences exactly."""

    template_idx: int
    word_ids: list
    lead: int
    seps: list
    trail: int

    def assemble(self, grammar: GrammarSpec, word_overrides: Optional[dict] = None) -> np.ndarray:
        toks = [SILENCE_ID] * self.lead
        for j, wid in enumerate(self.word_ids):
            word = grammar.lexicon[wid] if not word_overrides or j not in word_overrides \
                else word_overrides[j]
            toks.extend(word)
            if j < len(self.word_ids) - 1:
                toks.extend([SILENCE_ID] * self.seps[j])
        toks.extend([SILENCE_ID] * self.trail)
        toks.append(EOS_ID)
        return np.asarray(toks, dtype=np.int64)


def sample_plan(grammar: GrammarSpec, rng: np.random.Generator) -> SentencePlan:
    ti = int(rng.integers(len(grammar.templates)))
    template = grammar.templates[ti]
    word_ids = [int(rng.choice(grammar.word_classes[cls])) for cls in template]
    lead = int(rng.geometric(grammar.p_edge) - 1)
    seps = [int(rng.geometric(grammar.p_sep)) for _ in range(len(word_ids) - 1)]
    trail = int(rng.geometric(grammar.p_edge) - 1)
    return SentencePlan(ti, word_ids, lead, seps, trail)


def render_tokens(tokens: np.ndarray, attribute: np.ndarray, render: RenderSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Render a token stream into (M, d) float32 frames. ``attribute`` is
    either one (attr_dim,) vector or a per-frame (M, attr_dim) array."""
    tokens = np.asarray(tokens)
    m = len(tokens)
    e_cur = render.token_codebook[tokens]
    nxt = np.concatenate([tokens[1:], [EOS_ID]])
    e_nxt = render.token_codebook[nxt]
    attribute = np.asarray(attribute, dtype=np.float64)
    attr_part = attribute @ render.attr_projection  # (d,) or (M, d)
    a, sig = render.smooth_alpha, render.noise_sigma
    noise = np.zeros((m, render.embed_dim))
    c = sig * rng.standard_normal(render.embed_dim)
    for i in range(m):
        c = a * c + math.sqrt(1.0 - a * a) * sig * rng.standard_normal(render.embed_dim)
        noise[i] = c
    x = (e_cur @ render.mix_token.T
         + render.leak_beta * (e_nxt @ render.mix_leak.T)
         + attr_part + noise)
    return x.astype(np.float32)


def generate_utterance(grammar: GrammarSpec, render: RenderSpec,
                       rng: np.random.Generator) -> Utterance:
    plan = sample_plan(grammar, rng)
    tokens = plan.assemble(grammar)
    speaker = int(rng.integers(render.n_speakers))
    attribute = render.speaker_pool[speaker]
    embeddings = render_tokens(tokens, attribute, render, rng)
    return Utterance(tokens, embeddings, attribute, speaker)


def generate_corpus(grammar: GrammarSpec, render: RenderSpec, n_utterances: int,
                    seed: int) -> list:
    """i.i.d. utterances; utterance i draws from default_rng(seed + i)."""
    if n_utterances < 1:
        raise ContractViolation("n_utterances must be >= 1")
    return [generate_utterance(grammar, render, np.random.default_rng(seed + i))
            for i in range(n_utterances)]


def encode(utterance: Utterance):
    """Identity seam standing in for a frozen speech encoder."""
    return utterance.tokens, utterance.embeddings


def decode(tokens, embeddings, attribute=None) -> Utterance:
    """Inverse of the identity seam; attribute defaults to zeros."""
    tokens = np.asarray(tokens)
    if attribute is None:
        attribute = np.zeros(0, dtype=np.float32)
    return Utterance(tokens, embeddings, attribute)


# ---------------------------------------------------------------------------
# Attribute recovery
# ---------------------------------------------------------------------------

def recover_attribute(embeddings: np.ndarray, render: RenderSpec) -> np.ndarray:
    """Least-squares estimate of the speaker attribute from the frame mean,
    solved jointly with token/leak nuisance directions so their content does
    not corrupt the estimate."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 4:
        raise ContractViolation("need at least 4 frames to recover an attribute")
    design = np.concatenate(
        [render.mix_token, render.mix_leak, render.attr_projection.T], axis=1)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ConfigurationError("attribute projection is rank-deficient")
    coef, _, _, _ = np.linalg.lstsq(design, embeddings.mean(axis=0), rcond=None)
    return coef[2 * render.token_dim:]


# ---------------------------------------------------------------------------
# Minimal pairs and consistency pairs
# ---------------------------------------------------------------------------

def _bigram_follow(grammar: GrammarSpec) -> dict:
    """token -> set of tokens attested right after it inside lexicon words."""
    follow: dict = {}
    for toks in grammar.lexicon.values():
        for a, b in zip(toks, toks[1:]):
            follow.setdefault(a, set()).add(b)
    return follow


def _corrupt_word(word: tuple, grammar: GrammarSpec, rng: np.random.Generator,
                  max_tries: int = 200) -> tuple:
    """Out-of-lexicon corruption of one non-initial token. Replacements are
    drawn from tokens attested after the preceding token elsewhere in the
    lexicon (both-side-attested when possible), so the non-word stays locally
    plausible and only word-level knowledge separates the pair."""
    known = set(grammar.inverse_lexicon)
    follow = _bigram_follow(grammar)
    fallback = None
    for _ in range(max_tries):
        pos = int(rng.integers(1, len(word)))
        pool = sorted(follow.get(word[pos - 1], set()) - {word[pos]})
        if not pool:
            continue
        new = int(pool[rng.integers(len(pool))])
        cand = word[:pos] + (new,) + word[pos + 1:]
        if cand in known:
            continue
        if pos + 1 >= len(word) or word[pos + 1] in follow.get(new, set()):
            return cand
        fallback = cand
    if fallback is not None:
        return fallback
    # last resort: any out-of-lexicon substitution
    for _ in range(max_tries):
        pos = int(rng.integers(1, len(word)))
        new = int(rng.integers(RESERVED_IDS, grammar.vocab_size))
        cand = word[:pos] + (new,) + word[pos + 1:]
        if new != word[pos] and cand not in known:
            return cand
    raise GenerationError("could not find an out-of-lexicon corruption")


def _violating_swap(plan: SentencePlan, grammar: GrammarSpec,
                    rng: np.random.Generator, max_tries: int = 200) -> list:
    cls = grammar.class_of_word
    template_seqs = set(grammar.templates)
    classes = [cls[w] for w in plan.word_ids]
    n = len(plan.word_ids)
    for _ in range(max_tries):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        if classes[i] == classes[j]:
            continue
        swapped = list(plan.word_ids)
        swapped[i], swapped[j] = swapped[j], swapped[i]
        new_classes = tuple(cls[w] for w in swapped)
        if new_classes not in template_seqs:
            return swapped
    raise GenerationError("could not find a template-violating word swap")


def make_minimal_pairs(grammar: GrammarSpec, render: RenderSpec, kind: str,
                       n_pairs: int, seed: int) -> MinimalPairSet:
    """Equal-length positive/negative utterance pairs. Lexical negatives
    corrupt one token inside one word (result absent from the lexicon);
    syntactic negatives swap two words of different classes so the class
    sequence matches no template. Negatives are re-rendered from their
    corrupted tokens with the positive's attribute and noise draws."""
    if kind not in ("lexical", "syntactic"):
        raise ContractViolation(f"unknown pair kind {kind!r}")
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng(seed + i)
        plan = sample_plan(grammar, rng)
        speaker = int(rng.integers(render.n_speakers))
        attribute = render.speaker_pool[speaker]
        try:
            if kind == "lexical":
                slot = int(rng.integers(len(plan.word_ids)))
                word = grammar.lexicon[plan.word_ids[slot]]
                neg_tokens = plan.assemble(
                    grammar, {slot: _corrupt_word(word, grammar, rng)})
            else:
                swapped = _violating_swap(plan, grammar, rng)
                neg_plan = SentencePlan(plan.template_idx, swapped,
                                        plan.lead, plan.seps, plan.trail)
                neg_tokens = neg_plan.assemble(grammar)
        except GenerationError as exc:
            raise GenerationError(f"pair {i}: {exc}") from exc
        pos_tokens = plan.assemble(grammar)
        noise_seed = derive_seed(seed, i, "pair-noise")
        pos = Utterance(pos_tokens,
                        render_tokens(pos_tokens, attribute, render,
                                      np.random.default_rng(noise_seed)),
                        attribute, speaker)
        neg = Utterance(neg_tokens,
                        render_tokens(neg_tokens, attribute, render,
                                      np.random.default_rng(noise_seed)),
                        attribute, speaker)
        pairs.append((pos, neg))
    return MinimalPairSet(kind=kind, pairs=pairs)


def make_consistency_pairs(grammar: GrammarSpec, render: RenderSpec,
                           n_pairs: int, seed: int) -> list:
    """(consistent, inconsistent) pairs with identical tokens; the
    inconsistent member switches to a different speaker attribute at a word
    boundary mid-utterance."""
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng(seed + i)
        plan = sample_plan(grammar, rng)
        tokens = plan.assemble(grammar)
        s1 = int(rng.integers(render.n_speakers))
        s2 = int((s1 + 1 + rng.integers(render.n_speakers - 1)) % render.n_speakers)
        a1, a2 = render.speaker_pool[s1], render.speaker_pool[s2]
        switch_word = len(plan.word_ids) // 2
        # frame index where word `switch_word` starts
        idx = plan.lead
        for j in range(switch_word):
            idx += len(grammar.lexicon[plan.word_ids[j]])
            idx += plan.seps[j] if j < len(plan.seps) else 0
        per_frame = np.repeat(a1[None, :], len(tokens), axis=0)
        per_frame[idx:] = a2
        noise_seed = derive_seed(seed, i, "pair-noise")
        cons = Utterance(tokens,
                         render_tokens(tokens, a1, render,
                                       np.random.default_rng(noise_seed)),
                         a1, s1)
        incons = Utterance(tokens,
                           render_tokens(tokens, per_frame, render,
                                         np.random.default_rng(noise_seed)),
                           a1, s1)
        pairs.append((cons, incons))
    return pairs


# ---------------------------------------------------------------------------
# Exact grammar scoring
# ---------------------------------------------------------------------------

def _split_runs(body: Sequence[int]):
    """Segment a stream (terminator already stripped) into leading zeros,
    alternating word runs and separators, and trailing zeros."""
    lead = 0
    n = len(body)
    while lead < n and body[lead] == SILENCE_ID:
        lead += 1
    words, seps = [], []
    i = lead
    while i < n:
        j = i
        while j < n and body[j] != SILENCE_ID:
            j += 1
        words.append(tuple(int(t) for t in body[i:j]))
        i = j
        j = i
        while j < n and body[j] == SILENCE_ID:
            j += 1
        if j < n:
            seps.append(j - i)
        else:
            return lead, words, seps, j - i
        i = j
    return lead, words, seps, 0


def _logaddexp(*vals):
    out = -math.inf
    for v in vals:
        if v == -math.inf:
            continue
        if out == -math.inf:
            out = v
        else:
            hi, lo = max(out, v), min(out, v)
            out = hi + math.log1p(math.exp(lo - hi))
    return out


class _GrammarScorer:
    """Closed-form log-probabilities under the smoothed generative grammar.

    The smoothed model matches the generator exactly on well-formed streams
    and stays finite everywhere: each word slot mixes in mass LAMBDA_WORD of
    a geometric-length uniform-token "noise word", and mass LAMBDA_TEMPLATE
    of sentence plans is a free-form template with a geometric slot count
    drawn over the whole lexicon. Streams not ending in EOS are scored as
    prefixes (futures marginalized out)."""

    def __init__(self, grammar: GrammarSpec):
        self.g = grammar
        self.lp_tok = -math.log(grammar.vocab_size - 1)  # noise tokens: any non-silence id
        self.by_class = {name: {grammar.lexicon[w] for w in ws}
                         for name, ws in grammar.word_classes.items()}
        self.all_words = set(grammar.inverse_lexicon)
        self.n_lex = len(grammar.lexicon)

    # word-level masses ------------------------------------------------------
    def _noise_lp(self, word) -> float:
        ln = len(word)
        return (ln - 1) * math.log(Q_NOISE) + math.log(1 - Q_NOISE) + ln * self.lp_tok

    def _noise_prefix_lp(self, word) -> float:
        ln = len(word)
        return (ln - 1) * math.log(Q_NOISE) + ln * self.lp_tok

    def _slot_lp(self, word, cls: str) -> float:
        members = self.by_class[cls]
        hit = math.log((1 - LAMBDA_WORD) / len(members)) if word in members else -math.inf
        return _logaddexp(hit, math.log(LAMBDA_WORD) + self._noise_lp(word))

    def _slot_prefix_lp(self, word, cls: str) -> float:
        members = self.by_class[cls]
        k = sum(1 for w in members if w[:len(word)] == word)
        hit = math.log((1 - LAMBDA_WORD) * k / len(members)) if k else -math.inf
        return _logaddexp(hit, math.log(LAMBDA_WORD) + self._noise_prefix_lp(word))

    def _free_lp(self, word) -> float:
        hit = (math.log((1 - LAMBDA_WORD) / self.n_lex)
               if word in self.all_words else -math.inf)
        return _logaddexp(hit, math.log(LAMBDA_WORD) + self._noise_lp(word))

    def _free_prefix_lp(self, word) -> float:
        k = sum(1 for w in self.all_words if w[:len(word)] == word)
        hit = math.log((1 - LAMBDA_WORD) * k / self.n_lex) if k else -math.inf
        return _logaddexp(hit, math.log(LAMBDA_WORD) + self._noise_prefix_lp(word))

    # silence-run lengths ----------------------------------------------------
    def _edge_lp(self, j) -> float:
        return j * math.log(1 - self.g.p_edge) + math.log(self.g.p_edge)

    def _edge_tail_lp(self, j) -> float:
        return j * math.log(1 - self.g.p_edge)

    def _sep_lp(self, s) -> float:
        return (s - 1) * math.log(1 - self.g.p_sep) + math.log(self.g.p_sep)

    def _sep_tail_lp(self, s) -> float:
        return (s - 1) * math.log(1 - self.g.p_sep)

    # plan-level masses -------------------------------------------------------
    def _template_plan_lp(self, words, slot_lp_fn) -> float:
        per_template = []
        for tpl in self.g.templates:
            if len(tpl) != len(words):
                continue
            lp = -math.log(len(self.g.templates))
            for w, cls in zip(words, tpl):
                lp += slot_lp_fn(w, cls)
            per_template.append(lp)
        base = _logaddexp(*per_template) if per_template else -math.inf
        return math.log(1 - LAMBDA_TEMPLATE) + base if base > -math.inf else -math.inf

    def _free_plan_lp(self, n_slots: int) -> float:
        # P_free(n) = (1 - Q_FREE) * Q_FREE**n, support n >= 0
        return (math.log(LAMBDA_TEMPLATE) + math.log(1 - Q_FREE)
                + n_slots * math.log(Q_FREE))

    def complete_lp(self, body) -> float:
        lead, words, seps, trail = _split_runs(body)
        if not words:
            z = len(body)
            structure = (2 * math.log(self.g.p_edge)
                         + z * math.log(1 - self.g.p_edge) + math.log(z + 1))
            return structure + self._free_plan_lp(0)
        structure = self._edge_lp(lead) + self._edge_lp(trail)
        structure += sum(self._sep_lp(s) for s in seps)
        tpl = self._template_plan_lp(words, self._slot_lp)
        free = self._free_plan_lp(len(words)) + sum(self._free_lp(w) for w in words)
        return structure + _logaddexp(tpl, free)

    def prefix_lp(self, body) -> float:
        if len(body) == 0:
            return 0.0
        lead, words, seps, trail = _split_runs(body)
        log_qf = math.log(Q_FREE)
        if not words:
            # all zeros so far: either still inside leading silence of a plan
            # with >= 1 word, or inside lead+trail of the empty plan
            r = len(body)
            nonempty = _logaddexp(
                math.log(1 - LAMBDA_TEMPLATE),
                math.log(LAMBDA_TEMPLATE) + log_qf) + self._edge_tail_lp(r)
            # P(lead + trail >= r) for two independent Geom0(p_edge)
            p = self.g.p_edge
            below = 0.0
            for s in range(r):
                below += (s + 1) * p * p * (1 - p) ** s
            empty = (math.log(LAMBDA_TEMPLATE) + math.log(1 - Q_FREE)
                     + (math.log(1 - below) if below < 1 else -math.inf))
            return _logaddexp(nonempty, empty)
        partial_word = trail == 0
        complete_words = words[:-1] if partial_word else words
        tail_word = words[-1] if partial_word else None
        structure = self._edge_lp(lead) + sum(self._sep_lp(s) for s in seps)
        n = len(complete_words)
        # templated plans
        tpl_terms = []
        for tpl in self.g.templates:
            need = n + 1 if partial_word else n
            if partial_word and len(tpl) < need:
                continue
            if not partial_word and len(tpl) < n:
                continue
            lp = -math.log(len(self.g.templates))
            for w, cls in zip(complete_words, tpl[:n]):
                lp += self._slot_lp(w, cls)
            if partial_word:
                lp += self._slot_prefix_lp(tail_word, tpl[n])
            else:
                # stream ends inside a zero run of length `trail`
                if len(tpl) == n:
                    lp += self._edge_tail_lp(trail)
                else:
                    lp += self._sep_tail_lp(trail)
            tpl_terms.append(lp)
        tpl_lp = (math.log(1 - LAMBDA_TEMPLATE) + _logaddexp(*tpl_terms)
                  if tpl_terms else -math.inf)
        # free-form plans
        free_words = sum(self._free_lp(w) for w in complete_words)
        if partial_word:
            free_lp = (math.log(LAMBDA_TEMPLATE) + (n + 1) * log_qf
                       + free_words + self._free_prefix_lp(tail_word))
        else:
            stay = (math.log(1 - Q_FREE) + n * log_qf + self._edge_tail_lp(trail))
            more = ((n + 1) * log_qf + self._sep_tail_lp(trail))
            free_lp = math.log(LAMBDA_TEMPLATE) + free_words + _logaddexp(stay, more)
        return structure + _logaddexp(tpl_lp, free_lp)


def grammar_logprob(tokens, grammar: GrammarSpec) -> float:
    """Exact log-probability of a token stream under the smoothed grammar.

    Streams ending in EOS are scored as complete utterances; anything else
    (truncated generations, garbage) is scored as a prefix with all futures
    marginalized out. Finite for every input."""
    tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64).ravel()]
    scorer = _GrammarScorer(grammar)
    if len(tokens) == 0:
        return scorer.complete_lp([])
    if tokens[-1] == EOS_ID:
        return scorer.complete_lp(tokens[:-1])
    return scorer.prefix_lp(tokens)


def matches_grammar(tokens, grammar: GrammarSpec) -> bool:
    """True iff the stream is a well-formed utterance: EOS-terminated, every
    word in the lexicon, and the class sequence equal to some template."""
    tokens = [int(t) for t in np.asarray(tokens).ravel()]
    if not tokens or tokens[-1] != EOS_ID or EOS_ID in tokens[:-1]:
        return False
    lead, words, seps, trail = _split_runs(tokens[:-1])
    inv = grammar.inverse_lexicon
    cls = grammar.class_of_word
    if any(w not in inv for w in words):
        return False
    seq = tuple(cls[inv[w]] for w in words)
    return seq in grammar.templates
