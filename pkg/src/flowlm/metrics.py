"""Evaluation metrics: paired likelihood accuracy on minimal pairs, grammar
perplexity of generated token streams, speaker-attribute similarity, the
Fréchet distance between Gaussians fitted to feature sets, and a
flow-loss-based acoustic-consistency score.

Likelihoods always come from head 0 of the token predictor, which is the
proper chain-rule factor; lookahead heads never enter scoring.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import (GrammarSpec, MinimalPairSet, RenderSpec, Utterance,
                     grammar_logprob, recover_attribute)
from .errors import ContractViolation
from .flow import ot_flow, ot_target_field
from .model import FlowSLM, collate
from .seeds import torch_rng


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def add(self, name: str, value: float, count: int) -> None:
        self.metrics[name] = float(value)
        self.counts[name] = int(count)

    def validate(self) -> None:
        if set(self.metrics) != set(self.counts):
            raise ContractViolation("every metric needs a matching count")

    def to_json(self) -> str:
        self.validate()
        return json.dumps({
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "config_hash": self.config_hash,
            "seed": self.seed,
        }, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return EvalReport(metrics=d["metrics"], counts=d["counts"],
                          config_hash=d["config_hash"], seed=d["seed"])


# ---------------------------------------------------------------------------
# Likelihood scoring
# ---------------------------------------------------------------------------

@torch.no_grad()
def sequence_logprob(model: FlowSLM, utterance: Utterance,
                     mode: Optional[str] = None) -> float:
    """Teacher-forced sum over positions of head-0 log P(z_m | c_{<m})."""
    if mode is not None and mode != model.config.input_mode:
        raise ContractViolation(
            f"requested mode {mode!r} but model is {model.config.input_mode!r}")
    tokens, embeds, _ = collate([utterance])
    ctx = model.encode_context(tokens=tokens, embeds=embeds)
    logits = model.sem_logits(ctx)[0, :, 0, :]  # (M, V)
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(1, tokens[0].unsqueeze(1)).squeeze(1)
    return float(picked.sum())


Scorer = Union[FlowSLM, Callable[[Utterance], float]]


def _as_scorer(model_or_fn: Scorer) -> Callable[[Utterance], float]:
    if isinstance(model_or_fn, FlowSLM):
        return lambda u: sequence_logprob(model_or_fn, u)
    return model_or_fn


def paired_accuracy(model_or_fn: Scorer, pairs: MinimalPairSet) -> float:
    """Fraction of pairs whose positive member scores strictly higher;
    exact ties count one half."""
    if not pairs.pairs:
        raise ContractViolation("empty minimal-pair set")
    score = _as_scorer(model_or_fn)
    total = 0.0
    for pos, neg in pairs.pairs:
        sp, sn = score(pos), score(neg)
        total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / len(pairs.pairs)


def gen_ppl(continuations: Sequence, grammar: GrammarSpec) -> float:
    """exp(-mean per-token grammar log-probability) over generated token
    streams (prompts are never part of a continuation's tokens)."""
    if not continuations:
        raise ContractViolation("no continuations to score")
    total_lp = 0.0
    total_tokens = 0
    for cont in continuations:
        toks = np.asarray(cont.tokens)
        if len(toks) == 0:
            continue
        total_lp += grammar_logprob(toks, grammar)
        total_tokens += len(toks)
    if total_tokens == 0:
        raise ContractViolation("continuations contain no tokens")
    return float(np.exp(-total_lp / total_tokens))


def corpus_ppl(utterances: Sequence[Utterance], grammar: GrammarSpec) -> float:
    """Grammar perplexity of reference utterances (gen_ppl's yardstick)."""
    lps = [grammar_logprob(u.tokens, grammar) for u in utterances]
    n = sum(u.length for u in utterances)
    return float(np.exp(-sum(lps) / n))


# ---------------------------------------------------------------------------
# Acoustic metrics
# ---------------------------------------------------------------------------

def speaker_similarity(prompt_frames, continuation_frames,
                       render: RenderSpec) -> float:
    """Cosine between the attributes recovered from two frame sets."""
    a = recover_attribute(np.asarray(prompt_frames), render)
    b = recover_attribute(np.asarray(continuation_frames), render)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.dot(a, b) / denom)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a, features_b, eps: float = 1e-6) -> float:
    """2-Wasserstein distance between Gaussians fitted to two sample sets:

        |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})

    The cross term uses Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}) via symmetric
    eigendecomposition; covariances get +eps*I regularization.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation("feature sets must be (N, d) with matching d")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ContractViolation(f"need at least d+1={d + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False) + eps * np.eye(d)
    sb = np.cov(b, rowvar=False) + eps * np.eye(d)
    root_a = _sqrt_psd(sa)
    inner = root_a @ sb @ root_a
    tr_cross = float(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum())
    fd = float(mu_a @ mu_a - 2 * mu_a @ mu_b + mu_b @ mu_b
               + np.trace(sa) + np.trace(sb) - 2.0 * tr_cross)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# Acoustic consistency
# ---------------------------------------------------------------------------

_T_GRID = 8


@torch.no_grad()
def _stratified_cfm_loss(model: FlowSLM, utt: Utterance,
                         x0_draws: torch.Tensor) -> float:
    """Teacher-forced mean flow loss with t marginalized over the midpoints
    of _T_GRID equal bins; x0 draws are supplied so pair members share them."""
    tokens, embeds, lengths = collate([utt])
    ctx = model.encode_context(tokens=tokens, embeds=embeds)
    m = tokens.shape[1]
    k = model.config.k_future
    offsets = (torch.arange(m).view(m, 1) + torch.arange(k).view(1, k)).clamp(max=m - 1)
    cond_tokens = tokens[0][offsets].unsqueeze(0)
    total = 0.0
    for gi in range(_T_GRID):
        t = (gi + 0.5) / _T_GRID
        x0 = x0_draws[gi].unsqueeze(0)
        xt = ot_flow(t, x0, embeds, model.config.sigma_min)
        ut = ot_target_field(x0, embeds, model.config.sigma_min)
        v = model.cfm_field(xt, torch.full((1, m), t), ctx, cond_tokens)
        total += float((v - ut).pow(2).sum(dim=-1).mean())
    return total / _T_GRID


@torch.no_grad()
def acoustic_consistency_score(model: FlowSLM, consistent: Utterance,
                               inconsistent: Utterance,
                               rng: torch.Generator) -> float:
    """1.0 when the consistent member has strictly lower teacher-forced flow
    loss, 0.5 on an exact tie, else 0.0. Both members share the prior draws."""
    if consistent.length != inconsistent.length or \
            not np.array_equal(consistent.tokens, inconsistent.tokens):
        raise ContractViolation("consistency pair must share token content")
    m = consistent.length
    d = model.config.embed_dim
    x0 = torch.randn(_T_GRID, m, d, generator=rng)
    lc = _stratified_cfm_loss(model, consistent, x0)
    li = _stratified_cfm_loss(model, inconsistent, x0)
    return 1.0 if lc < li else (0.5 if lc == li else 0.0)


def consistency_accuracy(model: FlowSLM, pairs: Sequence, seed: int = 0) -> float:
    if not pairs:
        raise ContractViolation("no consistency pairs")
    total = 0.0
    for i, (cons, incons) in enumerate(pairs):
        total += acoustic_consistency_score(model, cons, incons,
                                            torch_rng(seed, "consistency", i))
    return total / len(pairs)


# ---------------------------------------------------------------------------
# Held-out cross entropy
# ---------------------------------------------------------------------------

@torch.no_grad()
def held_out_ce(model: FlowSLM, utterances: Sequence[Utterance],
                batch_size: int = 32) -> float:
    """Mean next-k cross entropy over valid (position, head) slots."""
    if not utterances:
        raise ContractViolation("empty held-out set")
    num, den = 0.0, 0
    k = model.config.k_future
    for i in range(0, len(utterances), batch_size):
        tokens, embeds, lengths = collate(utterances[i:i + batch_size])
        b, m = tokens.shape
        ctx = model.encode_context(tokens=tokens, embeds=embeds)
        logits = model.sem_logits(ctx)
        offsets = torch.arange(m).view(1, m, 1) + torch.arange(k).view(1, 1, k)
        valid = offsets < lengths.view(b, 1, 1)
        idx = offsets.clamp(max=m - 1).expand(b, m, k)
        targets = torch.gather(tokens.unsqueeze(-1).expand(b, m, k), 1, idx)
        logp = F.log_softmax(logits, dim=-1)
        nll = -torch.gather(logp, -1, targets.unsqueeze(-1)).squeeze(-1)
        num += float((nll * valid).sum())
        den += int(valid.sum())
    return num / den
