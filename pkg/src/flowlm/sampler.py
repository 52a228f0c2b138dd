"""Autoregressive inference: per timestep, sample the k future tokens with
nucleus sampling (silence logit penalized), generate the current frame by
integrating the guided flow field from a tempered Gaussian prior, then feed
the frame back into the transformer. Only the head-0 token is committed to
the output stream; the lookahead tokens condition the flow head and are
resampled at the next step.

One transformer advance happens per emitted frame; the flow head runs
``nfe`` times per frame (twice that with guidance enabled).
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import SILENCE_ID, EOS_ID
from .errors import ContractViolation
from .flow import SolverSpec, cfg_combine, ode_sample, sample_prior
from .model import FlowSLM
from .seeds import derive_seed


@dataclass(frozen=True)
class GenerationConfig:
    top_p: float = 0.95
    silence_penalty: float = 10.0
    cfg_scale: float = 0.3
    prior_temperature: float = 0.8
    solver: SolverSpec = dc_field(default_factory=SolverSpec)
    max_frames: int = 125
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ContractViolation("top_p must be in (0, 1]")
        if self.silence_penalty < 0:
            raise ContractViolation("silence_penalty must be >= 0")
        if self.cfg_scale < 0:
            raise ContractViolation("cfg_scale must be >= 0")
        if self.prior_temperature <= 0:
            raise ContractViolation("prior_temperature must be > 0")
        if self.max_frames < 1:
            raise ContractViolation("max_frames must be >= 1")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["solver"] = {"method": self.solver.method, "nfe": self.solver.nfe}
        return d

    @staticmethod
    def from_dict(d: dict) -> "GenerationConfig":
        d = dict(d)
        if isinstance(d.get("solver"), dict):
            d["solver"] = SolverSpec(**d["solver"])
        return GenerationConfig(**d)


@dataclass
class Continuation:
    tokens: np.ndarray
    embeddings: np.ndarray
    prompt_len: int
    stopped_by: str  # "eos" | "max_frames"


def nucleus_sample(logits: torch.Tensor, top_p: float, penalty: float,
                   rng: torch.Generator) -> int:
    """Sample one token id from the renormalized probability-mass-``top_p``
    prefix, after subtracting ``penalty`` from the silence logit."""
    if not torch.isfinite(logits).all():
        raise ContractViolation("nucleus_sample: non-finite logits")
    logits = logits.detach().to(torch.float64).clone()
    logits[SILENCE_ID] -= penalty
    probs = torch.softmax(logits, dim=-1)
    sorted_probs, order = torch.sort(probs, descending=True)
    cdf = torch.cumsum(sorted_probs, dim=-1)
    cutoff = int(torch.searchsorted(cdf, torch.tensor(top_p, dtype=cdf.dtype),
                                    right=False).item())
    cutoff = min(cutoff, len(cdf) - 1)
    kept = sorted_probs[:cutoff + 1]
    kept_cdf = torch.cumsum(kept, dim=-1)
    u = torch.rand((), generator=rng, dtype=torch.float64) * kept_cdf[-1]
    pick = int(torch.searchsorted(kept_cdf, u, right=True).item())
    pick = min(pick, cutoff)
    return int(order[pick].item())


def nucleus_distribution(logits: torch.Tensor, top_p: float,
                         penalty: float) -> torch.Tensor:
    """The exact distribution nucleus_sample draws from (test oracle)."""
    logits = logits.detach().to(torch.float64).clone()
    logits[SILENCE_ID] -= penalty
    probs = torch.softmax(logits, dim=-1)
    sorted_probs, order = torch.sort(probs, descending=True)
    cdf = torch.cumsum(sorted_probs, dim=-1)
    cutoff = int(torch.searchsorted(cdf, torch.tensor(top_p, dtype=cdf.dtype),
                                    right=False).item())
    cutoff = min(cutoff, len(cdf) - 1)
    out = torch.zeros_like(probs)
    out[order[:cutoff + 1]] = sorted_probs[:cutoff + 1]
    return out / out.sum()


def generate_frame(model: FlowSLM, context: torch.Tensor, tokens: torch.Tensor,
                   gen: GenerationConfig, rng: torch.Generator) -> torch.Tensor:
    """One frame from the learned flow: tempered prior draw, then guided ODE
    integration. ``context`` is (B, d_model), ``tokens`` (B, k); returns (B, d)."""
    d = model.config.embed_dim
    b = context.shape[0]
    dtype = context.dtype
    x0 = torch.stack([sample_prior(d, gen.prior_temperature, rng, dtype=dtype)
                      for _ in range(b)])

    def field(t, x):
        v_cond = model.cfm_field(x, t, context, tokens, drop_condition=False)
        if gen.cfg_scale == 0.0:
            return v_cond
        v_uncond = model.cfm_field(x, t, context, tokens, drop_condition=True)
        return cfg_combine(v_cond, v_uncond, gen.cfg_scale)

    return ode_sample(field, x0, gen.solver)


@torch.no_grad()
def continue_prompt(model: FlowSLM, prompt_embeddings, gen: GenerationConfig,
                    rng: Optional[torch.Generator] = None) -> Continuation:
    """Continue a prompt with a vector-input flow model until EOS or the
    frame budget. ``prompt_embeddings`` is (P, d), P >= 1."""
    if model.config.input_mode != "vector":
        raise ContractViolation(
            "continue_prompt drives vector-input models; use continue_tokens")
    prompt = torch.as_tensor(np.asarray(prompt_embeddings), dtype=torch.float32)
    if prompt.ndim != 2 or prompt.shape[0] < 1:
        raise ContractViolation("prompt must be (P, d) with P >= 1")
    if rng is None:
        rng = torch.Generator()
        rng.manual_seed(derive_seed(gen.seed, "continue"))
    state = model.begin_stream(1)
    c = model.extend_stream(state)
    for p in range(prompt.shape[0]):
        c = model.extend_stream(state, embed=prompt[p:p + 1])
    out_tokens: list = []
    out_frames: list = []
    stopped_by = "max_frames"
    while True:
        logits = model.sem_logits(c)[0]  # (k, V)
        zs = [nucleus_sample(logits[i], gen.top_p, gen.silence_penalty, rng)
              for i in range(model.config.k_future)]
        zk = torch.tensor([zs], dtype=torch.long)
        frame = generate_frame(model, c, zk, gen, rng)[0]
        out_tokens.append(zs[0])
        out_frames.append(frame.numpy().astype(np.float32))
        if zs[0] == EOS_ID:
            stopped_by = "eos"
            break
        if len(out_tokens) >= gen.max_frames:
            break
        c = model.extend_stream(state, embed=frame.unsqueeze(0))
    return Continuation(
        tokens=np.asarray(out_tokens, dtype=np.int64),
        embeddings=np.stack(out_frames),
        prompt_len=int(prompt.shape[0]),
        stopped_by=stopped_by,
    )


@torch.no_grad()
def continue_tokens(model: FlowSLM, prompt_tokens, gen: GenerationConfig,
                    rng: Optional[torch.Generator] = None):
    """Token-only continuation for discrete-input models; returns
    (token array, stopped_by). The caller decides how frames are rendered."""
    if model.config.input_mode != "token":
        raise ContractViolation("continue_tokens drives token-input models")
    prompt = torch.as_tensor(np.asarray(prompt_tokens), dtype=torch.long).view(-1)
    if prompt.numel() < 1:
        raise ContractViolation("prompt must hold at least one token")
    if rng is None:
        rng = torch.Generator()
        rng.manual_seed(derive_seed(gen.seed, "continue"))
    state = model.begin_stream(1)
    c = model.extend_stream(state)
    for p in range(prompt.shape[0]):
        c = model.extend_stream(state, token=prompt[p:p + 1])
    out_tokens: list = []
    stopped_by = "max_frames"
    while True:
        logits = model.sem_logits(c)[0]
        z = nucleus_sample(logits[0], gen.top_p, gen.silence_penalty, rng)
        out_tokens.append(z)
        if z == EOS_ID:
            stopped_by = "eos"
            break
        if len(out_tokens) >= gen.max_frames:
            break
        c = model.extend_stream(state, token=torch.tensor([z], dtype=torch.long))
    return np.asarray(out_tokens, dtype=np.int64), stopped_by


@torch.no_grad()
def generate_continuations(model: FlowSLM, prompts: Sequence, gen: GenerationConfig,
                           prompt_frames: int) -> list:
    """Batched prompt continuation for equal-length prompts (heavy tensor ops
    run once per step for the whole batch; each prompt keeps its own named
    rng substream so results don't depend on batch composition)."""
    if prompt_frames < 1:
        raise ContractViolation("prompt_frames must be >= 1")
    cfgk = model.config.k_future
    b = len(prompts)
    if b == 0:
        return []
    prompt = torch.stack([
        torch.as_tensor(np.asarray(u.embeddings[:prompt_frames]), dtype=torch.float32)
        for u in prompts])
    if prompt.shape[1] != prompt_frames:
        raise ContractViolation("all prompts must supply prompt_frames frames")
    rngs = []
    for i in range(b):
        g = torch.Generator()
        g.manual_seed(derive_seed(gen.seed, "gen-prompt", i))
        rngs.append(g)
    state = model.begin_stream(b)
    c = model.extend_stream(state)
    for p in range(prompt_frames):
        c = model.extend_stream(state, embed=prompt[:, p])
    d = model.config.embed_dim
    active = np.ones(b, dtype=bool)
    toks: list = [[] for _ in range(b)]
    frames: list = [[] for _ in range(b)]
    stopped = ["max_frames"] * b
    while active.any():
        logits = model.sem_logits(c)  # (B, k, V)
        zk = torch.zeros(b, cfgk, dtype=torch.long)
        x0 = torch.zeros(b, d)
        for i in range(b):
            if not active[i]:
                continue
            zk[i] = torch.tensor([
                nucleus_sample(logits[i, h], gen.top_p, gen.silence_penalty, rngs[i])
                for h in range(cfgk)])
            x0[i] = sample_prior(d, gen.prior_temperature, rngs[i])

        def field(t, x):
            v_cond = model.cfm_field(x, t, c, zk, drop_condition=False)
            if gen.cfg_scale == 0.0:
                return v_cond
            v_un = model.cfm_field(x, t, c, zk, drop_condition=True)
            return cfg_combine(v_cond, v_un, gen.cfg_scale)

        new_frames = ode_sample(field, x0, gen.solver)
        for i in range(b):
            if not active[i]:
                continue
            z0 = int(zk[i, 0])
            toks[i].append(z0)
            frames[i].append(new_frames[i].numpy().astype(np.float32))
            if z0 == EOS_ID:
                active[i] = False
                stopped[i] = "eos"
            elif len(toks[i]) >= gen.max_frames:
                active[i] = False
        if active.any():
            c = model.extend_stream(state, embed=new_frames)
    return [Continuation(tokens=np.asarray(toks[i], dtype=np.int64),
                         embeddings=np.stack(frames[i]),
                         prompt_len=prompt_frames,
                         stopped_by=stopped[i])
            for i in range(b)]
