"""The joint token/embedding sequence model: a causal transformer over frame
inputs (discrete token ids or continuous vectors), k parallel next-token
heads, and a conditional flow-matching head that regresses the transport
field of the current frame's embedding given the context vector and the k
teacher-forced future tokens.

All randomness is drawn from explicitly passed ``torch.Generator`` objects.
The module keeps instrumentation counters (context extensions, field
evaluations) so inference-cost contracts are testable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EOS_ID
from .errors import ContractViolation, NumericalError
from .flow import ot_flow, ot_target_field, time_embedding, DEFAULT_SIGMA_MIN
from .seeds import derive_seed

INPUT_MODES = ("token", "vector")


@dataclass(frozen=True)
class ModelConfig:
    input_mode: str = "vector"
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    k_future: int = 4
    cfm_enabled: bool = True
    cfm_blocks: int = 3
    cfm_hidden: int = 256
    vocab_size: int = 64
    embed_dim: int = 32
    time_embed_dim: int = 32
    cond_dropout_p: float = 0.05
    sigma_min: float = DEFAULT_SIGMA_MIN
    max_seq_len: int = 256

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ContractViolation(f"input_mode must be one of {INPUT_MODES}")
        if self.d_model % self.n_heads != 0:
            raise ContractViolation("d_model must be divisible by n_heads")
        if self.k_future < 1:
            raise ContractViolation("k_future must be >= 1")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ContractViolation("cond_dropout_p must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class LossBreakdown:
    sem_loss: torch.Tensor
    cfm_loss: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.sem_loss + self.cfm_loss


@dataclass
class StreamState:
    """Incremental-decoding state: per-layer key/value prefixes."""
    keys: list
    values: list
    length: int = 0
    batch_size: int = 1


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, cache: Optional[tuple] = None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if cache is not None:
            pk, pv = cache
            if pk is not None:
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
            att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
            out = torch.softmax(att, dim=-1) @ v
            new_cache = (k, v)
        else:
            att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
            t = x.shape[1]
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
            att = att.masked_fill(mask, float("-inf"))
            out = torch.softmax(att, dim=-1) @ v
            new_cache = None
        b, _, t, _ = out.shape
        out = out.transpose(1, 2).reshape(b, t, -1)
        return self.proj(out), new_cache


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))

    def forward(self, x, cache=None):
        a, new_cache = self.attn(self.ln1(x), cache)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, new_cache


class ResidualMLPBlock(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.ln = nn.LayerNorm(hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    def forward(self, h):
        return h + self.fc2(F.gelu(self.fc1(self.ln(h))))


class CFMHead(nn.Module):
    """Residual-MLP vector-field regressor. Conditioning (context vector and
    mean token embedding, concatenated) can be severed jointly, in which case
    a learned null embedding takes its place; the final linear starts at zero
    so the initial field is identically zero."""

    def __init__(self, embed_dim: int, time_dim: int, cond_dim: int,
                 hidden: int, blocks: int):
        super().__init__()
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.null_cond = nn.Parameter(torch.zeros(cond_dim))
        self.in_proj = nn.Linear(embed_dim + time_dim + cond_dim, hidden)
        self.blocks = nn.ModuleList(ResidualMLPBlock(hidden) for _ in range(blocks))
        self.out_ln = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, embed_dim)

    def forward(self, xt: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor],
                drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        t = t.expand(xt.shape[:-1])
        temb = time_embedding(t, self.time_dim)
        if cond is None:
            cond = self.null_cond.expand(*xt.shape[:-1], self.cond_dim)
        elif drop is not None:
            null = self.null_cond.to(cond.dtype).expand_as(cond)
            cond = torch.where(drop.unsqueeze(-1), null, cond)
        h = self.in_proj(torch.cat([xt, temb, cond], dim=-1))
        for blk in self.blocks:
            h = blk(h)
        return self.out(self.out_ln(h))


class FlowSLM(nn.Module):
    def __init__(self, config: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d_model
        if config.input_mode == "token":
            self.tok_embed = nn.Embedding(config.vocab_size, d)
        else:
            self.in_proj = nn.Linear(config.embed_dim, d)
        self.bos = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(config.max_seq_len, d))
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.sem_head = nn.Linear(d, config.k_future * config.vocab_size)
        self.cond_embed = nn.Embedding(config.vocab_size, d)
        # token conditioning keeps the k future tokens ordered (concatenated),
        # so the head can read the current/next token without going through c
        self.cfm = CFMHead(config.embed_dim, config.time_embed_dim,
                           cond_dim=d + config.k_future * d,
                           hidden=config.cfm_hidden, blocks=config.cfm_blocks)
        self.reset_parameters(init_seed)
        self.counters = {"context_extends": 0, "cfm_evals": 0}

    # ------------------------------------------------------------------ init
    def reset_parameters(self, seed: int) -> None:
        """Truncated-normal(0.02) weights via per-parameter named substreams,
        so identically named/shaped parameters initialize identically across
        model variants. LayerNorms are (1, 0); the CFM output layer is 0."""
        ln_weights = {f"{name}.weight" for name, mod in self.named_modules()
                      if isinstance(mod, nn.LayerNorm)}
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ln_weights:
                    p.fill_(1.0)
                elif name.endswith("bias") or name in ("cfm.null_cond", "cfm.out.weight"):
                    p.zero_()
                else:
                    g = torch.Generator().manual_seed(derive_seed(seed, "init", name))
                    p.copy_(_trunc_normal(p.shape, 0.02, g).to(p.dtype))

    # --------------------------------------------------------------- context
    def _input_frames(self, tokens: Optional[torch.Tensor],
                      embeds: Optional[torch.Tensor]) -> torch.Tensor:
        if self.config.input_mode == "token":
            if tokens is None:
                raise ContractViolation("token-mode model needs token inputs")
            return self.tok_embed(tokens)
        if embeds is None:
            raise ContractViolation("vector-mode model needs embedding inputs")
        return self.in_proj(embeds)

    def encode_context(self, tokens: Optional[torch.Tensor] = None,
                       embeds: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Context vectors c_{<m} for m = 1..M: output position m-1 has seen
        a begin-of-sequence state plus frames 1..m-1 only."""
        frames = self._input_frames(tokens, embeds)
        b, m = frames.shape[0], frames.shape[1]
        if m == 0:
            raise ContractViolation("empty input sequence")
        if m > self.config.max_seq_len:
            raise ContractViolation(
                f"sequence length {m} exceeds max_seq_len {self.config.max_seq_len}")
        bos = self.bos.to(frames.dtype).expand(b, 1, -1)
        h = torch.cat([bos, frames[:, :-1]], dim=1)
        h = h + self.pos_embed[:m].to(frames.dtype)
        for blk in self.blocks:
            h, _ = blk(h)
        return self.ln_f(h)

    def begin_stream(self, batch_size: int = 1) -> StreamState:
        n = self.config.n_layers
        return StreamState(keys=[None] * n, values=[None] * n, length=0,
                           batch_size=batch_size)

    def extend_stream(self, state: StreamState, token: Optional[torch.Tensor] = None,
                      embed: Optional[torch.Tensor] = None) -> torch.Tensor:
        """One incremental transformer advance. For the first call pass
        nothing: the begin-of-sequence state is consumed. Returns c over the
        prefix so far, shape (B, d_model)."""
        if state.length >= self.config.max_seq_len:
            raise ContractViolation("stream exceeded max_seq_len")
        if token is None and embed is None:
            frame = self.bos.expand(state.batch_size, 1, -1)
        else:
            t = token.view(-1, 1) if token is not None else None
            e = embed.unsqueeze(1) if embed is not None else None
            frame = self._input_frames(t, e)
        h = frame + self.pos_embed[state.length].to(frame.dtype)
        for i, blk in enumerate(self.blocks):
            h, cache = blk(h, cache=(state.keys[i], state.values[i]))
            state.keys[i], state.values[i] = cache
        state.length += 1
        self.counters["context_extends"] += 1
        return self.ln_f(h)[:, 0]

    # ----------------------------------------------------------------- heads
    def sem_logits(self, context: torch.Tensor) -> torch.Tensor:
        """(..., k, vocab) logits; row i scores the token i steps ahead."""
        out = self.sem_head(context)
        return out.view(*context.shape[:-1], self.config.k_future,
                        self.config.vocab_size)

    def cfm_field(self, xt: torch.Tensor, t, context: torch.Tensor,
                  tokens: torch.Tensor, drop_condition=False) -> torch.Tensor:
        """Predicted vector field given the flow point and conditioning.
        ``tokens`` is (..., k); ``drop_condition`` may be a bool or a (...,)
        bool tensor severing both context and token conditioning jointly."""
        zemb = self.cond_embed(tokens).flatten(-2).to(xt.dtype)
        cond = torch.cat([context.to(xt.dtype), zemb], dim=-1)
        if isinstance(drop_condition, bool):
            drop = None if not drop_condition else torch.ones(
                xt.shape[:-1], dtype=torch.bool, device=xt.device)
        else:
            drop = drop_condition
        self.counters["cfm_evals"] += 1
        return self.cfm(xt, t, cond, drop)

    # ------------------------------------------------------------------ loss
    def loss_forward(self, tokens: torch.Tensor, embeds: torch.Tensor,
                     lengths: torch.Tensor, rng,
                     field_override=None) -> LossBreakdown:
        """Teacher-forced losses over a padded batch.

        Per valid position the semantic loss averages next-k cross-entropies
        (positions past the sequence end are masked out); the flow loss draws
        one (t, x0) pair per frame, builds the straight-line flow point toward
        that frame's embedding, and regresses the target field under random
        joint condition-dropout.

        ``rng`` is one generator, or one per batch row (draws then depend
        only on the row, making duplicated rows reproduce exactly).
        ``field_override(xt, t, ctx, cond_tokens, drop, x0, x1)`` replaces the
        learned head; tests use it to pin oracle fields.
        """
        cfg = self.config
        b, m = tokens.shape
        if b == 0 or m == 0:
            raise ContractViolation("empty batch")
        ctx = self.encode_context(tokens=tokens, embeds=embeds)
        logits = self.sem_logits(ctx)
        k = cfg.k_future
        offsets = torch.arange(m).view(1, m, 1) + torch.arange(k).view(1, 1, k)
        valid = offsets < lengths.view(b, 1, 1)
        idx = offsets.clamp(max=m - 1).expand(b, m, k)
        targets = torch.gather(tokens.unsqueeze(-1).expand(b, m, k), 1, idx)
        sem = sem_loss(logits, targets, valid)

        if cfg.cfm_enabled:
            t_draw, x0, drop_draw = _draw_flow_randomness(
                rng, b, m, cfg.embed_dim, embeds.dtype, embeds.device)
            drop = drop_draw < cfg.cond_dropout_p
            x1 = embeds
            xt = ot_flow(t_draw.unsqueeze(-1), x0, x1, cfg.sigma_min)
            ut = ot_target_field(x0, x1, cfg.sigma_min)
            if field_override is not None:
                v = field_override(xt, t_draw, ctx, targets, drop, x0, x1)
            else:
                v = self.cfm_field(xt, t_draw, ctx, targets, drop)
            frame_valid = torch.arange(m).view(1, m) < lengths.view(b, 1)
            sq = (v - ut).pow(2).sum(dim=-1)
            cfm = (sq * frame_valid).sum() / frame_valid.sum()
        else:
            cfm = torch.zeros((), dtype=sem.dtype)

        if not (torch.isfinite(sem) and torch.isfinite(cfm)):
            raise NumericalError(
                f"non-finite loss (sem={float(sem)}, cfm={float(cfm)}, "
                f"batch={b}x{m})")
        return LossBreakdown(sem_loss=sem, cfm_loss=cfm)


def sem_loss(logits: torch.Tensor, targets: torch.Tensor,
             valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean negative log-likelihood over (position, head) slots; ``valid``
    masks slots whose target lies past the sequence end."""
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ContractViolation("target token id outside vocabulary")
    logp = F.log_softmax(logits, dim=-1)
    nll = -torch.gather(logp, -1, targets.unsqueeze(-1)).squeeze(-1)
    if valid is None:
        return nll.mean()
    return (nll * valid).sum() / valid.sum()


def _draw_flow_randomness(rng, b, m, d, dtype, device):
    """(t, x0, dropout-uniform) draws; one generator or one per batch row."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != b:
            raise ContractViolation("need one generator per batch row")
        ts, x0s, ds = [], [], []
        for g in rng:
            ts.append(torch.rand(m, generator=g, dtype=dtype))
            x0s.append(torch.randn(m, d, generator=g, dtype=dtype))
            ds.append(torch.rand(m, generator=g, dtype=dtype))
        return torch.stack(ts), torch.stack(x0s), torch.stack(ds)
    t = torch.rand(b, m, generator=rng, dtype=dtype)
    x0 = torch.randn(b, m, d, generator=rng, dtype=dtype)
    dr = torch.rand(b, m, generator=rng, dtype=dtype)
    return t, x0, dr


def _trunc_normal(shape, std: float, g: torch.Generator) -> torch.Tensor:
    """Normal(0, std) resampled until inside +-2 std."""
    x = torch.randn(shape, generator=g) * std
    bound = 2.0 * std
    for _ in range(16):
        bad = x.abs() > bound
        if not bad.any():
            break
        x = torch.where(bad, torch.randn(shape, generator=g) * std, x)
    return x.clamp_(-bound, bound)


def collate(utterances: Sequence, dtype=torch.float32):
    """Pad a list of corpus utterances into (tokens, embeds, lengths) tensors.
    Token padding uses the EOS id; padded slots never enter any loss."""
    if len(utterances) == 0:
        raise ContractViolation("empty batch")
    m = max(u.length for u in utterances)
    d = utterances[0].embeddings.shape[1]
    tokens = torch.full((len(utterances), m), EOS_ID, dtype=torch.long)
    embeds = torch.zeros(len(utterances), m, d, dtype=dtype)
    lengths = torch.zeros(len(utterances), dtype=torch.long)
    for i, u in enumerate(utterances):
        tokens[i, :u.length] = torch.as_tensor(u.tokens, dtype=torch.long)
        embeds[i, :u.length] = torch.as_tensor(u.embeddings, dtype=dtype)
        lengths[i] = u.length
    return tokens, embeds, lengths


def gradients(model: FlowSLM, loss: torch.Tensor) -> dict:
    """Exact gradients of ``loss`` for every named parameter (zeros for
    parameters off the active path)."""
    model.zero_grad(set_to_none=True)
    loss.backward()
    out = {}
    for name, p in model.named_parameters():
        out[name] = (p.grad.detach().clone() if p.grad is not None
                     else torch.zeros_like(p))
    return out
