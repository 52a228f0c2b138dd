"""Training loop and the ablation-grid driver.

One optimizer update per step: seeded epoch-shuffled batch, teacher-forced
losses, global-norm clipping, decoupled-weight-decay Adam under a
warmup+cosine (or constant) schedule. Everything derives from the config
seed, so reruns and checkpoint resumes are bit-identical.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_model, load_model
from .errors import ContractViolation, NumericalError
from .metrics import EvalReport, held_out_ce, paired_accuracy
from .model import FlowSLM, ModelConfig, collate
from .seeds import derive_seed, np_rng, torch_rng


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_utterances: int = 32
    lr_peak: float = 3e-3
    warmup_steps: int = 150
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ContractViolation("need 0 <= warmup_steps < steps")
        if self.grad_clip_norm <= 0:
            raise ContractViolation("grad_clip_norm must be > 0")
        if self.schedule not in ("constant", "cosine"):
            raise ContractViolation(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Closed-form learning rate at 0-based ``step``."""
    if step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr_peak
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Utterance indices for ``step``: epoch-shuffled by seeded permutation,
    partial final batch kept."""
    per_epoch = (n + batch - 1) // batch
    epoch, i = divmod(step, per_epoch)
    perm = np_rng(seed, "order", epoch).permutation(n)
    return perm[i * batch:(i + 1) * batch]


@dataclass
class TrainResult:
    model: FlowSLM
    log: list
    checkpoint_path: Optional[Path] = None


def _opt_state_tensors(model: FlowSLM, opt: torch.optim.AdamW) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"opt.exp_avg.{n}"] = st["exp_avg"]
            out[f"opt.exp_avg_sq.{n}"] = st["exp_avg_sq"]
            out[f"opt.step.{n}"] = st["step"].reshape(1)
    return out


def _restore_opt_state(model: FlowSLM, opt: torch.optim.AdamW, tensors: dict) -> None:
    for name, p in model.named_parameters():
        key = f"opt.exp_avg.{name}"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": tensors[f"opt.step.{name}"].reshape(()).clone(),
            "exp_avg": tensors[key].clone().reshape(p.shape),
            "exp_avg_sq": tensors[f"opt.exp_avg_sq.{name}"].clone().reshape(p.shape),
        }


def train(model_config: ModelConfig, cfg: TrainConfig, corpus: Sequence,
          out_dir=None, resume_from=None, log_sink=None) -> TrainResult:
    """Run ``cfg.steps`` updates over ``corpus``; returns the trained model
    and the metric log (one record per log interval). With ``out_dir`` set,
    writes ``metrics.jsonl`` and ``checkpoint.bin``."""
    if not corpus:
        raise ContractViolation("empty corpus")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        model, start_step, rng_state, opt_tensors, _ = load_model(resume_from)
        g_train = torch.Generator()
        g_train.set_state(torch.tensor(list(rng_state), dtype=torch.uint8))
    else:
        model = FlowSLM(model_config, init_seed=derive_seed(cfg.seed, "init"))
        start_step = 0
        opt_tensors = {}
        g_train = torch_rng(cfg.seed, "train-draws")

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_peak,
                            betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    if opt_tensors:
        _restore_opt_state(model, opt, opt_tensors)

    log: list = []
    t_start = time.monotonic()
    for step in range(start_step, cfg.steps):
        idx = _batch_indices(len(corpus), cfg.batch_utterances, cfg.seed, step)
        batch = [corpus[j] for j in idx]
        tokens, embeds, lengths = collate(batch)
        losses = model.loss_forward(tokens, embeds, lengths, g_train)
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        for name, p in model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in {name} at step {step}")
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        lr = lr_at(cfg, step)
        for group in opt.param_groups:
            group["lr"] = lr
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            post_clip = math.sqrt(sum(
                float(p.grad.pow(2).sum()) for p in model.parameters()
                if p.grad is not None))
        opt.step()
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            rec = {
                "step": step,
                "sem_loss": losses.sem_loss.item(),
                "cfm_loss": losses.cfm_loss.item(),
                "total": losses.total.item(),
                "lr": lr,
                "grad_norm": post_clip,
                "wall_time": time.monotonic() - t_start,
            }
            log.append(rec)
            if log_sink is not None:
                log_sink(rec)
        if out_dir is not None and cfg.checkpoint_every and \
                (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
            save_model(out_dir / f"checkpoint_step{step + 1:06d}.bin", model,
                       step=step + 1, rng_state=bytes(g_train.get_state().tolist()),
                       optimizer_state=_opt_state_tensors(model, opt))

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = out_dir / "checkpoint.bin"
        save_model(ckpt_path, model, step=cfg.steps,
                   rng_state=bytes(g_train.get_state().tolist()),
                   optimizer_state=_opt_state_tensors(model, opt))
        with open(out_dir / "metrics.jsonl", "w") as f:
            for rec in log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return TrainResult(model=model, log=log, checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationGrid:
    input_modes: tuple = ("token", "vector")
    k_values: tuple = (1, 2, 4)
    cfm_enabled: tuple = (False, True)

    def cells(self) -> list:
        """Cartesian product minus the unsupported token+flow combination."""
        out = []
        for mode, k, cfm in itertools.product(
                self.input_modes, self.k_values, self.cfm_enabled):
            if cfm and mode != "vector":
                continue
            out.append({"input_mode": mode, "k_future": k, "cfm_enabled": cfm})
        if not out:
            raise ContractViolation("ablation grid is empty")
        return out


def _cell_label(cell: dict) -> str:
    lbl = f"{cell['input_mode']}/sem-{cell['k_future']}"
    if cell["cfm_enabled"]:
        lbl += f"+cfm-{cell['k_future']}"
    return lbl


def run_ablation(grid: AblationGrid, model_base: ModelConfig, train_cfg: TrainConfig,
                 corpus: Sequence, eval_sets: dict, seeds: Sequence[int] = (0,),
                 out_path=None, keep_models: bool = False) -> list:
    """Train one model per (cell, seed) with shared data order, evaluate on
    the shared minimal-pair sets and held-out CE, and return one row per cell
    with per-seed metrics plus means. Failed cells are marked, not fatal.

    ``eval_sets`` keys: "lexical" / "syntactic" (MinimalPairSet, optional)
    and "heldout" (utterance list, optional).
    """
    rows = []
    for cell in grid.cells():
        row = {"cell": _cell_label(cell), **cell, "seeds": list(seeds),
               "runs": [], "error": None}
        if keep_models:
            row["models"] = []
        for seed in seeds:
            try:
                mc = ModelConfig(**{**model_base.to_dict(), **cell})
                tc = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
                result = train(mc, tc, corpus)
                run = {"seed": seed}
                if eval_sets.get("lexical") is not None:
                    run["lexical_acc"] = paired_accuracy(result.model,
                                                         eval_sets["lexical"])
                if eval_sets.get("syntactic") is not None:
                    run["syntactic_acc"] = paired_accuracy(result.model,
                                                           eval_sets["syntactic"])
                if eval_sets.get("heldout"):
                    run["ce"] = held_out_ce(result.model, eval_sets["heldout"])
                row["runs"].append(run)
                if keep_models:
                    row["models"].append(result.model)
            except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                row["error"] = f"seed {seed}: {exc!r}"
                break
        for key in ("lexical_acc", "syntactic_acc", "ce"):
            vals = [r[key] for r in row["runs"] if key in r]
            if vals:
                row[f"mean_{key}"] = float(np.mean(vals))
        rows.append(row)
    if out_path is not None:
        serializable = [{k: v for k, v in row.items() if k != "models"}
                        for row in rows]
        payload = {
            "model_base": model_base.to_dict(),
            "train_config": train_cfg.to_dict(),
            "rows": serializable,
        }
        Path(out_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return rows


def format_ablation_table(rows: Sequence[dict]) -> str:
    """Fixed-width summary mirroring the (input, objective, accs, CE) layout."""
    header = f"{'#':>2}  {'input':<7}{'objective':<16}{'lex acc':>8}{'syn acc':>8}{'CE':>7}"
    lines = [header, "-" * len(header)]
    for i, row in enumerate(rows, 1):
        if row.get("error"):
            lines.append(f"{i:>2}  {row['input_mode']:<7}{row['cell']:<16}  FAILED: {row['error']}")
            continue
        lex = row.get("mean_lexical_acc")
        syn = row.get("mean_syntactic_acc")
        ce = row.get("mean_ce")
        obj = f"sem-{row['k_future']}" + (f"+cfm-{row['k_future']}" if row["cfm_enabled"] else "")
        lines.append(
            f"{i:>2}  {row['input_mode']:<7}{obj:<16}"
            f"{'' if lex is None else f'{lex:8.3f}'}"
            f"{'' if syn is None else f'{syn:8.3f}'}"
            f"{'' if ce is None else f'{ce:7.3f}'}")
    return "\n".join(lines)
