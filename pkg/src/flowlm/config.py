"""Run configuration: one human-editable TOML file per run, resolved against
defaults, persisted next to every run's outputs, and hashed so artifacts can
be traced back to the exact settings that produced them.

All randomness flows from ``[run].seed`` through named substreams (data /
train / generation / eval); the data-relevant sections hash separately so a
checkpoint can be verified against the corpus it was trained on.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .corpus import GrammarSpec, RenderSpec, make_default_grammar
from .errors import ContractViolation
from .flow import SolverSpec
from .model import ModelConfig
from .sampler import GenerationConfig
from .seeds import derive_seed
from .trainer import AblationGrid, TrainConfig


def default_config() -> dict:
    return {
        "run": {"seed": 0},
        "grammar": {"vocab_size": 64, "n_words": 40},
        "render": {
            "embed_dim": 32, "attr_dim": 8, "token_dim": 10,
            "leak_beta": 0.5, "smooth_alpha": 0.9, "noise_sigma": 0.1,
            "n_speakers": 8,
        },
        "corpus": {
            "n_train": 5000, "n_heldout": 500,
            "n_lexical_pairs": 400, "n_syntactic_pairs": 400,
            "n_consistency_pairs": 200,
        },
        "model": {
            "input_mode": "vector", "d_model": 128, "n_layers": 4,
            "n_heads": 4, "k_future": 4, "cfm_enabled": True,
            "cfm_blocks": 3, "cfm_hidden": 256, "time_embed_dim": 32,
            "cond_dropout_p": 0.05, "max_seq_len": 256,
        },
        "train": {
            "steps": 3000, "batch_utterances": 32, "lr_peak": 3e-3,
            "warmup_steps": 150, "schedule": "cosine",
            "adam_beta1": 0.9, "adam_beta2": 0.95, "adam_eps": 1e-8,
            "weight_decay": 0.01, "grad_clip_norm": 1.0,
            "checkpoint_every": 0, "log_every": 50,
        },
        "generation": {
            "top_p": 0.95, "silence_penalty": 10.0, "cfg_scale": 0.3,
            "prior_temperature": 0.8, "solver_method": "midpoint",
            "nfe": 64, "max_frames": 125,
        },
        "eval": {
            "prompt_frames": 12, "n_prompts": 100,
            "continuations_per_prompt": 4, "n_consistency_pairs": 200,
        },
        "ablation": {
            "input_modes": ["token", "vector"], "k_values": [1, 2, 4],
            "cfm": [False, True], "seeds": [0],
        },
    }


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve a TOML file (or nothing) against defaults. Unknown sections or
    keys are rejected so typos fail loudly."""
    cfg = default_config()
    if path is not None:
        with open(path, "rb") as f:
            user = tomllib.load(f)
        for section, values in user.items():
            if section not in cfg:
                raise ContractViolation(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ContractViolation(f"[{section}] must be a table")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ContractViolation(f"unknown config key {section}.{key}")
                cfg[section][key] = val
    for dotted, val in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ContractViolation(f"unknown config key {dotted}")
        cfg[section][key] = val
    return cfg


def _canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:12]


def data_hash(cfg: dict) -> str:
    """Hash of the sections that determine the corpus bytes."""
    sub = {k: cfg[k] for k in ("run", "grammar", "render", "corpus")}
    return hashlib.sha256(_canonical(sub).encode()).hexdigest()[:12]


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ContractViolation(f"cannot serialize config value {v!r}")


def write_resolved(cfg: dict, path) -> None:
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            lines.append(f"{key} = {_toml_value(val)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_grammar(cfg: dict) -> GrammarSpec:
    return make_default_grammar(
        vocab_size=cfg["grammar"]["vocab_size"],
        n_words=cfg["grammar"]["n_words"],
        seed=derive_seed(cfg["run"]["seed"], "grammar"),
    )


def build_render(cfg: dict) -> RenderSpec:
    r = cfg["render"]
    return RenderSpec(
        embed_dim=r["embed_dim"], attr_dim=r["attr_dim"], token_dim=r["token_dim"],
        leak_beta=r["leak_beta"], smooth_alpha=r["smooth_alpha"],
        noise_sigma=r["noise_sigma"], n_speakers=r["n_speakers"],
        vocab_size=cfg["grammar"]["vocab_size"],
        seed=derive_seed(cfg["run"]["seed"], "render"),
    )


def build_model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["vocab_size"] = cfg["grammar"]["vocab_size"]
    m["embed_dim"] = cfg["render"]["embed_dim"]
    return ModelConfig(**m)


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=derive_seed(cfg["run"]["seed"], "train"),
                       **cfg["train"])


def build_generation_config(cfg: dict) -> GenerationConfig:
    gsec = cfg["generation"]
    return GenerationConfig(
        top_p=gsec["top_p"], silence_penalty=gsec["silence_penalty"],
        cfg_scale=gsec["cfg_scale"], prior_temperature=gsec["prior_temperature"],
        solver=SolverSpec(gsec["solver_method"], gsec["nfe"]),
        max_frames=gsec["max_frames"],
        seed=derive_seed(cfg["run"]["seed"], "generation"),
    )


def build_ablation_grid(cfg: dict) -> AblationGrid:
    a = cfg["ablation"]
    return AblationGrid(input_modes=tuple(a["input_modes"]),
                        k_values=tuple(a["k_values"]),
                        cfm_enabled=tuple(a["cfm"]))
