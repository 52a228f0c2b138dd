"""Command-line front door: data generation, training, prompted generation,
evaluation, and the ablation grid. Every command resolves one config file
against defaults, persists the resolved config next to its outputs, and
stamps artifacts with the config hash; reruns with identical configs produce
identical artifact bytes (the metric log's wall-time field is the one
documented exception).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_model, save_model
from .corpus import generate_corpus, make_consistency_pairs, make_minimal_pairs
from .corpus_io import (load_consistency, load_corpus, load_pairs,
                        save_consistency, save_corpus, save_pairs)
from .errors import ContractViolation
from .metrics import (EvalReport, consistency_accuracy, corpus_ppl,
                      frechet_distance, gen_ppl, held_out_ce, paired_accuracy,
                      speaker_similarity)
from .sampler import generate_continuations
from .seeds import derive_seed, np_rng
from .trainer import format_ablation_table, run_ablation, train


def _load(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return cfgmod.load_config(args.config, overrides)


def _say(args, *msg) -> None:
    if args.verbose:
        print(*msg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(cfg: dict, out: Path) -> dict:
    cfgmod.write_resolved(cfg, out / "resolved_config.toml")
    return {"config_hash": cfgmod.config_hash(cfg),
            "data_hash": cfgmod.data_hash(cfg)}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stamp = _stamp(cfg, out)
    grammar = cfgmod.build_grammar(cfg)
    render = cfgmod.build_render(cfg)
    root = cfg["run"]["seed"]
    c = cfg["corpus"]

    train_seed = derive_seed(root, "data", "train")
    heldout_seed = derive_seed(root, "data", "heldout")
    _say(args, f"generating {c['n_train']} train + {c['n_heldout']} held-out utterances")
    save_corpus(out / "train", generate_corpus(grammar, render, c["n_train"], train_seed),
                grammar, render, train_seed, extra=stamp)
    save_corpus(out / "heldout",
                generate_corpus(grammar, render, c["n_heldout"], heldout_seed),
                grammar, render, heldout_seed, extra=stamp)
    lex_seed = derive_seed(root, "data", "pairs-lexical")
    syn_seed = derive_seed(root, "data", "pairs-syntactic")
    cons_seed = derive_seed(root, "data", "pairs-consistency")
    save_pairs(out / "pairs_lexical",
               make_minimal_pairs(grammar, render, "lexical", c["n_lexical_pairs"], lex_seed),
               lex_seed, extra=stamp)
    save_pairs(out / "pairs_syntactic",
               make_minimal_pairs(grammar, render, "syntactic", c["n_syntactic_pairs"], syn_seed),
               syn_seed, extra=stamp)
    save_consistency(out / "consistency",
                     make_consistency_pairs(grammar, render, c["n_consistency_pairs"], cons_seed),
                     cons_seed, extra=stamp)
    manifest = {
        "kind": "dataset",
        "counts": {
            "train": c["n_train"], "heldout": c["n_heldout"],
            "lexical_pairs": c["n_lexical_pairs"],
            "syntactic_pairs": c["n_syntactic_pairs"],
            "consistency_pairs": c["n_consistency_pairs"],
        },
        "seeds": {"train": train_seed, "heldout": heldout_seed,
                  "lexical": lex_seed, "syntactic": syn_seed,
                  "consistency": cons_seed},
        **stamp,
    }
    (out / "data_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"dataset written to {out} (hash {stamp['data_hash']})")
    return 0


def _check_data_dir(path: Path) -> dict:
    mpath = path / "data_manifest.json"
    if not mpath.exists():
        raise ContractViolation(f"{path} is not a dataset directory (no data_manifest.json)")
    return json.loads(mpath.read_text())


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stamp = _stamp(cfg, out)
    data_dir = Path(args.data)
    data_manifest = _check_data_dir(data_dir)
    if data_manifest["data_hash"] != stamp["data_hash"]:
        raise ContractViolation(
            f"dataset {data_dir} was built from a different data config "
            f"({data_manifest['data_hash']} != {stamp['data_hash']})")
    corpus, grammar, render, _ = load_corpus(data_dir / "train")
    mc = cfgmod.build_model_config(cfg)
    tc = cfgmod.build_train_config(cfg)
    _say(args, f"training {mc.input_mode}/k={mc.k_future}"
               f"{'+cfm' if mc.cfm_enabled else ''} for {tc.steps} steps")
    result = train(mc, tc, corpus, out_dir=out)
    save_model(result.checkpoint_path, result.model, step=tc.steps,
               meta={**stamp, "train_config": tc.to_dict()})
    if args.plot:
        from .plots import loss_curves
        loss_curves(result.log, out / "loss_curves.png")
    final = result.log[-1] if result.log else {}
    print(f"trained {tc.steps} steps; final total loss "
          f"{final.get('total', float('nan')):.4f}; checkpoint at "
          f"{result.checkpoint_path}")
    return 0


def _select_prompts(heldout, n_prompts: int, prompt_frames: int, root_seed: int):
    eligible = [u for u in heldout if u.length >= prompt_frames + 4]
    if len(eligible) < n_prompts:
        raise ContractViolation(
            f"only {len(eligible)} held-out utterances have >= "
            f"{prompt_frames + 4} frames; need {n_prompts}")
    idx = np_rng(root_seed, "eval", "prompts").choice(
        len(eligible), size=n_prompts, replace=False)
    return [eligible[i] for i in sorted(idx)]


def _generate_for_eval(model, cfg, heldout, stamp):
    e = cfg["eval"]
    gen = cfgmod.build_generation_config(cfg)
    prompts = _select_prompts(heldout, e["n_prompts"], e["prompt_frames"],
                              cfg["run"]["seed"])
    groups = []
    for copy in range(e["continuations_per_prompt"]):
        gen_copy = replace(gen, seed=derive_seed(gen.seed, "copy", copy))
        groups.append(generate_continuations(model, prompts, gen_copy,
                                             e["prompt_frames"]))
    return prompts, [c for group in groups for c in group]


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stamp = _stamp(cfg, out)
    model, _, _, _, meta = load_model(args.ckpt)
    if model.config.input_mode != "vector":
        raise ContractViolation(
            "prompted generation needs a vector-input flow model checkpoint")
    data_dir = Path(args.data)
    _check_data_dir(data_dir)
    heldout, grammar, render, _ = load_corpus(data_dir / "heldout")
    model.eval()
    prompts, conts = _generate_for_eval(model, cfg, heldout, stamp)
    from .corpus import Utterance
    as_utts = [Utterance(c.tokens, c.embeddings,
                         np.zeros(render.attr_dim, dtype=np.float32))
               for c in conts]
    save_corpus(out / "continuations", as_utts, grammar, render,
                cfg["run"]["seed"], extra={**stamp, "kind_detail": "continuations"})
    sidecar = {
        "generation": cfg["generation"],
        "prompt_frames": cfg["eval"]["prompt_frames"],
        "n_prompts": cfg["eval"]["n_prompts"],
        "continuations_per_prompt": cfg["eval"]["continuations_per_prompt"],
        "stopped_by": {s: sum(1 for c in conts if c.stopped_by == s)
                       for s in ("eos", "max_frames")},
        **stamp,
    }
    (out / "generation.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(conts)} continuations to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stamp = _stamp(cfg, out)
    data_dir = Path(args.data)
    _check_data_dir(data_dir)
    model, _, _, _, meta = load_model(args.ckpt)
    if meta.get("data_hash") and meta["data_hash"] != stamp["data_hash"]:
        raise ContractViolation(
            f"checkpoint was trained on data hash {meta['data_hash']}, "
            f"but config resolves to {stamp['data_hash']}")
    model.eval()
    heldout, grammar, render, _ = load_corpus(data_dir / "heldout")
    report = EvalReport(config_hash=stamp["config_hash"], seed=cfg["run"]["seed"])

    lex = load_pairs(data_dir / "pairs_lexical")
    syn = load_pairs(data_dir / "pairs_syntactic")
    report.add("lexical_acc", paired_accuracy(model, lex), len(lex.pairs))
    report.add("syntactic_acc", paired_accuracy(model, syn), len(syn.pairs))
    report.add("held_out_ce", held_out_ce(model, heldout), len(heldout))

    if model.config.input_mode == "vector" and model.config.cfm_enabled:
        _say(args, "generating prompted continuations")
        prompts, conts = _generate_for_eval(model, cfg, heldout, stamp)
        report.add("gen_ppl", gen_ppl(conts, grammar), len(conts))
        report.add("corpus_ppl", corpus_ppl(heldout, grammar), len(heldout))
        sims = []
        ncopy = cfg["eval"]["continuations_per_prompt"]
        pf = cfg["eval"]["prompt_frames"]
        for i, c in enumerate(conts):
            if len(c.embeddings) >= 4:
                prompt = prompts[i % len(prompts)]
                sims.append(speaker_similarity(prompt.embeddings[:pf],
                                               c.embeddings, render))
        report.add("speaker_sim", float(np.mean(sims)), len(sims))
        gen_frames = np.concatenate([c.embeddings for c in conts])
        ref_frames = np.concatenate([u.embeddings for u in heldout])
        report.add("fsd_frames", frechet_distance(gen_frames, ref_frames),
                   len(gen_frames))
        gen_utt = np.stack([c.embeddings.mean(axis=0) for c in conts])
        ref_utt = np.stack([u.embeddings.mean(axis=0) for u in heldout])
        report.add("fsd_utterance", frechet_distance(gen_utt, ref_utt), len(gen_utt))
        silence_frac = float(np.mean(
            [np.mean(c.tokens == 0) for c in conts]))
        report.add("silence_fraction", silence_frac, len(conts))
        cons_pairs = load_consistency(data_dir / "consistency")
        n_cons = min(len(cons_pairs), cfg["eval"]["n_consistency_pairs"])
        report.add("consistency_acc",
                   consistency_accuracy(model, cons_pairs[:n_cons],
                                        seed=derive_seed(cfg["run"]["seed"], "eval", "cons")),
                   n_cons)
    report.save(out / "eval_report.json")
    print("eval report:")
    for name in sorted(report.metrics):
        print(f"  {name:<18} {report.metrics[name]:>10.4f}   (n={report.counts[name]})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stamp = _stamp(cfg, out)
    data_dir = Path(args.data)
    data_manifest = _check_data_dir(data_dir)
    if data_manifest["data_hash"] != stamp["data_hash"]:
        raise ContractViolation(
            f"dataset {data_dir} does not match this config's data sections")
    corpus, grammar, render, _ = load_corpus(data_dir / "train")
    heldout, _, _, _ = load_corpus(data_dir / "heldout")
    lex = load_pairs(data_dir / "pairs_lexical")
    syn = load_pairs(data_dir / "pairs_syntactic")
    grid = cfgmod.build_ablation_grid(cfg)
    mc = cfgmod.build_model_config(cfg)
    tc = cfgmod.build_train_config(cfg)
    seeds = [derive_seed(cfg["run"]["seed"], "ablate", s)
             for s in cfg["ablation"]["seeds"]]
    _say(args, f"running {len(grid.cells())} cells x {len(seeds)} seeds")
    rows = run_ablation(grid, mc, tc, corpus,
                        {"lexical": lex, "syntactic": syn, "heldout": heldout},
                        seeds=seeds, out_path=out / "ablation.json")
    if args.plot:
        from .plots import ablation_bars
        ablation_bars(rows, out / "ablation.png")
    print(format_ablation_table(rows))
    failed = [r for r in rows if r.get("error")]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowlm",
        description="joint token/embedding language modeling with a flow-matching head")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, ckpt=False):
        sp.add_argument("--config", type=str, default=None,
                        help="TOML config (defaults used when omitted)")
        sp.add_argument("--out", type=str, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override run seed")
        sp.add_argument("--verbose", action="store_true")
        sp.add_argument("--plot", action="store_true",
                        help="emit PNG charts where supported")
        if data:
            sp.add_argument("--data", type=str, required=True,
                            help="dataset directory from make-data")
        if ckpt:
            sp.add_argument("--ckpt", type=str, required=True,
                            help="checkpoint file from train")

    common(sub.add_parser("make-data", help="generate corpus + benchmark sets"))
    common(sub.add_parser("train", help="train one model"), data=True)
    common(sub.add_parser("generate", help="prompted continuation"), data=True, ckpt=True)
    common(sub.add_parser("eval", help="full evaluation report"), data=True, ckpt=True)
    common(sub.add_parser("ablate", help="train/evaluate the ablation grid"), data=True)
    return p


_COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(torch.get_num_threads())
    try:
        return _COMMANDS[args.command](args)
    except (ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
