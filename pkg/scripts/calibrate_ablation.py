"""Calibration sweep for the ablation defaults: trains the three key cells
(vector/k=1, vector/k=4, token/k=1) on one corpus and logs lexical paired
accuracy + held-out CE at snapshots, so step budgets and the leak strength
can be pinned where the separations are widest.

Usage: python scripts/calibrate_ablation.py [beta] [out.txt]
"""
import sys
import time
import warnings

import torch

import flowlm
from flowlm.metrics import held_out_ce, paired_accuracy
from flowlm.model import ModelConfig, collate
from flowlm.seeds import derive_seed, torch_rng
from flowlm.trainer import TrainConfig, _batch_indices, lr_at

warnings.filterwarnings("ignore")


def run(beta: float, out_path: str, snapshots=(200, 400, 800, 1600), seed=0,
        noise_sigma=0.1):
    g = flowlm.make_default_grammar(seed=11)
    r = flowlm.RenderSpec(seed=12, leak_beta=beta, noise_sigma=noise_sigma)
    corpus = flowlm.generate_corpus(g, r, 1200, seed=100)
    heldout = flowlm.generate_corpus(g, r, 120, seed=20000)
    lex = flowlm.make_minimal_pairs(g, r, "lexical", 150, seed=30000)
    out = open(out_path, "a")
    t0 = time.time()
    for mode, k in (("vector", 1), ("vector", 4), ("token", 1)):
        mc = ModelConfig(input_mode=mode, d_model=96, n_layers=3, n_heads=3,
                         k_future=k, cfm_enabled=False,
                         vocab_size=g.vocab_size, embed_dim=r.embed_dim)
        tc = TrainConfig(steps=max(snapshots), batch_utterances=24, lr_peak=3e-3,
                         warmup_steps=30, schedule="constant", log_every=0, seed=seed)
        model = flowlm.FlowSLM(mc, init_seed=derive_seed(seed, "init"))
        opt = torch.optim.AdamW(model.parameters(), lr=tc.lr_peak,
                                betas=(tc.adam_beta1, tc.adam_beta2),
                                eps=tc.adam_eps, weight_decay=tc.weight_decay)
        g_train = torch_rng(seed, "train-draws")
        for step in range(max(snapshots)):
            idx = _batch_indices(len(corpus), tc.batch_utterances, seed, step)
            tokens, embeds, lengths = collate([corpus[j] for j in idx])
            losses = model.loss_forward(tokens, embeds, lengths, g_train)
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
            for grp in opt.param_groups:
                grp["lr"] = lr_at(tc, step)
            opt.step()
            if (step + 1) in snapshots:
                acc = paired_accuracy(model, lex)
                ce = held_out_ce(model, heldout)
                msg = (f"beta={beta} sigma={noise_sigma} {mode}-k{k} "
                       f"step={step + 1}: lex={acc:.3f} ce={ce:.3f} "
                       f"[{time.time() - t0:.0f}s]")
                print(msg, flush=True)
                out.write(msg + "\n")
                out.flush()
    out.close()


if __name__ == "__main__":
    beta = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
    out_path = sys.argv[2] if len(sys.argv) > 2 else "/tmp/calib.txt"
    sigma = float(sys.argv[3]) if len(sys.argv) > 3 else 0.1
    run(beta, out_path, noise_sigma=sigma)
