"""Calibration for the flow-head interference cells: trains vector/k=1 and
vector/k=4 with the flow head enabled and logs lexical accuracy against the
no-flow-head baselines, at the same step budget used by the main sweep."""
import sys
import time
import warnings

import flowlm
from flowlm.metrics import held_out_ce, paired_accuracy
from flowlm.model import ModelConfig
from flowlm.trainer import TrainConfig, train

warnings.filterwarnings("ignore")


def run(steps=800, out_path="/tmp/calib_cfm.txt", seeds=(0, 1, 2)):
    g = flowlm.make_default_grammar(seed=11)
    r = flowlm.RenderSpec(seed=12, leak_beta=0.5)
    corpus = flowlm.generate_corpus(g, r, 1200, seed=100)
    heldout = flowlm.generate_corpus(g, r, 120, seed=20000)
    lex = flowlm.make_minimal_pairs(g, r, "lexical", 150, seed=30000)
    out = open(out_path, "a")
    t0 = time.time()
    for k, cfm in ((4, False), (1, True), (4, True)):
        for seed in seeds:
            mc = ModelConfig(input_mode="vector", d_model=96, n_layers=3,
                             n_heads=3, k_future=k, cfm_enabled=cfm,
                             cfm_hidden=192, cfm_blocks=2,
                             vocab_size=g.vocab_size, embed_dim=r.embed_dim)
            tc = TrainConfig(steps=steps, batch_utterances=24, lr_peak=3e-3,
                             warmup_steps=40, log_every=0, seed=seed)
            res = train(mc, tc, corpus)
            acc = paired_accuracy(res.model, lex)
            ce = held_out_ce(res.model, heldout)
            msg = (f"k={k} cfm={cfm} seed={seed} steps={steps}: lex={acc:.3f} "
                   f"ce={ce:.3f} [{time.time() - t0:.0f}s]")
            print(msg, flush=True)
            out.write(msg + "\n")
            out.flush()
    out.close()


if __name__ == "__main__":
    run(steps=int(sys.argv[1]) if len(sys.argv) > 1 else 800,
        out_path=sys.argv[2] if len(sys.argv) > 2 else "/tmp/calib_cfm.txt")
