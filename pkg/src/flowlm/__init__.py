"""flowlm: joint autoregressive modeling of discrete tokens and continuous
frame embeddings with a conditional flow-matching head, over a synthetic
speech-like corpus, plus training / generation / evaluation harnesses."""

from .corpus import (GrammarSpec, RenderSpec, Utterance, MinimalPairSet,
                     generate_corpus, encode, decode, recover_attribute,
                     make_minimal_pairs, make_consistency_pairs,
                     grammar_logprob, make_default_grammar, matches_grammar,
                     SILENCE_ID, EOS_ID)
from .errors import (ConfigurationError, ContractViolation, GenerationError,
                     NumericalError)
from .flow import (FlowPoint, SolverSpec, cfg_combine, cfm_loss, ode_sample,
                   ot_flow, ot_target_field, sample_prior)
from .metrics import (EvalReport, acoustic_consistency_score, frechet_distance,
                      gen_ppl, held_out_ce, paired_accuracy, sequence_logprob,
                      speaker_similarity)
from .model import FlowSLM, LossBreakdown, ModelConfig, collate, gradients, sem_loss
from .sampler import (Continuation, GenerationConfig, continue_prompt,
                      continue_tokens, generate_continuations, nucleus_sample)
from .trainer import AblationGrid, TrainConfig, lr_at, run_ablation, train

__version__ = "0.1.0"
