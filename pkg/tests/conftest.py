import numpy as np
import pytest
import torch

import flowlm
from flowlm.corpus import GrammarSpec, RenderSpec


@pytest.fixture(scope="session")
def toy_grammar():
    """Two equiprobable one-word sentences with short silences; everything
    hand-computable and near-deterministic (entropy ~0.4 nats/token)."""
    return GrammarSpec(
        vocab_size=8,
        lexicon={0: (2, 3), 1: (4, 5)},
        word_classes={"A": (0,), "B": (1,)},
        templates=(("A",), ("B",)),
        seed=0,
        p_edge=0.9,
        p_sep=0.9,
    )


@pytest.fixture(scope="session")
def grammar():
    return flowlm.make_default_grammar(seed=11)


@pytest.fixture(scope="session")
def render(grammar):
    return RenderSpec(seed=12, vocab_size=grammar.vocab_size)


@pytest.fixture(scope="session")
def small_corpus(grammar, render):
    return flowlm.generate_corpus(grammar, render, 48, seed=100)


def linear_probe_accuracy(frames, labels, codebook):
    """Least-squares map frame -> codebook row, decoded by largest dot
    product. Scores are affine in the frame, so this is a linear classifier."""
    x = np.asarray(frames, dtype=np.float64)
    y = codebook[labels]
    design = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ coef
    decoded = np.argmax(pred @ codebook.T, axis=1)
    return float(np.mean(decoded == labels))


@pytest.fixture
def probe():
    return linear_probe_accuracy
