"""Synthetic order-2 Markov token streams.

The stream follows a seeded deterministic transition table with probability
1 - noise and draws a uniform token otherwise, which gives the model real
structure to learn while keeping the exact conditional distribution
P(next | prev2, prev1) = noise/vocab + (1-noise)*[next == table[prev2, prev1]]
available in closed form for oracle checks.
"""

from __future__ import annotations

import numpy as np

DEFAULT_NOISE = 0.3


def transition_table(seed: int, vocab: int) -> np.ndarray:
    """Deterministic (vocab, vocab) map from (prev2, prev1) to the modal next token."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=(vocab, vocab), dtype=np.int64)


def conditional_probs(seed: int, vocab: int, noise: float = DEFAULT_NOISE) -> np.ndarray:
    """Exact P(next | prev2, prev1) as a (vocab, vocab, vocab) array."""
    table = transition_table(seed, vocab)
    probs = np.full((vocab, vocab, vocab), noise / vocab)
    idx = np.indices((vocab, vocab))
    probs[idx[0], idx[1], table] += 1.0 - noise
    return probs


def synth_corpus(seed: int, length: int, vocab: int,
                 noise: float = DEFAULT_NOISE) -> np.ndarray:
    """Generate a deterministic token stream of the given length."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if vocab < 1:
        raise ValueError(f"vocab must be >= 1, got {vocab}")
    table = transition_table(seed, vocab)
    rng = np.random.default_rng(seed + 1)
    use_noise = rng.random(length) < noise
    noise_toks = rng.integers(0, vocab, size=length, dtype=np.int64)

    out = np.empty(length, dtype=np.int64)
    prev2 = int(noise_toks[0] if length else 0)
    prev1 = int(rng.integers(0, vocab))
    for i in range(length):
        tok = int(noise_toks[i]) if use_noise[i] else int(table[prev2, prev1])
        out[i] = tok
        prev2, prev1 = prev1, tok
    return out


def train_validation_split(corpus: np.ndarray, val_tokens: int,
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Reserve the corpus tail for validation; splits are disjoint by construction."""
    corpus = np.asarray(corpus)
    if not 0 < val_tokens < corpus.size:
        raise ValueError(
            f"val_tokens must be in (0, {corpus.size}), got {val_tokens}"
        )
    return corpus[:-val_tokens], corpus[-val_tokens:]
