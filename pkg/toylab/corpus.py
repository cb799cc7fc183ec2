"""
Synthetic order-2 Markov token streams standing in for a natural-language corpus.

Every current token owns a fixed seeded pool of `support` candidate
successors; each (previous, current) context draws its own Dirichlet weights
over that pool. The stream therefore carries bigram structure a small model
picks up within a few hundred steps, and order-2 structure on top of it.
"""
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from errors import ConfigError


@dataclass(frozen=True)
class TransitionTable:
    vocab: int
    next_tokens: np.ndarray  # (vocab * vocab, support)
    probs: np.ndarray  # (vocab * vocab, support)

    def dense(self):
        """(vocab, vocab, vocab) array of P(next | prev, cur); duplicates summed."""
        out = np.zeros((self.vocab * self.vocab, self.vocab))
        rows = np.repeat(np.arange(self.vocab * self.vocab), self.next_tokens.shape[1])
        np.add.at(out, (rows, self.next_tokens.ravel()), self.probs.ravel())
        return out.reshape(self.vocab, self.vocab, self.vocab)


def transition_table(seed, vocab, support=8, concentration=0.5):
    if vocab < 1:
        raise ConfigError(f"vocab must be >= 1, got {vocab}")
    support = min(support, vocab)
    rng = np.random.default_rng([seed, vocab])
    pools = rng.integers(0, vocab, size=(vocab, support))
    # row prev * vocab + cur holds the pool of cur
    next_tokens = np.tile(pools, (vocab, 1))
    probs = rng.dirichlet(np.full(support, concentration), size=vocab * vocab)
    return TransitionTable(vocab=vocab, next_tokens=next_tokens, probs=probs)


def synth_corpus(seed, length, vocab=256, support=8):
    """Deterministic token stream of `length` ids in [0, vocab)."""
    if length < 1:
        raise ConfigError(f"length must be >= 1, got {length}")
    table = transition_table(seed, vocab, support)
    rng = np.random.default_rng([seed, vocab, length])
    cumulative = np.cumsum(table.probs, axis=1)
    cumulative[:, -1] = 1.0
    cum_rows = cumulative.tolist()
    next_rows = table.next_tokens.tolist()
    draws = rng.random(length).tolist()

    out = [0] * length
    prev, cur = (int(t) for t in rng.integers(0, vocab, size=2))
    for i in range(length):
        ctx = prev * vocab + cur
        row = cum_rows[ctx]
        nxt = next_rows[ctx][min(bisect_right(row, draws[i]), len(row) - 1)]
        out[i] = nxt
        prev, cur = cur, nxt
    return np.asarray(out, dtype=np.int64)


def split_corpus(tokens, val_fraction=0.1):
    """(train head, validation tail); disjoint by construction."""
    tokens = np.asarray(tokens)
    n_val = int(round(tokens.size * val_fraction))
    if n_val < 1 or n_val >= tokens.size:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split of {tokens.size} tokens")
    return tokens[:-n_val], tokens[-n_val:]
