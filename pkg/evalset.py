"""
evalset.py

The fixed held-out evaluation set: built once from a token stream, stored,
and reused unchanged for every checkpoint so perplexities are comparable.

File layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header
{n_batches, rows, seq_len, vocab_size, seed, corpus_id}, then every token id
as a little-endian u32 in batch, row, position order.
"""
import contextlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from marshmallow import ValidationError

from errors import CorruptionError, EvaluationError, QuantAuditError
from schemas import EvalSetHeaderSchema

MAGIC = b"QAEVSET1"
TOKEN_DTYPE = np.dtype("<u4")


@dataclass
class EvalSet:
    batches: np.ndarray  # (n_batches, rows, seq_len) token ids
    vocab_size: int
    seed: int
    corpus_id: str

    @property
    def n_batches(self):
        return int(self.batches.shape[0])

    @property
    def rows(self):
        return int(self.batches.shape[1])

    @property
    def seq_len(self):
        return int(self.batches.shape[2])

    def header(self):
        return {
            "n_batches": self.n_batches, "rows": self.rows, "seq_len": self.seq_len,
            "vocab_size": int(self.vocab_size), "seed": int(self.seed), "corpus_id": self.corpus_id,
        }

    def __eq__(self, other):
        return (isinstance(other, EvalSet) and self.header() == other.header()
                and np.array_equal(self.batches, other.batches))


@dataclass(frozen=True)
class PerplexityResult:
    ppl: float
    mean_ce: float
    tokens_counted: int


def build_evalset(corpus, n_batches=32, rows=4, seq_len=512, seed=0, vocab_size=None, corpus_id="corpus"):
    """Cut n_batches * rows non-overlapping windows of seq_len tokens out of `corpus`.

    The corpus is split into consecutive windows; a seeded permutation picks
    which windows are used and in which order.
    """
    tokens = np.asarray(corpus, dtype=np.int64).ravel()
    needed = n_batches * rows * seq_len
    if tokens.size < needed:
        raise QuantAuditError(f"Corpus has {tokens.size} tokens, evalset needs {needed}")
    if vocab_size is None:
        vocab_size = int(tokens.max()) + 1 if tokens.size else 1
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise QuantAuditError(f"Token ids must lie in [0, {vocab_size})")

    n_windows = tokens.size // seq_len
    windows = tokens[: n_windows * seq_len].reshape(n_windows, seq_len)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n_windows)[: n_batches * rows]
    batches = windows[chosen].reshape(n_batches, rows, seq_len).astype(np.uint32)
    return EvalSet(batches=batches, vocab_size=int(vocab_size), seed=int(seed), corpus_id=str(corpus_id))


def save_evalset(es, path):
    header = json.dumps(EvalSetHeaderSchema().dump(es.header()), sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(es.batches, dtype=TOKEN_DTYPE).tobytes())
    os.replace(tmp, path)
    return path


def load_evalset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptionError(f"{path} is not an evalset file")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if len(raw) < start + header_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = EvalSetHeaderSchema().load(json.loads(raw[start:start + header_len].decode("utf-8")))
    except (ValueError, ValidationError) as e:
        raise CorruptionError(f"{path}: invalid header: {e}") from e

    shape = (header["n_batches"], header["rows"], header["seq_len"])
    body = raw[start + header_len:]
    expected = int(np.prod(shape)) * TOKEN_DTYPE.itemsize
    if len(body) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes of tokens, found {len(body)}")
    batches = np.frombuffer(body, dtype=TOKEN_DTYPE).reshape(shape).astype(np.uint32)
    if batches.size and int(batches.max()) >= header["vocab_size"]:
        raise CorruptionError(f"{path}: token id outside vocabulary")
    return EvalSet(batches=batches, vocab_size=header["vocab_size"], seed=header["seed"], corpus_id=header["corpus_id"])


@contextlib.contextmanager
def single_threaded():
    """Pin torch to one intra-op thread so results do not depend on the core count."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _batch_nll(model, batch, vocab_size, index):
    """Summed next-token negative log-likelihood of one batch, in float64."""
    tokens = torch.as_tensor(batch.astype(np.int64))
    with torch.no_grad():
        logits = model(tokens)
    if logits.shape[-1] < vocab_size:
        raise EvaluationError(
            f"Model vocabulary {logits.shape[-1]} is smaller than evalset vocabulary {vocab_size}", batch_index=index
        )
    logits = logits[:, :-1, :].to(torch.float64)
    if not torch.isfinite(logits).all():
        raise EvaluationError(f"Non-finite logits in batch {index}", batch_index=index)
    log_probs = torch.log_softmax(logits, dim=-1)
    targets = tokens[:, 1:].unsqueeze(-1)
    return -float(log_probs.gather(-1, targets).sum().item())


def perplexity(model, es, threads=1):
    """Token-weighted mean cross-entropy over the whole set and its exponential.

    Batches may run concurrently; partial sums are combined in batch order.
    """
    if hasattr(model, "eval"):
        model.eval()
    model_vocab = getattr(model, "vocab_size", es.vocab_size)
    if model_vocab < es.vocab_size:
        raise EvaluationError(f"Model vocabulary {model_vocab} is smaller than evalset vocabulary {es.vocab_size}")
    indices = range(es.n_batches)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(lambda i: _batch_nll(model, es.batches[i], es.vocab_size, i), indices))
    else:
        partials = [_batch_nll(model, es.batches[i], es.vocab_size, i) for i in indices]

    total = 0.0
    for value in partials:
        total += value
    tokens_counted = es.n_batches * es.rows * (es.seq_len - 1)
    mean_ce = total / tokens_counted
    return PerplexityResult(ppl=math.exp(mean_ce), mean_ce=mean_ce, tokens_counted=tokens_counted)
