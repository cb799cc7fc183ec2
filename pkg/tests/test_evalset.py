import math

import numpy as np
import pytest
import torch

from errors import CorruptionError, EvaluationError, QuantAuditError
from evalset import MAGIC, build_evalset, load_evalset, perplexity, save_evalset, single_threaded
from toylab.model import TinyLM, TinyLMConfig, init_model, model_from_tensors


def test_build_is_deterministic_and_in_vocabulary():
    corpus = np.arange(1000) % 50
    first = build_evalset(corpus, n_batches=3, rows=2, seq_len=10, seed=5)
    second = build_evalset(corpus, n_batches=3, rows=2, seq_len=10, seed=5)
    assert first == second
    assert first.batches.shape == (3, 2, 10)
    assert first.vocab_size == 50
    assert first != build_evalset(corpus, n_batches=3, rows=2, seq_len=10, seed=6)


def test_windows_do_not_overlap():
    corpus = np.arange(400)
    es = build_evalset(corpus, n_batches=4, rows=2, seq_len=10, seed=1, vocab_size=400)
    starts = sorted(int(row[0]) for batch in es.batches for row in batch)
    assert all(s % 10 == 0 for s in starts)
    assert len(set(starts)) == len(starts)


def test_build_needs_enough_tokens():
    with pytest.raises(QuantAuditError):
        build_evalset(np.zeros(50, dtype=np.int64), n_batches=2, rows=2, seq_len=16)
    with pytest.raises(QuantAuditError):
        build_evalset(np.full(100, 9), n_batches=1, rows=1, seq_len=10, vocab_size=5)


def test_save_then_load(tmp_path, tiny_evalset):
    path = save_evalset(tiny_evalset, str(tmp_path / "eval.bin"))
    assert load_evalset(path) == tiny_evalset
    with open(path, "rb") as f:
        assert f.read(len(MAGIC)) == MAGIC


def test_corrupted_files_are_rejected(tmp_path, tiny_evalset):
    path = save_evalset(tiny_evalset, str(tmp_path / "eval.bin"))
    raw = (tmp_path / "eval.bin").read_bytes()

    (tmp_path / "short.bin").write_bytes(raw[:-3])
    with pytest.raises(CorruptionError):
        load_evalset(str(tmp_path / "short.bin"))

    (tmp_path / "magic.bin").write_bytes(b"NOTMAGIC" + raw[len(MAGIC):])
    with pytest.raises(CorruptionError):
        load_evalset(str(tmp_path / "magic.bin"))

    assert load_evalset(path) == tiny_evalset


def test_fresh_model_perplexity_is_near_vocabulary_size(tiny_cfg, tiny_evalset):
    model = model_from_tensors(tiny_cfg, init_model(tiny_cfg, seed=0))
    with single_threaded():
        result = perplexity(model, tiny_evalset)
    assert result.tokens_counted == 4 * 2 * 15
    assert result.ppl == pytest.approx(math.exp(result.mean_ce))
    assert 0.8 * tiny_cfg.vocab_size <= result.ppl <= 1.2 * tiny_cfg.vocab_size


def test_perplexity_does_not_depend_on_thread_count(tiny_cfg, tiny_evalset):
    model = model_from_tensors(tiny_cfg, init_model(tiny_cfg, seed=3))
    with single_threaded():
        serial = perplexity(model, tiny_evalset, threads=1)
        pooled = perplexity(model, tiny_evalset, threads=4)
    assert serial == pooled


def test_small_model_vocabulary_is_an_evaluation_error(tiny_evalset):
    small = TinyLM(TinyLMConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=8, seq_len=16))
    with pytest.raises(EvaluationError):
        perplexity(small, tiny_evalset)


def test_non_finite_logits_are_an_evaluation_error(tiny_cfg, tiny_evalset):
    model = model_from_tensors(tiny_cfg, init_model(tiny_cfg, seed=0))
    with torch.no_grad():
        model.lm_head.weight.fill_(float("nan"))
    with pytest.raises(EvaluationError) as info:
        perplexity(model, tiny_evalset)
    assert info.value.batch_index == 0
