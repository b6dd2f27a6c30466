import numpy as np
import pytest
import torch

from quantaudit.evalset import build_evalset, perplexity
from quantaudit.schedules import CosineWarmup
from quantaudit.toylab.corpus import (conditional_probs, synth_corpus,
                                      train_validation_split)
from quantaudit.toylab.model import (TinyLM, TinyLMConfig, ToyLabError,
                                     forward_loss, init_model)
from quantaudit.toylab.train import AdamWConfig, RunConfig, train
from quantaudit.weightstore import read_checkpoint

SMALL = TinyLMConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                     vocab_size=32, seq_len=16)


def small_schedule(eta_max=1e-3):
    return CosineWarmup(eta_max=eta_max, eta_min=eta_max / 10,
                        warmup_steps=10, total_steps=10_000)


# ---------------------------------------------------------------------------
# corpus

def test_corpus_deterministic():
    a = synth_corpus(seed=5, length=1_000, vocab=16)
    b = synth_corpus(seed=5, length=1_000, vocab=16)
    np.testing.assert_array_equal(a, b)
    c = synth_corpus(seed=6, length=1_000, vocab=16)
    assert not np.array_equal(a, c)


def test_corpus_binary_vocab():
    stream = synth_corpus(seed=0, length=500, vocab=2)
    assert set(np.unique(stream)) <= {0, 1}


def test_corpus_bigram_statistics_match_transition_table():
    vocab, length, seed = 6, 1_600_000, 2
    stream = synth_corpus(seed=seed, length=length, vocab=vocab)
    probs = conditional_probs(seed=seed, vocab=vocab)
    counts = np.zeros((vocab, vocab, vocab))
    np.add.at(counts, (stream[:-2], stream[1:-1], stream[2:]), 1)
    totals = counts.sum(axis=-1, keepdims=True)
    empirical = counts / np.maximum(totals, 1)
    seen = (totals[..., 0] > 2_000)
    assert seen.any()
    assert np.abs(empirical[seen] - probs[seen]).max() < 0.01


def test_train_validation_split_disjoint_tail():
    corpus = np.arange(100)
    tr, va = train_validation_split(corpus, 20)
    assert tr.size == 80 and va.size == 20
    np.testing.assert_array_equal(va, np.arange(80, 100))


# ---------------------------------------------------------------------------
# model

def test_init_deterministic():
    a = init_model(SMALL, seed=1).to_tensors()
    b = init_model(SMALL, seed=1).to_tensors()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_config_divisibility_enforced():
    with pytest.raises(ToyLabError):
        TinyLMConfig(d_model=63, n_heads=2)


def test_initial_perplexity_near_vocab():
    cfg = TinyLMConfig(n_layers=2, d_model=32, n_heads=2, d_ff=64,
                       vocab_size=64, seq_len=32)
    model = init_model(cfg, seed=0)
    corpus = synth_corpus(seed=0, length=5_000, vocab=cfg.vocab_size)
    es = build_evalset(corpus, n_batches=4, rows=2, seq_len=32, seed=0,
                       vocab_size=cfg.vocab_size)
    ppl = perplexity(model, es).ppl
    assert ppl == pytest.approx(cfg.vocab_size, rel=0.2)


def test_untrained_loss_near_log_vocab():
    model = init_model(SMALL, seed=0)
    batch = np.random.default_rng(0).integers(0, SMALL.vocab_size, size=(4, 16))
    loss, logits = forward_loss(model, batch)
    assert float(loss.detach()) == pytest.approx(np.log(SMALL.vocab_size), rel=0.1)
    assert logits.shape == (4, 16, SMALL.vocab_size)


def test_single_token_vocab_zero_loss():
    cfg = TinyLMConfig(n_layers=1, d_model=8, n_heads=1, d_ff=8,
                       vocab_size=1, seq_len=4)
    model = init_model(cfg, seed=0)
    loss, _ = forward_loss(model, np.zeros((2, 4), dtype=np.int64))
    assert float(loss.detach()) == pytest.approx(0.0, abs=1e-7)


def test_gradients_match_finite_differences():
    cfg = TinyLMConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                       vocab_size=8, seq_len=6)
    model = init_model(cfg, seed=0).double()
    batch = np.random.default_rng(1).integers(0, cfg.vocab_size, size=(2, 6))
    loss, _ = forward_loss(model, batch)
    loss.backward()

    rng = np.random.default_rng(2)
    h = 1e-6
    for name, p in model.named_parameters():
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        idxs = rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False)
        for i in idxs:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up, _ = forward_loss(model, batch)
                flat[i] = orig - h
                down, _ = forward_loss(model, batch)
                flat[i] = orig
            fd = (float(up) - float(down)) / (2 * h)
            assert float(grad[i]) == pytest.approx(fd, rel=1e-3, abs=1e-8), name


# ---------------------------------------------------------------------------
# training

def test_train_loss_decreases(tmp_path):
    run = RunConfig(seed=0, total_steps=200, schedule=small_schedule(),
                    checkpoint_every=100, corpus_length=20_000, val_reserve=2_000)
    result = train(run, SMALL, tmp_path / "run")
    assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


def test_train_same_seed_bit_identical(tmp_path):
    run = RunConfig(seed=3, total_steps=40, schedule=small_schedule(),
                    checkpoint_every=40, corpus_length=10_000, val_reserve=1_000)
    r1 = train(run, SMALL, tmp_path / "a")
    r2 = train(run, SMALL, tmp_path / "b")
    assert r1.losses == r2.losses
    blob1 = (r1.checkpoints[-1] / "weights.bin").read_bytes()
    blob2 = (r2.checkpoints[-1] / "weights.bin").read_bytes()
    assert blob1 == blob2


def test_checkpoint_cadence(tmp_path):
    run = RunConfig(seed=0, total_steps=50, schedule=small_schedule(),
                    checkpoint_every=20, corpus_length=10_000, val_reserve=1_000)
    result = train(run, SMALL, tmp_path / "run")
    steps = sorted(int(p.name.split("-")[1]) for p in result.checkpoints)
    assert steps == [0, 20, 40, 50]


def test_zero_lr_moves_weights_only_by_decay(tmp_path):
    frozen = CosineWarmup(eta_max=1e-12, eta_min=1e-13, warmup_steps=1,
                          total_steps=100)
    run = RunConfig(seed=0, total_steps=5, schedule=frozen,
                    checkpoint_every=5, corpus_length=10_000, val_reserve=1_000,
                    optimizer=AdamWConfig(weight_decay=0.0))
    result = train(run, SMALL, tmp_path / "run")
    _, start = read_checkpoint(result.checkpoints[0])
    _, end = read_checkpoint(result.checkpoints[-1])
    for name in start:
        np.testing.assert_allclose(end[name], start[name], atol=1e-9)


def test_fork_isolation_and_meta(tmp_path):
    run = RunConfig(seed=0, total_steps=10, schedule=small_schedule(),
                    checkpoint_every=10, corpus_length=10_000, val_reserve=1_000)
    result = train(run, SMALL, tmp_path / "run")
    manifest, _ = read_checkpoint(result.checkpoints[-1])
    assert manifest.step == 10
    assert "model_config" in manifest.meta
    assert "schedule" in manifest.meta
