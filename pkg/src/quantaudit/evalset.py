"""Fixed held-out evaluation set and deterministic perplexity.

The eval set is built once from a token stream (default 32 batches of
4 x 512 tokens), persisted bit-exactly, and reused unchanged for every
checkpoint, so gap trajectories carry no batch-sampling variance.

Perplexity is exp of the mean natural-log next-token cross-entropy,
token-weighted over all predicted positions, accumulated in float64 with
batches processed in fixed index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

_MAGIC = b"QAEV"
_VERSION = 1


class EvalSetError(Exception):
    pass


class LanguageModel(Protocol):
    """Anything that maps a (rows, seq_len) token matrix to logits."""

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        """Return (rows, seq_len, vocab) unnormalized log-probabilities."""
        ...


@dataclass
class EvalSet:
    batches: list[np.ndarray]  # each (rows, seq_len) int64
    vocab_size: int
    seed: int
    corpus_id: str

    def __post_init__(self):
        if not self.batches:
            raise EvalSetError("eval set needs at least one batch")
        shape = self.batches[0].shape
        for i, b in enumerate(self.batches):
            if b.shape != shape:
                raise EvalSetError(f"batch {i} shape {b.shape} != {shape}")
            if b.min() < 0 or b.max() >= self.vocab_size:
                raise EvalSetError(f"batch {i} has token ids outside [0, {self.vocab_size})")

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    @property
    def rows(self) -> int:
        return self.batches[0].shape[0]

    @property
    def seq_len(self) -> int:
        return self.batches[0].shape[1]


@dataclass
class PerplexityResult:
    ppl: float
    mean_ce: float
    tokens_counted: int


def build_evalset(corpus: np.ndarray, n_batches: int = 32, rows: int = 4,
                  seq_len: int = 512, seed: int = 0,
                  vocab_size: int | None = None,
                  corpus_id: str = "") -> EvalSet:
    """Carve non-overlapping seq_len sequences out of the corpus.

    The corpus is split into disjoint seq_len chunks; a seeded permutation
    picks which chunks fill which batch rows.  Same corpus + parameters +
    seed always yields the identical set.
    """
    corpus = np.asarray(corpus, dtype=np.int64).ravel()
    needed = n_batches * rows * seq_len
    if corpus.size < needed:
        raise EvalSetError(
            f"corpus too small: {corpus.size} tokens < {needed} required"
        )
    if vocab_size is None:
        vocab_size = int(corpus.max()) + 1
    n_chunks = corpus.size // seq_len
    rng = np.random.default_rng(seed)
    picks = rng.permutation(n_chunks)[: n_batches * rows]
    seqs = [corpus[i * seq_len:(i + 1) * seq_len] for i in picks]
    batches = [
        np.stack(seqs[b * rows:(b + 1) * rows]).astype(np.int64)
        for b in range(n_batches)
    ]
    return EvalSet(batches=batches, vocab_size=vocab_size, seed=seed,
                   corpus_id=corpus_id)


def save_evalset(es: EvalSet, path: str | Path) -> Path:
    """Binary layout: magic, version, header length, JSON header, u32 tokens."""
    path = Path(path)
    header = json.dumps(
        {"n_batches": es.n_batches, "rows": es.rows, "seq_len": es.seq_len,
         "vocab_size": es.vocab_size, "seed": es.seed, "corpus_id": es.corpus_id},
        sort_keys=True,
    ).encode("utf-8")
    tokens = np.concatenate([b.ravel() for b in es.batches]).astype("<u4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(tokens.tobytes())
    return path


def load_evalset(path: str | Path) -> EvalSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise EvalSetError(f"not an eval set file: {path}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise EvalSetError(f"unsupported eval set version {version}")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
        n_batches, rows, seq_len = header["n_batches"], header["rows"], header["seq_len"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise EvalSetError(f"corrupted eval set header: {exc}") from exc
    body = raw[12 + header_len:]
    expected = 4 * n_batches * rows * seq_len
    if len(body) != expected:
        raise EvalSetError(
            f"corrupted eval set: token payload is {len(body)} bytes, expected {expected}"
        )
    tokens = np.frombuffer(body, dtype="<u4").astype(np.int64)
    batches = list(tokens.reshape(n_batches, rows, seq_len))
    return EvalSet(batches=batches, vocab_size=header["vocab_size"],
                   seed=header["seed"], corpus_id=header["corpus_id"])


def _batch_ce_sum(logits: np.ndarray, tokens: np.ndarray) -> float:
    """Sum of next-token cross-entropies for one batch, in float64."""
    z = np.asarray(logits, dtype=np.float64)[:, :-1, :]  # predict positions 1..L-1
    targets = tokens[:, 1:]
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    target_logit = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    return float((lse - target_logit).sum())


def perplexity(model: LanguageModel, es: EvalSet) -> PerplexityResult:
    """Token-weighted perplexity of the model on the fixed eval set."""
    total_ce = 0.0
    total_tokens = 0
    for i, batch in enumerate(es.batches):
        logits = np.asarray(model.logits(batch))
        if logits.shape[:2] != batch.shape or logits.shape[2] < es.vocab_size:
            raise EvalSetError(
                f"batch {i}: logits shape {logits.shape} incompatible with "
                f"tokens {batch.shape} and vocab {es.vocab_size}"
            )
        if not np.all(np.isfinite(logits)):
            raise EvalSetError(f"non-finite logits on batch {i}")
        total_ce += _batch_ce_sum(logits, batch)
        total_tokens += batch.shape[0] * (batch.shape[1] - 1)
    mean_ce = total_ce / total_tokens
    return PerplexityResult(ppl=float(np.exp(mean_ce)), mean_ce=mean_ce,
                            tokens_counted=total_tokens)
