"""Tiny decoder-only transformer (pre-norm, learned absolute positions).

Parameter names are chosen so the default quantization selector does the
right thing on exported checkpoints: embeddings match ``*embed*``, layer
norms match ``*norm*``, biases match ``*bias*``, and every remaining 2-D
tensor (attention, MLP and head projections) is a probe target.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..weightstore import CheckpointManifest


class ToyLabError(Exception):
    pass


@dataclass
class TinyLMConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 256
    vocab_size: int = 256
    seq_len: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ToyLabError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.seq_len < 2:
            raise ToyLabError(f"seq_len must be >= 2, got {self.seq_len}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ToyLabError(f"{name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "TinyLMConfig":
        return cls(**json.loads(s))


@contextmanager
def single_thread():
    """Pin torch to one thread so runs are bit-identical; restores on exit."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


class _Attention(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        mask = torch.full((t, t), float("-inf"), dtype=x.dtype, device=x.device).triu(1)
        att = torch.softmax(scores + mask, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class _MLP(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = _Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.mlp = _MLP(cfg)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyLM(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.size(1) > self.cfg.seq_len:
            raise ToyLabError(
                f"sequence length {tokens.size(1)} exceeds model limit {self.cfg.seq_len}"
            )
        if int(tokens.max()) >= self.cfg.vocab_size:
            raise ToyLabError("token id out of vocabulary range")
        pos = torch.arange(tokens.size(1), device=tokens.device)
        x = self.tok_embed(tokens) + self.pos_embed(pos)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if torch.isnan(x).any():
                raise ToyLabError(f"NaN activations after block {i}")
        return self.head(self.final_norm(x))

    # ---- checkpoint bridge -------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy().astype(np.float32)
                for name, p in self.state_dict().items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        dtype = next(self.parameters()).dtype
        state = {name: torch.as_tensor(np.asarray(arr)).to(dtype)
                 for name, arr in tensors.items()}
        self.load_state_dict(state)

    # ---- evaluation protocol (see evalset.LanguageModel) -------------------

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        toks = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
        with single_thread(), torch.no_grad():
            out = self.forward(toks)
        return out.double().numpy()


def init_model(cfg: TinyLMConfig, seed: int = 0) -> TinyLM:
    """Seeded initialization: N(0, 0.02) projections, zero biases, unit norms."""
    model = TinyLM(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return model


def forward_loss(model: TinyLM, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean next-token cross-entropy (natural log) under causal masking."""
    toks = torch.as_tensor(np.asarray(batch, dtype=np.int64))
    logits = model(toks)
    loss = F.cross_entropy(
        logits[:, :-1, :].reshape(-1, model.cfg.vocab_size),
        toks[:, 1:].reshape(-1),
    )
    if torch.isnan(loss):
        raise ToyLabError("NaN loss")
    return loss, logits


def model_from_checkpoint(manifest: CheckpointManifest,
                          tensors: dict[str, np.ndarray]) -> TinyLM:
    """Rebuild a TinyLM from a checkpoint written by the trainer."""
    cfg_json = manifest.meta.get("model_config")
    if cfg_json is None:
        raise ToyLabError("checkpoint lacks model_config metadata")
    model = TinyLM(TinyLMConfig.from_json(cfg_json))
    model.load_tensors(tensors)
    model.eval()
    return model
