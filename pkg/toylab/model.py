"""
A tiny decoder-only transformer: learned absolute positions, pre-norm blocks,
causal multi-head attention and a GELU MLP. Parameters travel as checkpoint
tensors (name -> float32 array) so every probe can act on them.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigError, NonFiniteError
from schemas import TinyLMConfigSchema

INIT_STD = 0.02
META_PREFIX = "model."


@dataclass(frozen=True)
class TinyLMConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 256
    vocab_size: int = 256
    seq_len: int = 128

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")

    @classmethod
    def from_dict(cls, data):
        return cls(**TinyLMConfigSchema().load(data or {}))

    def to_meta(self):
        return {f"{META_PREFIX}{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta):
        fields = {k[len(META_PREFIX):]: v for k, v in meta.items() if k.startswith(META_PREFIX)}
        if not fields:
            raise ConfigError("Checkpoint metadata carries no model configuration")
        return cls.from_dict(fields)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        mask = torch.triu(torch.ones(cfg.seq_len, cfg.seq_len, dtype=torch.bool), diagonal=1)
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x):
        B, T, C = x.shape
        head_dim = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, head_dim).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        att = att.masked_fill(self.mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.proj(y)


class MLP(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.proj = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x)))


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyLM(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.seq_len, cfg.d_model)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.norm_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    @property
    def vocab_size(self):
        return self.cfg.vocab_size

    def forward(self, tokens, check_finite=False):
        T = tokens.shape[1]
        if T > self.cfg.seq_len:
            raise ConfigError(f"Sequence of {T} tokens exceeds the model's seq_len {self.cfg.seq_len}")
        positions = torch.arange(T, device=tokens.device)
        x = self.tok_embed(tokens) + self.pos_embed(positions)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteError(f"Non-finite activations after layer {i}", index=i)
        return self.lm_head(self.norm_f(x))


def _init_parameters(model, seed):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".norm" in name or name.startswith("norm"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * INIT_STD)


def model_to_tensors(model):
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}


def model_from_tensors(cfg, tensors, dtype=torch.float32):
    model = TinyLM(cfg)
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model.to(dtype)


def model_from_checkpoint(manifest, tensors):
    return model_from_tensors(TinyLMConfig.from_meta(manifest.meta), tensors)


def init_model(cfg, seed):
    """Deterministically initialized parameters as checkpoint tensors."""
    model = TinyLM(cfg)
    _init_parameters(model, seed)
    return model_to_tensors(model)


def forward_loss(model, batch, check_finite=True):
    """Mean next-token cross-entropy (natural log) of a token matrix and the logits."""
    tokens = torch.as_tensor(np.asarray(batch, dtype=np.int64))
    logits = model(tokens, check_finite=check_finite)
    loss = F.cross_entropy(
        logits[:, :-1, :].reshape(-1, logits.shape[-1]),
        tokens[:, 1:].reshape(-1),
    )
    return loss, logits


def check_gradients(model, batch, eps=1e-6, floor=1e-6):
    """Worst relative error between autograd and central differences over every parameter element.

    Meant for a float64 model; float32 cannot resolve the differences.
    """
    model.zero_grad()
    loss, _ = forward_loss(model, batch)
    loss.backward()

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().view(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = forward_loss(model, batch)[0].item()
                flat[i] = original - eps
                minus = forward_loss(model, batch)[0].item()
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                g = analytic[i].item()
                error = abs(g - numeric) / max(abs(g), abs(numeric), floor)
                worst = max(worst, error)
    return worst
