"""Decoder-only Transformer with RMSNorm blocks and pluggable score encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionConfig, MultiHeadSelfAttention
from .encoding import EncodingKind

RMSNORM_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 512
    n_layers: int = 8
    n_heads: int = 8
    max_seq_len: int = 48
    encoding: EncodingKind = EncodingKind.POPE
    base: float = 10000.0
    bias_init: str = "uniform"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        self.encoding = EncodingKind(self.encoding)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            encoding=self.encoding,
            base=self.base,
            bias_init=self.bias_init,
            dropout_p=self.dropout_p,
        )


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = RMSNORM_EPS) -> torch.Tensor:
    """x * gain / sqrt(mean(x^2) + eps) over the last dimension."""
    ms = x.pow(2).mean(dim=-1, keepdim=True)
    return x * torch.rsqrt(ms + eps) * gain


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = RMSNORM_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.gain, self.eps)


class MLP(nn.Module):
    """4x expansion with GELU."""

    def __init__(self, dim: int, dropout_p: float):
        super().__init__()
        self.fc_in = nn.Linear(dim, 4 * dim, bias=False)
        self.fc_out = nn.Linear(4 * dim, dim, bias=False)
        self.dropout = nn.Dropout(dropout_p)

    def forward(self, x):
        return self.dropout(self.fc_out(F.gelu(self.fc_in(x))))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_attn = RMSNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.attention_config())
        self.norm_mlp = RMSNorm(cfg.embed_dim)
        self.mlp = MLP(cfg.embed_dim, cfg.dropout_p)

    def forward(self, x, positions=None, key_padding_mask=None):
        x = x + self.attn(self.norm_attn(x), positions=positions,
                          key_padding_mask=key_padding_mask)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class Transformer(nn.Module):
    """Token embedding -> N pre-norm blocks -> final norm -> untied LM head.

    Positions are 0-based absolute indices; the positional schedules are
    closed-form in position, so forward accepts T > max_seq_len (used by the
    length-extrapolation evaluation).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.emb_dropout = nn.Dropout(cfg.dropout_p)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm_out = RMSNorm(cfg.embed_dim)
        self.lm_head = nn.Linear(cfg.embed_dim, cfg.vocab_size, bias=False)

    def init_parameters(self, seed: int = 0):
        """GPT-2-style init: normal(0, 0.02) matrices, unit gains, seeded deltas."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(".gain"):
                    p.fill_(1.0)
                elif name.endswith(".deltas"):
                    continue
                else:
                    p.copy_(torch.empty(p.shape, dtype=p.dtype).normal_(
                        0.0, 0.02, generator=gen))
        for block in self.blocks:
            block.attn.init_deltas(generator=gen)

    def clamp_phase_biases(self):
        for block in self.blocks:
            block.attn.clamp_deltas()

    def phase_biases(self) -> list[torch.Tensor]:
        return [block.attn.deltas for block in self.blocks
                if block.attn.deltas is not None]

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor | None = None,
                key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range")
        x = self.emb_dropout(self.tok_emb(tokens))
        for block in self.blocks:
            x = block(x, positions=positions, key_padding_mask=key_padding_mask)
        return self.lm_head(self.norm_out(x))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mode: str = "all_tokens",
    target_positions: torch.Tensor | None = None,
    ignore_index: int = -1,
) -> torch.Tensor:
    """Mean cross-entropy over selected positions.

    all_tokens: targets is (B, T), aligned with logits; entries equal to
    ignore_index are excluded. final_token_only: targets is (B,) and
    target_positions gives the single position per sequence whose logits are
    scored.
    """
    if mode == "all_tokens":
        if targets.shape != logits.shape[:-1]:
            raise ValueError(f"targets shape {targets.shape} misaligned with logits")
        if (targets != ignore_index).sum() == 0:
            raise ValueError("no positions selected for loss")
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                               targets.reshape(-1), ignore_index=ignore_index)
    if mode == "final_token_only":
        if target_positions is None:
            raise ValueError("final_token_only requires target_positions")
        if targets.numel() == 0:
            raise ValueError("no positions selected for loss")
        B = logits.shape[0]
        picked = logits[torch.arange(B, device=logits.device), target_positions]
        return F.cross_entropy(picked, targets)
    raise ValueError(f"unknown loss mode: {mode!r}")
