"""Batched multi-head causal self-attention with rotary or polar scores.

Tensors are shaped (batch, heads, T, head_dim) inside this module. The score
math mirrors the scalar reference in `encoding` exactly; tests assert
element-by-element agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoding import TWO_PI, EncodingKind, make_frequencies

# Large negative sentinel for masked logits; keeps gradients finite.
MASK_VALUE = -1e9


@dataclass
class AttentionConfig:
    n_heads: int
    head_dim: int
    encoding: EncodingKind
    base: float = 10000.0
    bias_init: str = "zero"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        self.encoding = EncodingKind(self.encoding)

    @property
    def n_freqs(self) -> int:
        return self.head_dim if self.encoding.is_pope else self.head_dim // 2


def frequency_tensor(cfg: AttentionConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    fs = make_frequencies(cfg.encoding, cfg.head_dim, cfg.base)
    return torch.as_tensor(fs.freqs, dtype=dtype, device=device)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
    """Rotate each consecutive 2D chunk of x by position * theta_c.

    x: (..., T, d), positions: (..., T) or (T,), freqs: (d/2,).
    """
    angles = positions.to(x.dtype).unsqueeze(-1) * freqs  # (..., T, d/2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = cos * x0 - sin * x1
    out[..., 1::2] = sin * x0 + cos * x1
    return out


def pope_encode_batch(
    x: torch.Tensor,
    positions: torch.Tensor,
    freqs: torch.Tensor,
    cfg: AttentionConfig,
    deltas: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Complex-encode raw queries or keys: returns (re, im), each (..., T, d).

    deltas, when given, is broadcast over the trailing dim (keys only); shape
    (d,) or (heads, 1, d) against x of shape (batch, heads, T, d).
    """
    mu = F.softplus(x) if cfg.encoding.uses_softplus else x
    phase = positions.to(x.dtype).unsqueeze(-1) * freqs
    if deltas is not None:
        phase = phase + deltas
    return mu * torch.cos(phase), mu * torch.sin(phase)


def score_matrix(
    q: torch.Tensor,
    k: torch.Tensor,
    positions: torch.Tensor,
    cfg: AttentionConfig,
    deltas: torch.Tensor | None = None,
    causal: bool = True,
    key_padding_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled pairwise attention logits, (batch, heads, T, T).

    q, k: (batch, heads, T, head_dim); positions: (T,) absolute indices.
    logits[..., t, s] is the encoded q_t / k_s score over sqrt(head_dim);
    masked entries (s > t, or padded keys) hold a large negative sentinel.
    """
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    if q.shape[-1] != cfg.head_dim:
        raise ValueError(f"expected head_dim {cfg.head_dim}, got {q.shape[-1]}")
    T = q.shape[-2]
    if T == 0:
        raise ValueError("empty sequence")
    freqs = frequency_tensor(cfg, dtype=q.dtype, device=q.device)
    if cfg.encoding is EncodingKind.ROPE:
        if deltas is not None:
            raise ValueError("rope takes no phase bias")
        qr = apply_rope(q, positions, freqs)
        kr = apply_rope(k, positions, freqs)
        logits = qr @ kr.transpose(-2, -1)
    else:
        if deltas is not None and not cfg.encoding.uses_bias:
            raise ValueError(f"{cfg.encoding.value} takes no phase bias")
        q_re, q_im = pope_encode_batch(q, positions, freqs, cfg)
        k_re, k_im = pope_encode_batch(k, positions, freqs, cfg, deltas=deltas)
        logits = q_re @ k_re.transpose(-2, -1) + q_im @ k_im.transpose(-2, -1)
    logits = logits / math.sqrt(cfg.head_dim)
    if key_padding_mask is not None:
        # key_padding_mask: (batch, T), True where the key is padding
        logits = logits.masked_fill(key_padding_mask[:, None, None, :], MASK_VALUE)
    if causal:
        keep = torch.tril(torch.ones(T, T, dtype=torch.bool, device=q.device))
        logits = logits.masked_fill(~keep, MASK_VALUE)
    return logits


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    cfg: AttentionConfig,
    positions: torch.Tensor | None = None,
    deltas: torch.Tensor | None = None,
    key_padding_mask: torch.Tensor | None = None,
    training: bool = False,
) -> torch.Tensor:
    """Causal softmax attention over encoded scores; (batch, heads, T, head_dim)."""
    if v.shape[:-1] != q.shape[:-1]:
        raise ValueError(f"value shape {v.shape} incompatible with query {q.shape}")
    T = q.shape[-2]
    if positions is None:
        positions = torch.arange(T, device=q.device)
    logits = score_matrix(q, k, positions, cfg, deltas=deltas,
                          key_padding_mask=key_padding_mask)
    weights = F.softmax(logits, dim=-1)
    if cfg.dropout_p > 0.0 and training:
        weights = F.dropout(weights, p=cfg.dropout_p, training=True)
    return weights @ v


class MultiHeadSelfAttention(nn.Module):
    """Causal self-attention layer with positional encoding baked into scores.

    PoPE variants with a learnable bias carry one delta vector per head; the
    parameter is stored unconstrained and projected onto [-2*pi, 0] externally
    after each optimizer step.
    """

    def __init__(self, embed_dim: int, cfg: AttentionConfig):
        super().__init__()
        if embed_dim != cfg.n_heads * cfg.head_dim:
            raise ValueError(
                f"embed_dim {embed_dim} != n_heads*head_dim "
                f"{cfg.n_heads}*{cfg.head_dim}"
            )
        self.cfg = cfg
        self.wq = nn.Linear(embed_dim, embed_dim, bias=False)
        self.wk = nn.Linear(embed_dim, embed_dim, bias=False)
        self.wv = nn.Linear(embed_dim, embed_dim, bias=False)
        self.wo = nn.Linear(embed_dim, embed_dim, bias=False)
        self.resid_dropout = nn.Dropout(cfg.dropout_p)
        if cfg.encoding.uses_bias:
            self.deltas = nn.Parameter(torch.zeros(cfg.n_heads, cfg.head_dim))
        else:
            self.deltas = None

    def init_deltas(self, generator: torch.Generator | None = None):
        if self.deltas is None:
            return
        if self.cfg.bias_init == "zero":
            with torch.no_grad():
                self.deltas.zero_()
        elif self.cfg.bias_init == "uniform":
            with torch.no_grad():
                u = torch.rand(self.deltas.shape, generator=generator,
                               dtype=self.deltas.dtype)
                self.deltas.copy_(u * -TWO_PI)
        else:
            raise ValueError(f"unknown bias init: {self.cfg.bias_init!r}")

    def clamp_deltas(self):
        if self.deltas is not None:
            with torch.no_grad():
                self.deltas.clamp_(-TWO_PI, 0.0)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.cfg.n_heads, self.cfg.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        B, T, E = x.shape
        q = self._split_heads(self.wq(x))
        k = self._split_heads(self.wk(x))
        v = self._split_heads(self.wv(x))
        deltas = None
        if self.deltas is not None:
            deltas = self.deltas.unsqueeze(1)  # (heads, 1, d) broadcast over T
        out = attend(q, k, v, self.cfg, positions=positions, deltas=deltas,
                     key_padding_mask=key_padding_mask, training=self.training)
        out = out.transpose(1, 2).contiguous().view(B, T, E)
        return self.resid_dropout(self.wo(out))
