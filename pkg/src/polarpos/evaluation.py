"""Accuracy/perplexity metrics, length-extrapolation sweeps, frequency usage."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import frequency_tensor
from .model import Transformer
from .training import IndirectIndexData


@torch.no_grad()
def final_token_accuracy(model: Transformer, data: IndirectIndexData,
                         batch_size: int = 256) -> float:
    """Exact argmax accuracy at the target position over a whole split."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    model.eval()
    correct = 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        batch = data.batch(idx)
        logits = model(batch["tokens"], key_padding_mask=batch["key_padding_mask"])
        B = logits.shape[0]
        picked = logits[torch.arange(B), batch["target_positions"]]
        correct += int((picked.argmax(dim=-1) == batch["targets"]).sum())
    return correct / len(data)


@torch.no_grad()
def perplexity(model: Transformer, stream: np.ndarray, eval_len: int,
               max_windows: int | None = None, batch_size: int = 8) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of eval_len."""
    if eval_len < 1:
        raise ValueError("eval_len must be >= 1")
    if len(stream) < eval_len + 1:
        raise ValueError(f"stream length {len(stream)} < eval_len + 1")
    n_windows = (len(stream) - 1) // eval_len
    if max_windows is not None:
        n_windows = min(n_windows, max_windows)
    model.eval()
    nll_sum, n_tokens = 0.0, 0
    for start in range(0, n_windows, batch_size):
        idx = range(start, min(start + batch_size, n_windows))
        x = np.stack([stream[i * eval_len : i * eval_len + eval_len] for i in idx])
        y = np.stack([stream[i * eval_len + 1 : i * eval_len + eval_len + 1]
                      for i in idx])
        logits = model(torch.from_numpy(x))
        nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                              torch.from_numpy(y).reshape(-1), reduction="sum")
        nll_sum += float(nll)
        n_tokens += y.size
    return float(np.exp(nll_sum / n_tokens))


def extrapolation_sweep(
    model: Transformer,
    stream: np.ndarray,
    lengths: list[int],
    max_windows: int | None = None,
    csv_path: str | Path | None = None,
) -> dict[int, float]:
    """Perplexity at each evaluation length; optionally written as CSV."""
    results = {}
    for length in lengths:
        results[length] = perplexity(model, stream, length, max_windows=max_windows)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["eval_len", "perplexity"])
            for length in lengths:
                writer.writerow([length, f"{results[length]:.6f}"])
    return results


@dataclass
class FrequencyUsageMatrix:
    """Mean component norm per (frequency, layer); side is 'query' or 'key'."""

    side: str
    freqs: np.ndarray
    values: np.ndarray  # (n_freqs, n_layers)


@torch.no_grad()
def frequency_usage(
    model: Transformer,
    probe_batches: list[np.ndarray],
) -> tuple[FrequencyUsageMatrix, FrequencyUsageMatrix]:
    """Per-layer, per-frequency mean norm of query/key components.

    probe_batches: token id arrays (one per probe text). For the rotary
    encoding the statistic is the 2-norm of each pre-rotation 2D chunk (the
    rotation is norm-preserving, so pre- and post-rotation agree); for polar
    variants it is the modulus, softplus of the raw projection.
    """
    if not probe_batches:
        raise ValueError("at least one probe text required")
    for p in probe_batches:
        if len(p) == 0:
            raise ValueError("probe text empty after tokenization")
    cfg = model.cfg
    acfg = cfg.attention_config()
    n_freqs = acfg.n_freqs
    sums = {side: np.zeros((n_freqs, cfg.n_layers)) for side in ("query", "key")}
    counts = np.zeros(cfg.n_layers)

    captured: dict[int, torch.Tensor] = {}

    def make_hook(layer_idx):
        def hook(module, args, kwargs):
            captured[layer_idx] = args[0]
        return hook

    handles = [block.attn.register_forward_pre_hook(make_hook(i), with_kwargs=True)
               for i, block in enumerate(model.blocks)]
    model.eval()
    try:
        for probe in probe_batches:
            tokens = torch.from_numpy(np.asarray(probe, dtype=np.int64))[None, :]
            captured.clear()
            model(tokens)
            for li, block in enumerate(model.blocks):
                x = captured[li]
                B, T, E = x.shape
                for side, proj in (("query", block.attn.wq), ("key", block.attn.wk)):
                    h = proj(x).view(B, T, cfg.n_heads, cfg.head_dim)
                    if cfg.encoding.is_pope:
                        if cfg.encoding.uses_softplus:
                            h = F.softplus(h)
                        comp = h.abs()  # (B, T, H, d)
                    else:
                        pairs = h.view(B, T, cfg.n_heads, cfg.head_dim // 2, 2)
                        comp = pairs.norm(dim=-1)  # (B, T, H, d/2)
                    sums[side][:, li] += comp.sum(dim=(0, 1, 2)).numpy()
                counts[li] += B * T * cfg.n_heads
    finally:
        for h in handles:
            h.remove()
    freqs = frequency_tensor(acfg, dtype=torch.float64).numpy()
    mats = []
    for side in ("query", "key"):
        mats.append(FrequencyUsageMatrix(side=side, freqs=freqs,
                                         values=sums[side] / counts))
    return mats[0], mats[1]


def write_frequency_csv(mat: FrequencyUsageMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "frequency_index", "theta_c", "value"])
        n_freqs, n_layers = mat.values.shape
        for layer in range(n_layers):
            for c in range(n_freqs):
                writer.writerow([layer, c, f"{mat.freqs[c]:.10g}",
                                 f"{mat.values[c, layer]:.8g}"])
