"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np
import torch

from .data import CharVocabulary
from .encoding import (EncodingKind, PhaseBias, make_frequencies,
                       pope_score_polar, pope_score_polar_grad)
from .model import ModelConfig, Transformer, loss as model_loss, rmsnorm

FD_STEP = 1e-5


def central_difference(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Elementwise central finite differences of a scalar function."""
    g = np.empty_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_pope_score_polar(seed: int = 0, d: int = 8) -> float:
    """Hand-derived score gradients vs finite differences; max relative error."""
    rng = np.random.default_rng(seed)
    fs = make_frequencies(EncodingKind.POPE, d, 10000.0)
    raw_q = rng.normal(size=d)
    raw_k = rng.normal(size=d)
    bias = PhaseBias(deltas=rng.uniform(-2 * np.pi, 0.0, size=d))
    t, s = 3, 11
    dq, dk, dd = pope_score_polar_grad(raw_q, raw_k, t, s, fs, bias)
    fd_q = central_difference(lambda x: pope_score_polar(x, raw_k, t, s, fs, bias), raw_q)
    fd_k = central_difference(lambda x: pope_score_polar(raw_q, x, t, s, fs, bias), raw_k)
    fd_d = central_difference(
        lambda x: pope_score_polar(raw_q, raw_k, t, s, fs, PhaseBias(x)), bias.deltas)
    return max(relative_error(dq, fd_q), relative_error(dk, fd_k),
               relative_error(dd, fd_d))


def check_rmsnorm(seed: int = 0, d: int = 16) -> float:
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=d)
    gain0 = rng.normal(loc=1.0, scale=0.1, size=d)
    w = rng.normal(size=d)  # random linear functional to get a scalar output

    def f_x(x):
        out = rmsnorm(torch.from_numpy(x), torch.from_numpy(gain0))
        return float(out @ torch.from_numpy(w))

    def f_gain(g):
        out = rmsnorm(torch.from_numpy(x0), torch.from_numpy(g))
        return float(out @ torch.from_numpy(w))

    xt = torch.from_numpy(x0.copy()).requires_grad_(True)
    gt = torch.from_numpy(gain0.copy()).requires_grad_(True)
    (rmsnorm(xt, gt) @ torch.from_numpy(w)).backward()
    err_x = relative_error(xt.grad.numpy(), central_difference(f_x, x0.copy()))
    err_g = relative_error(gt.grad.numpy(), central_difference(f_gain, gain0.copy()))
    return max(err_x, err_g)


def check_loss(seed: int = 0, vocab: int = 7, T: int = 5, B: int = 2) -> float:
    rng = np.random.default_rng(seed)
    logits0 = rng.normal(size=(B, T, vocab))
    targets = torch.from_numpy(rng.integers(0, vocab, size=(B, T)))

    def f(lg):
        return float(model_loss(torch.from_numpy(lg), targets, mode="all_tokens"))

    lt = torch.from_numpy(logits0.copy()).requires_grad_(True)
    model_loss(lt, targets, mode="all_tokens").backward()
    return relative_error(lt.grad.numpy(), central_difference(f, logits0.copy()))


def tiny_model_config(encoding=EncodingKind.POPE) -> ModelConfig:
    return ModelConfig(vocab_size=CharVocabulary().size, embed_dim=16,
                       n_layers=2, n_heads=2, max_seq_len=8,
                       encoding=encoding, bias_init="uniform")


def check_model(seed: int = 0, T: int = 5,
                encoding=EncodingKind.POPE) -> dict[str, float]:
    """End-to-end autograd-vs-FD check on a tiny double-precision model.

    Returns the max relative error per parameter group (delta parameters
    included).
    """
    cfg = tiny_model_config(encoding)
    model = Transformer(cfg).double()
    model.init_parameters(seed=seed)
    model.eval()
    rng = np.random.default_rng(seed)
    tokens = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(2, T)))
    targets = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(2, T)))

    def loss_value():
        return model_loss(model(tokens), targets, mode="all_tokens")

    model.zero_grad()
    loss_value().backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.numpy().copy()
        data = p.data.numpy()

        def f(arr):
            with torch.no_grad():
                return float(loss_value())

        fd = central_difference(f, data)
        errors[name] = relative_error(analytic, fd)
    return errors


def run_suite(seed: int = 0) -> dict[str, float]:
    """All gradient checks; key -> max relative error."""
    results = {
        "pope_score_polar": check_pope_score_polar(seed),
        "rmsnorm": check_rmsnorm(seed),
        "loss": check_loss(seed),
    }
    for name, err in check_model(seed).items():
        results[f"model.{name}"] = err
    return results
