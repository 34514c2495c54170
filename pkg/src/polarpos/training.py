"""Optimizer, schedule, and deterministic training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, Transformer, loss as model_loss

ADAM_EPS = 1e-8

METRIC_FIELDS = ["step", "lr", "train_loss", "val_loss", "val_accuracy",
                 "grad_norm", "wall_ms"]


@dataclass
class TrainConfig:
    batch_size: int = 64
    seq_len: int = 48
    lr: float = 2e-4
    min_lr: float = 2e-5
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    max_iters: int = 100_000
    decay_iters: int = 100_000
    warmup_iters: int = 4000
    seed: int = 0
    eval_interval: int = 500
    eval_batches: int = 20
    log_interval: int = 50

    def __post_init__(self):
        if self.warmup_iters > self.decay_iters:
            raise ValueError("warmup_iters must be <= decay_iters")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must be <= lr")
        for name in ("batch_size", "seq_len", "lr", "grad_clip", "max_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup to lr, cosine decay to min_lr, then flat min_lr."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if tc.warmup_iters > 0 and step < tc.warmup_iters:
        return tc.lr * step / tc.warmup_iters
    if step >= tc.decay_iters:
        return tc.min_lr
    frac = (step - tc.warmup_iters) / (tc.decay_iters - tc.warmup_iters)
    return tc.min_lr + 0.5 * (tc.lr - tc.min_lr) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: list[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global 2-norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


class AdamWState:
    def __init__(self, params: list[torch.Tensor]):
        self.step = 0
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]

    def named_tensors(self, names: list[str]) -> dict[str, torch.Tensor]:
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out


def adamw_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: AdamWState,
    lr: float,
    tc: TrainConfig,
    decay_mask: list[bool] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    decay_mask marks which parameters receive weight decay (default: all).
    """
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for g in grads:
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; step aborted")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    state.step += 1
    bc1 = 1.0 - tc.beta1 ** state.step
    bc2 = 1.0 - tc.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v, decay in zip(params, grads, state.m, state.v, decay_mask):
            m.mul_(tc.beta1).add_(g, alpha=1.0 - tc.beta1)
            v.mul_(tc.beta2).addcmul_(g, g, value=1.0 - tc.beta2)
            if decay and tc.weight_decay > 0:
                p.mul_(1.0 - lr * tc.weight_decay)
            denom = (v / bc2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m, denom, value=-lr / bc1)


def decay_mask_for(model: Transformer) -> tuple[list[str], list[bool]]:
    """Weight decay applies to projection matrices only; norm gains, phase
    biases, and embeddings are excluded."""
    names, mask = [], []
    for name, p in model.named_parameters():
        names.append(name)
        is_matrix = p.dim() >= 2
        excluded = (name.endswith(".gain") or name.endswith(".deltas")
                    or "tok_emb" in name)
        mask.append(is_matrix and not excluded)
    return names, mask


class IndirectIndexData:
    """Batched view over tokenized indirect-indexing splits."""

    loss_mode = "final_token_only"

    def __init__(self, tokens: np.ndarray, target_pos: np.ndarray,
                 labels: np.ndarray, pad_id: int):
        self.tokens = tokens
        self.target_pos = target_pos
        self.labels = labels
        self.pad_id = pad_id

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx: np.ndarray) -> dict:
        tokens = torch.from_numpy(self.tokens[idx])
        return {
            "tokens": tokens,
            "targets": torch.from_numpy(self.labels[idx]),
            "target_positions": torch.from_numpy(self.target_pos[idx]),
            "key_padding_mask": tokens == self.pad_id,
        }

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        return self.batch(rng.integers(0, len(self.tokens), size=batch_size))


class ByteLMData:
    """Next-token batches from a contiguous token stream."""

    loss_mode = "all_tokens"

    def __init__(self, stream: np.ndarray, seq_len: int):
        if len(stream) < seq_len + 1:
            raise ValueError("stream shorter than one training window")
        self.stream = stream
        self.seq_len = seq_len

    def __len__(self):
        return len(self.stream) - self.seq_len

    def batch(self, offsets: np.ndarray) -> dict:
        x = np.stack([self.stream[o : o + self.seq_len] for o in offsets])
        y = np.stack([self.stream[o + 1 : o + self.seq_len + 1] for o in offsets])
        return {"tokens": torch.from_numpy(x), "targets": torch.from_numpy(y)}

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        offsets = rng.integers(0, len(self), size=batch_size)
        return self.batch(offsets)


def _batch_loss(model, batch: dict) -> torch.Tensor:
    logits = model(batch["tokens"],
                   key_padding_mask=batch.get("key_padding_mask"))
    if "target_positions" in batch:
        return model_loss(logits, batch["targets"], mode="final_token_only",
                          target_positions=batch["target_positions"])
    return model_loss(logits, batch["targets"], mode="all_tokens")


@torch.no_grad()
def evaluate(model, data, rng: np.random.Generator,
             tc: TrainConfig) -> tuple[float, float]:
    """Mean validation loss and (for final-token data) accuracy."""
    model.eval()
    losses, correct, total = [], 0, 0
    for _ in range(tc.eval_batches):
        batch = data.sample(rng, tc.batch_size)
        logits = model(batch["tokens"],
                       key_padding_mask=batch.get("key_padding_mask"))
        losses.append(float(_batch_loss_from_logits(logits, batch)))
        if "target_positions" in batch:
            B = logits.shape[0]
            picked = logits[torch.arange(B), batch["target_positions"]]
            correct += int((picked.argmax(dim=-1) == batch["targets"]).sum())
            total += B
    model.train()
    acc = correct / total if total else float("nan")
    return float(np.mean(losses)), acc


def _batch_loss_from_logits(logits, batch):
    if "target_positions" in batch:
        return model_loss(logits, batch["targets"], mode="final_token_only",
                          target_positions=batch["target_positions"])
    return model_loss(logits, batch["targets"], mode="all_tokens")


def train(
    model_cfg: ModelConfig,
    tc: TrainConfig,
    train_data,
    val_data,
    out_dir: str | Path,
    resume: bool = False,
    callbacks: list | None = None,
    compile_model: bool = False,
) -> tuple[Path, list[dict]]:
    """Run the full training loop; returns (best checkpoint path, metric rows).

    Deterministic given tc.seed: init, data order, and dropout all flow from
    it. Metrics are appended to metrics.csv; the best checkpoint by validation
    loss is kept alongside the latest one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    torch.manual_seed(tc.seed)
    model = Transformer(model_cfg)
    model.init_parameters(seed=tc.seed)

    names, dmask = decay_mask_for(model)
    params = [p for _, p in model.named_parameters()]
    state = AdamWState(params)
    start_step = 0
    best_val = float("inf")

    if resume and last_path.exists():
        loaded, info = load_checkpoint(last_path)
        model.load_state_dict(loaded.state_dict())
        start_step = info["step"]
        best_val = info["extra"].get("best_val", float("inf"))
        if info["optimizer_state"]:
            opt = info["optimizer_state"]
            state.step = start_step
            state.m = [opt[f"{n}.m"] for n in names]
            state.v = [opt[f"{n}.v"] for n in names]
        if info["rng_state"] is not None:
            torch.set_rng_state(info["rng_state"])
        params = [p for _, p in model.named_parameters()]

    data_rng = np.random.default_rng([tc.seed, 1])
    val_rng_seed = [tc.seed, 2]
    # Replay the data stream up to the resume point.
    for _ in range(start_step):
        data_rng.integers(0, max(len(train_data), 1), size=tc.batch_size)

    run_model = torch.compile(model) if compile_model else model
    model.train()
    rows: list[dict] = []
    write_header = not metrics_path.exists() or not resume
    mode = "w" if write_header else "a"
    with open(metrics_path, mode, newline="") as mf:
        writer = csv.DictWriter(mf, fieldnames=METRIC_FIELDS)
        if write_header:
            writer.writeheader()
        t_prev = time.monotonic()
        for step in range(start_step, tc.max_iters):
            lr = lr_at(step, tc)
            batch = train_data.sample(data_rng, tc.batch_size)
            loss = _batch_loss(run_model, batch)
            if not torch.isfinite(loss):
                save_checkpoint(last_path, model, step=step,
                                extra={"best_val": best_val, "halted": "nan-loss"})
                raise FloatingPointError(
                    f"non-finite loss at step {step}; last good checkpoint kept")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = [p.grad for p in params]
            grad_norm = clip_gradients(grads, tc.grad_clip)
            adamw_step(params, grads, state, lr, tc, decay_mask=dmask)
            model.clamp_phase_biases()

            is_eval = (step + 1) % tc.eval_interval == 0 or step + 1 == tc.max_iters
            if (step + 1) % tc.log_interval == 0 or is_eval or step == start_step:
                val_loss, val_acc = (float("nan"), float("nan"))
                if is_eval:
                    val_rng = np.random.default_rng(val_rng_seed + [step + 1])
                    val_loss, val_acc = evaluate(run_model, val_data, val_rng, tc)
                    if val_loss < best_val:
                        best_val = val_loss
                        save_checkpoint(best_path, model, step=step + 1,
                                        extra={"best_val": best_val,
                                               "val_accuracy": val_acc})
                now = time.monotonic()
                row = {
                    "step": step + 1,
                    "lr": f"{lr:.8g}",
                    "train_loss": f"{float(loss.detach()):.6f}",
                    "val_loss": "" if math.isnan(val_loss) else f"{val_loss:.6f}",
                    "val_accuracy": "" if math.isnan(val_acc) else f"{val_acc:.6f}",
                    "grad_norm": f"{grad_norm:.6f}",
                    "wall_ms": f"{(now - t_prev) * 1000:.1f}",
                }
                t_prev = now
                writer.writerow(row)
                mf.flush()
                rows.append(row)
                for cb in callbacks or []:
                    cb(model, step + 1, row)
        save_checkpoint(last_path, model, step=tc.max_iters,
                        optimizer_state=state.named_tensors(names),
                        rng_state=torch.get_rng_state(),
                        extra={"best_val": best_val})
    if not best_path.exists():
        save_checkpoint(best_path, model, step=tc.max_iters,
                        extra={"best_val": best_val})
    return best_path, rows


# Presets: "full" is the full-scale indirect-indexing recipe; "desk"
# presets are scaled down to run on one CPU core.

def preset(name: str) -> tuple[dict, TrainConfig]:
    """Return (model config kwargs, TrainConfig) for a named preset.

    Model kwargs omit vocab_size and encoding, which the caller supplies.
    """
    if name == "full":
        return (
            dict(embed_dim=512, n_layers=8, n_heads=8, max_seq_len=48,
                 base=10000.0, bias_init="uniform", dropout_p=0.0),
            TrainConfig(batch_size=64, seq_len=48, lr=2e-4, min_lr=2e-5,
                        weight_decay=0.01, grad_clip=1.0, beta2=0.99,
                        max_iters=100_000, decay_iters=100_000,
                        warmup_iters=4000),
        )
    if name == "desk":
        return (
            dict(embed_dim=256, n_layers=4, n_heads=4, max_seq_len=48,
                 base=10000.0, bias_init="uniform", dropout_p=0.0),
            TrainConfig(batch_size=64, seq_len=48, lr=6e-4, min_lr=6e-5,
                        weight_decay=0.01, grad_clip=1.0, beta2=0.99,
                        max_iters=20_000, decay_iters=20_000,
                        warmup_iters=1000),
        )
    if name == "desk-lm":
        return (
            dict(embed_dim=256, n_layers=4, n_heads=4, max_seq_len=128,
                 base=10000.0, bias_init="zero", dropout_p=0.0),
            TrainConfig(batch_size=16, seq_len=128, lr=6e-4, min_lr=6e-5,
                        weight_decay=0.01, grad_clip=1.0, beta2=0.99,
                        max_iters=4000, decay_iters=4000, warmup_iters=200),
        )
    if name == "tiny":
        return (
            dict(embed_dim=64, n_layers=2, n_heads=2, max_seq_len=48,
                 base=10000.0, bias_init="uniform", dropout_p=0.0),
            TrainConfig(batch_size=16, seq_len=48, lr=1e-3, min_lr=1e-4,
                        weight_decay=0.01, grad_clip=1.0, beta2=0.99,
                        max_iters=200, decay_iters=200, warmup_iters=20,
                        eval_interval=100, log_interval=20),
        )
    raise ValueError(f"unknown preset: {name!r}")
