"""End-to-end acceptance checks.

Each test prints one PASS line on success (run with `pytest -s` to see them).
The four artifact-based checks (task accuracy, length extrapolation,
phase-offset containment, determinism) read training runs from runs/,
produced by scripts/make_acceptance_runs.sh.
"""

import csv
import math
import re
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from polarpos import data as D
from polarpos.checkpoint import load_checkpoint
from polarpos.encoding import (EncodingKind, PhaseBias, make_frequencies,
                               pope_encode, pope_score, pope_score_polar,
                               rope_score, rope_score_polar)
from polarpos.evaluation import frequency_usage
from polarpos.gradcheck import run_suite
from polarpos.model import ModelConfig, Transformer

RUNS = Path(__file__).resolve().parent.parent / "runs"


def report(name: str, detail: str = "") -> None:
    print(f"[acceptance] {name}: PASS {detail}".rstrip(), file=sys.stderr)


def need(path: Path) -> Path:
    if not path.exists():
        pytest.fail(f"missing artifact {path}; run scripts/make_acceptance_runs.sh")
    return path


def test_dual_form_score_equivalence():
    """Dot-product and polar-form scores agree to 1e-9 for both encodings."""
    rng = np.random.default_rng(0)
    n_cases = 0
    worst = 0.0
    for d in (2, 4, 64):
        rope_fs = make_frequencies(EncodingKind.ROPE, d, 10000.0)
        pope_fs = make_frequencies(EncodingKind.POPE, d, 10000.0)
        for _ in range(200):
            q = rng.normal(size=d)
            k = rng.normal(size=d)
            t = int(rng.integers(0, 10_001))
            s = int(rng.integers(0, t + 1))
            err = abs(rope_score(q, k, t, s, rope_fs)
                      - rope_score_polar(q, k, t, s, rope_fs))
            worst = max(worst, err)
            bias = PhaseBias(-rng.uniform(0, 2 * math.pi, size=d))
            qe = pope_encode(q, t, pope_fs)
            ke = pope_encode(k, s, pope_fs, bias=bias, is_key=True)
            err = abs(pope_score(qe, ke)
                      - pope_score_polar(q, k, t, s, pope_fs, bias=bias))
            worst = max(worst, err)
            n_cases += 2
    assert n_cases >= 1000
    assert worst <= 1e-9, f"worst form disagreement {worst:.3e}"
    report("dual-form score equivalence", f"({n_cases} cases, max {worst:.2e})")


def test_translation_invariance():
    """Scores depend only on the position offset, to 1e-9 relative."""
    rng = np.random.default_rng(1)
    worst = 0.0
    for d in (4, 64):
        for kind in (EncodingKind.ROPE, EncodingKind.POPE):
            fs = make_frequencies(kind, d, 10000.0)
            for shift in (1, 7, 1000):
                for _ in range(100):
                    q = rng.normal(size=d)
                    k = rng.normal(size=d)
                    t = int(rng.integers(0, 5000))
                    s = int(rng.integers(0, t + 1))
                    if kind is EncodingKind.ROPE:
                        a = rope_score(q, k, t, s, fs)
                        b = rope_score(q, k, t + shift, s + shift, fs)
                    else:
                        a = pope_score(pope_encode(q, t, fs),
                                       pope_encode(k, s, fs))
                        b = pope_score(pope_encode(q, t + shift, fs),
                                       pope_encode(k, s + shift, fs))
                    rel = abs(a - b) / max(1.0, abs(a))
                    worst = max(worst, rel)
    assert worst <= 1e-9, f"worst translation drift {worst:.3e}"
    report("translation invariance", f"(max rel {worst:.2e})")


def test_self_match_maximality():
    """With identical content everywhere, the zero-offset key scores highest."""
    rng = np.random.default_rng(2)
    for case in range(100):
        d = int(rng.choice([4, 8, 64]))
        kind = EncodingKind.ROPE if case % 2 else EncodingKind.POPE
        fs = make_frequencies(kind, d, 10000.0)
        raw = rng.normal(size=d)
        t = int(rng.integers(512, 2000))
        if kind is EncodingKind.ROPE:
            scores = [rope_score(raw, raw, t, s, fs)
                      for s in range(t - 512, t + 1)]
        else:
            qe = pope_encode(raw, t, fs)
            scores = [pope_score(qe, pope_encode(raw, s, fs))
                      for s in range(t - 512, t + 1)]
        assert np.argmax(scores) == len(scores) - 1, (
            f"case {case}: best offset {len(scores) - 1 - np.argmax(scores)}")
    report("self-match maximality", "(100 cases, offsets up to 512)")


def test_gradient_suite():
    """Analytic gradients agree with finite differences to 1e-4."""
    results = run_suite(seed=0)
    worst_name = max(results, key=results.get)
    assert results[worst_name] <= 1e-4, (
        f"{worst_name}: {results[worst_name]:.3e}")
    report("gradient check", f"(worst {worst_name} {results[worst_name]:.2e})")


def test_dataset_validity():
    """100k generated examples all pass an independent validator."""
    failures = 0
    for i in range(100_000):
        ex = D.generate_example(0, i, "train")
        try:
            D.validate_example(ex)
            D.validate_example(D.parse_line(D.format_line(ex)))
        except (D.ExampleInvalid, D.ParseError):
            failures += 1
    assert failures == 0, f"{failures} invalid examples out of 100000"
    # reference layout: query char, signed shift, answer, comma-separated
    ref = D.parse_line("TzbkWoKDyscBepYvfwxEVQtgPa, c, -8, b")
    D.validate_example(ref)
    assert D.format_line(ref) == "TzbkWoKDyscBepYvfwxEVQtgPa, c, -8, b"
    report("dataset validity", "(100000 examples, 0 failures)")


def _read_accuracy(run: Path) -> float:
    text = need(run / "test_accuracy.txt").read_text()
    m = re.search(r"accuracy ([0-9.]+)", text)
    assert m, f"no accuracy line in {run}/test_accuracy.txt"
    return float(m.group(1))


def test_task_accuracy_gap():
    """Polar encoding beats rotary on the indexing task by a wide margin."""
    pope = [_read_accuracy(RUNS / f"idx-pope-s{s}") for s in (0, 1)]
    rope = [_read_accuracy(RUNS / f"idx-rope-s{s}") for s in (0, 1)]
    pope_mean, rope_mean = np.mean(pope), np.mean(rope)
    assert pope_mean >= 0.80, f"polar mean accuracy {pope_mean:.4f} < 0.80"
    assert pope_mean - rope_mean >= 0.30, (
        f"gap {pope_mean - rope_mean:.4f} < 0.30 "
        f"(polar {pope_mean:.4f}, rotary {rope_mean:.4f})")
    report("task accuracy gap",
           f"(polar {pope_mean:.4f} vs rotary {rope_mean:.4f})")


def _read_sweep(run: Path) -> dict[int, float]:
    with open(need(run / "extrapolation.csv")) as f:
        return {int(r["eval_len"]): float(r["perplexity"])
                for r in csv.DictReader(f)}


def test_length_extrapolation():
    """Perplexity degrades less beyond the training length for polar."""
    pope = _read_sweep(RUNS / "lm-pope-s0")
    rope = _read_sweep(RUNS / "lm-rope-s0")
    for sweep in (pope, rope):
        assert set(sweep) >= {128, 256, 512, 1024}
    pope_ratio = pope[1024] / pope[128]
    rope_ratio = rope[1024] / rope[128]
    assert rope_ratio > 1.5, f"rotary degradation ratio {rope_ratio:.3f} <= 1.5"
    assert pope_ratio < rope_ratio, (
        f"polar ratio {pope_ratio:.3f} >= rotary ratio {rope_ratio:.3f}")
    report("length extrapolation",
           f"(ppl ratio 1024/128: polar {pope_ratio:.2f}, rotary {rope_ratio:.2f})")


def test_frequency_analysis_shapes():
    """Usage matrices: one row per frequency (d for polar, d/2 for rotary)."""
    rng = np.random.default_rng(3)
    for encoding, rows_of in ((EncodingKind.POPE, lambda d: d),
                              (EncodingKind.ROPE, lambda d: d // 2)):
        ckpt = RUNS / f"lm-{encoding.value}-s0" / "best.ckpt"
        if ckpt.exists():
            model, _ = load_checkpoint(ckpt)
        else:
            cfg = ModelConfig(vocab_size=64, embed_dim=256, n_layers=4,
                              n_heads=4, max_seq_len=128, encoding=encoding)
            model = Transformer(cfg)
            model.init_parameters(seed=0)
        probes = [rng.integers(0, model.cfg.vocab_size, size=64)
                  for _ in range(3)]
        qm, km = frequency_usage(model, probes)
        d, L = model.cfg.head_dim, model.cfg.n_layers
        assert qm.values.shape == (rows_of(d), L), (
            f"{encoding.value}: query matrix {qm.values.shape}")
        assert km.values.shape == (rows_of(d), L)
        assert np.isfinite(qm.values).all() and np.isfinite(km.values).all()
        assert (qm.values >= 0).all() and (km.values >= 0).all()
    report("frequency-analysis shapes")


def test_phase_offset_containment():
    """Every trained checkpoint keeps key phase offsets inside [-2*pi, 0]."""
    ckpts = sorted(RUNS.glob("*/best.ckpt")) + sorted(RUNS.glob("*/last.ckpt"))
    if not ckpts:
        pytest.fail(f"no checkpoints under {RUNS}; "
                    "run scripts/make_acceptance_runs.sh")
    checked = 0
    for path in ckpts:
        model, _ = load_checkpoint(path)
        for deltas in model.phase_biases():
            d = deltas.detach()
            lo, hi = float(d.min()), float(d.max())
            assert lo >= -2 * math.pi - 1e-6, f"{path}: min offset {lo}"
            assert hi <= 0.0 + 1e-12, f"{path}: max offset {hi}"
            checked += 1
    assert checked > 0, "no polar checkpoints with phase offsets found"
    report("phase-offset containment",
           f"({checked} tensors across {len(ckpts)} checkpoints)")


def test_training_determinism():
    """Two runs with the same seed produce identical metric traces."""
    rows = []
    for tag in ("det-a", "det-b"):
        with open(need(RUNS / tag / "metrics.csv")) as f:
            rows.append([{k: v for k, v in r.items() if k != "wall_ms"}
                         for r in csv.DictReader(f)])
    a, b = rows
    assert len(a) == len(b) and len(a) > 0
    assert a == b, "metric traces differ between identically-seeded runs"
    report("training determinism", f"({len(a)} metric rows identical)")
