"""Command-line interface: data generation, training, evaluation, analysis.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint
from .encoding import EncodingKind
from .evaluation import (extrapolation_sweep, final_token_accuracy,
                         frequency_usage, write_frequency_csv)
from .gradcheck import run_suite
from .model import ModelConfig
from .training import (ByteLMData, IndirectIndexData, TrainConfig, preset,
                       train)

ENCODING_CHOICES = [k.value for k in EncodingKind]


class UsageError(Exception):
    pass


def _out_path(p: str) -> Path:
    root = os.environ.get("POLARPOS_OUT_ROOT")
    path = Path(p)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_manifest(out_dir: Path, command: str, args_dict: dict,
                    files: dict[str, str] | None = None) -> None:
    manifest = {"command": command, "args": args_dict}
    if files:
        manifest["files"] = files
    _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=1))


def read_config_file(path: str) -> dict:
    """Flat key = value text; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _coerce(field_type, raw: str):
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    if field_type is EncodingKind or field_type == "EncodingKind":
        return EncodingKind(raw)
    return raw


def apply_overrides(model_kwargs: dict, tc: TrainConfig, values: dict) -> TrainConfig:
    """Apply flat key-value overrides to model kwargs and the train config."""
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    tc_updates = {}
    for key, raw in values.items():
        if key in model_fields:
            current = model_kwargs.get(key)
            typ = type(current) if current is not None else str
            if key == "encoding":
                typ = EncodingKind
            elif key in ("vocab_size", "embed_dim", "n_layers", "n_heads",
                         "max_seq_len"):
                typ = int
            elif key in ("base", "dropout_p"):
                typ = float
            model_kwargs[key] = _coerce(typ, raw) if isinstance(raw, str) else raw
        elif key in train_fields:
            typ = type(getattr(tc, key))
            tc_updates[key] = _coerce(typ, raw) if isinstance(raw, str) else raw
        else:
            raise UsageError(f"unknown config field: {key}")
    if tc_updates:
        tc = dataclasses.replace(tc, **tc_updates)
    return tc


def cmd_gen_data(args) -> int:
    if args.task != "indirect-idx":
        raise UsageError(f"unknown task: {args.task}")
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    files = {}
    for split, n in sizes.items():
        lines = []
        for i in range(n):
            lines.append(D.format_line(D.generate_example(args.seed, i, split)))
        path = out_dir / f"{split}.txt"
        _write_atomic(path, "\n".join(lines) + "\n")
        files[f"{split}.txt"] = _sha256(path)
    _write_manifest(out_dir, "gen-data",
                    {"task": args.task, "seed": args.seed, **sizes}, files)
    print(f"wrote {sum(sizes.values())} examples to {out_dir}")
    return 0


def _load_split(data_dir: Path, split: str, vocab: D.CharVocabulary) -> IndirectIndexData:
    path = data_dir / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing split file: {path}")
    examples = [D.parse_line(line) for line in path.read_text().splitlines() if line]
    tokens, target_pos, labels = D.tokenize_split(examples, vocab)
    return IndirectIndexData(tokens, target_pos, labels, vocab.pad_id)


def cmd_train(args) -> int:
    model_kwargs, tc = preset(args.preset)
    overrides = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        key, _, val = kv.partition("=")
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    tc = apply_overrides(model_kwargs, tc, overrides)

    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.task == "indirect-idx":
        if not args.data:
            raise UsageError("--data DIR required for indirect-idx")
        vocab = D.CharVocabulary()
        data_dir = _out_path(args.data)
        train_data = _load_split(data_dir, "train", vocab)
        val_data = _load_split(data_dir, "val", vocab)
        vocab_size = vocab.size
        extra_cfg = {"task": "indirect-idx",
                     "data_hash": _sha256(data_dir / "train.txt")}
    elif args.task == "lm":
        if not args.corpus:
            raise UsageError("--corpus FILE required for lm")
        stream, bvocab = D.load_char_corpus(args.corpus)
        train_stream, val_stream = D.split_stream(stream)
        train_data = ByteLMData(train_stream, tc.seq_len)
        val_data = ByteLMData(val_stream, tc.seq_len)
        vocab_size = bvocab.size
        extra_cfg = {"task": "lm", "byte_values": bvocab.byte_values,
                     "data_hash": _sha256(Path(args.corpus))}
    else:
        raise UsageError(f"unknown task: {args.task}")

    encoding = model_kwargs.pop("encoding", None) or EncodingKind(args.encoding)
    model_cfg = ModelConfig(vocab_size=vocab_size, encoding=encoding,
                            **model_kwargs)
    if args.task == "lm":
        model_cfg.max_seq_len = tc.seq_len

    _write_manifest(out_dir, "train", {
        "task": args.task, "encoding": model_cfg.encoding.value,
        "preset": args.preset, "seed": tc.seed, "overrides": overrides,
        **extra_cfg,
    })
    # task metadata rides along in every checkpoint via the run manifest
    best, rows = train(model_cfg, tc, train_data, val_data, out_dir,
                       resume=args.resume, compile_model=args.compile)
    print(f"training done: best checkpoint {best}")
    if rows:
        last = rows[-1]
        print(f"final step {last['step']} train_loss {last['train_loss']}")
    return 0


def _load_run(ckpt_path: Path):
    if not ckpt_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {ckpt_path}")
    model, info = load_checkpoint(ckpt_path)
    run_manifest = {}
    manifest_path = ckpt_path.parent / "manifest.json"
    if manifest_path.exists():
        run_manifest = json.loads(manifest_path.read_text())
    return model, info, run_manifest


def cmd_eval(args) -> int:
    model, info, run = _load_run(_out_path(args.ckpt))
    vocab = D.CharVocabulary()
    if model.cfg.vocab_size != vocab.size:
        raise RuntimeError(
            f"checkpoint vocabulary size {model.cfg.vocab_size} != task "
            f"vocabulary {vocab.size}")
    data = _load_split(_out_path(args.data), args.split, vocab)
    acc = final_token_accuracy(model, data)
    print(f"accuracy {acc:.4f} over {len(data)} examples "
          f"(split={args.split}, step={info['step']})")
    return 0


def cmd_extrapolate(args) -> int:
    model, info, run = _load_run(_out_path(args.ckpt))
    byte_values = run.get("args", {}).get("byte_values")
    stream, bvocab = D.load_char_corpus(args.corpus)
    if byte_values is not None and bvocab.byte_values != byte_values:
        raise RuntimeError("corpus vocabulary differs from the training corpus")
    train_len = model.cfg.max_seq_len
    if args.lengths:
        lengths = [int(x) for x in args.lengths.split(",")]
    else:
        lengths = [train_len * m for m in range(1, 11)]
    _, val_stream = D.split_stream(stream)
    out_csv = _out_path(args.out) if args.out else None
    results = extrapolation_sweep(model, val_stream, lengths,
                                  max_windows=args.max_windows, csv_path=out_csv)
    for length in lengths:
        print(f"len {length:6d}  ppl {results[length]:.4f}")
    return 0


def _default_probe_paths() -> list[Path]:
    fixtures = Path(__file__).parent / "fixtures"
    return sorted(fixtures.glob("sonnet_*.txt"))


def cmd_analyze_freq(args) -> int:
    model, info, run = _load_run(_out_path(args.ckpt))
    probe_paths = ([Path(p) for p in args.probes] if args.probes
                   else _default_probe_paths())
    byte_values = run.get("args", {}).get("byte_values")
    probes = []
    for path in probe_paths:
        raw = path.read_bytes()
        if byte_values is not None:
            known = set(byte_values)
            bvocab = D.ByteVocabulary(byte_values)
            ids = bvocab.encode_bytes(bytes(b for b in raw if b in known))
        else:
            vocab = D.CharVocabulary()
            text = "".join(ch for ch in raw.decode("utf-8", "ignore")
                           if ch in vocab.symbols)
            ids = np.array(vocab.encode(text), dtype=np.int64)
        if len(ids) == 0:
            raise RuntimeError(f"probe text empty after tokenization: {path}")
        probes.append(ids)
    q_mat, k_mat = frequency_usage(model, probes)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frequency_csv(q_mat, out_dir / "freq_usage_queries.csv")
    write_frequency_csv(k_mat, out_dir / "freq_usage_keys.csv")
    print(f"wrote frequency-usage CSVs to {out_dir} "
          f"({q_mat.values.shape[0]} frequencies x {q_mat.values.shape[1]} layers)")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name:45s} {err:.3e}")
    print(f"max relative error {worst:.3e} (threshold 1e-4)")
    if worst > 1e-4:
        raise RuntimeError("gradient check failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarpos")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate indirect-indexing splits")
    p.add_argument("--task", default="indirect-idx")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=1_000_000)
    p.add_argument("--val", type=int, default=10_000)
    p.add_argument("--test", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--task", default="indirect-idx", choices=["indirect-idx", "lm"])
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--encoding", default="pope", choices=ENCODING_CHOICES)
    p.add_argument("--preset", default="desk",
                   choices=["full", "desk", "desk-lm", "tiny"])
    p.add_argument("--data", help="dataset directory (indirect-idx)")
    p.add_argument("--corpus", help="corpus text file (lm)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--compile", action="store_true",
                   help="use torch.compile for the training forward pass")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="final-token accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extrapolate", help="perplexity vs evaluation length")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lengths", help="comma-separated lengths")
    p.add_argument("--max-windows", type=int)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("analyze-freq", help="frequency-usage matrices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probes", nargs="*", help="probe text files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_freq)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (UsageError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
