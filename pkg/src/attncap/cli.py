"""Command-line entry points: gen-data / train / eval / infer / render.

Configuration comes from an optional flat key=value file overridden by
flags; all randomness is controlled by --seed.  Failures exit nonzero with
one machine-parsable line on stderr: ``error: <Category>: <detail>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields

from . import evaluation, io_formats, scenes, tokenizer, training
from .decoder import decode_greedy

OUT_DIR_ENV = "ATTNCAP_OUT_DIR"

USAGE_EXIT = 2
ERROR_EXIT = 1

_INPUT_ERRORS = (
    io_formats.BadMagic,
    io_formats.VersionUnsupported,
    io_formats.TruncatedPayload,
    io_formats.ChecksumMismatch,
    io_formats.MissingParameter,
    io_formats.EmptyTrace,
    io_formats.BadAnnotation,
    scenes.InvalidSpec,
    scenes.NoActiveReasons,
    tokenizer.EmptyCorpus,
    tokenizer.UnknownWord,
    tokenizer.SentenceTooLong,
    tokenizer.InvalidTokenId,
    tokenizer.InvalidTokenSequence,
    training.EmptyDataset,
    training.DimMismatch,
    evaluation.EmptyReference,
    evaluation.EmptyInput,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
)


class DisjointSeedViolation(ValueError):
    pass


def _default_out(value):
    if value is not None:
        return value
    return os.environ.get(OUT_DIR_ENV)


def load_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {text!r}")
    if kind is float or name == "grad_clip":
        return float(text)
    if kind is int:
        return int(text)
    return text


def build_train_config(config_path, overrides: dict, defaults: dict = None) -> training.TrainConfig:
    """Precedence: dataclass defaults < ``defaults`` < config file < CLI flags."""
    known = {f.name for f in dataclass_fields(training.TrainConfig)}
    kinds = {
        "h": int, "w": int, "f": int, "d": int, "t_max": int,
        "gate_enabled": bool, "learning_rate": float, "batch_size": int,
        "epochs": int, "optimizer": str, "beta1": float, "beta2": float,
        "epsilon": float, "grad_clip": float, "loss_mask": str, "seed": int,
    }
    values: dict = dict(defaults or {})
    if config_path:
        for key, text in load_config_file(config_path).items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(key, text, kinds[key])
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    return training.TrainConfig(**values)


def _scene_id(i: int) -> str:
    return f"scene_{i:05d}"


def _write_dataset(out_dir, spec: scenes.SceneSpec, n: int, seed: int, vocab) -> None:
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    dataset = scenes.generate_dataset(spec, n, vocab, seed=seed)
    records = []
    masks = {}
    for i, scene in enumerate(dataset):
        sid = _scene_id(i)
        io_formats.write_feature_file(os.path.join(out_dir, "features", sid + ".feat"), scene.features)
        records.append(io_formats.AnnotationRecord(
            id=sid,
            reasons=tuple(tokenizer.CANONICAL_REASONS[c] for c in sorted(scene.annotation)),
        ))
        masks[sid] = {str(c): sorted(cells) for c, cells in scene.planted_masks.items()}
    io_formats.write_annotations(os.path.join(out_dir, "annotations.jsonl"), records)
    with open(os.path.join(out_dir, "masks.json"), "w", encoding="utf-8") as fh:
        json.dump(masks, fh, sort_keys=True)
    tokenizer.save_vocab(vocab, os.path.join(out_dir, "vocab.txt"))
    meta = {
        "n": n, "seed": seed, "h": spec.h, "w": spec.w, "f": spec.f,
        "signal_amplitude": spec.signal_amplitude, "noise_sigma": spec.noise_sigma,
        "reason_prob": spec.reason_prob,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def load_dataset(data_dir, vocab):
    """(FeatureMap, TokenSequence) pairs in annotation order."""
    records = io_formats.read_annotations(os.path.join(data_dir, "annotations.jsonl"))
    dataset = []
    for rec in records:
        x_map = io_formats.read_feature_file(os.path.join(data_dir, "features", rec.id + ".feat"))
        ordered = sorted(rec.reasons, key=tokenizer.CANONICAL_REASONS.index)
        dataset.append((x_map, tokenizer.encode(ordered, vocab)))
    return dataset


def _cap_threads(n: int) -> None:
    # Compute is single-threaded by design (bit-reproducibility); this caps
    # the BLAS pools so the flag is honored even for large matmuls.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def cmd_gen_data(args) -> int:
    spec = scenes.SceneSpec(
        h=args.h, w=args.w, f=args.f,
        signal_amplitude=args.amplitude, noise_sigma=args.noise_sigma,
        reason_prob=args.reason_prob, seed=args.seed,
    )
    vocab = tokenizer.canonical_vocab()
    out = _default_out(args.out)
    if out is None:
        raise ValueError(f"--out is required (or set {OUT_DIR_ENV})")
    _write_dataset(out, spec, args.n, args.seed, vocab)
    print(f"wrote {args.n} scenes to {out}")
    if args.test_out is not None:
        if args.test_seed is None or args.test_seed == args.seed:
            raise DisjointSeedViolation("test split requires --test-seed distinct from --seed")
        _write_dataset(args.test_out, spec, args.test_n, args.test_seed, vocab)
        print(f"wrote {args.test_n} scenes to {args.test_out}")
    return 0


def cmd_train(args) -> int:
    vocab = tokenizer.canonical_vocab()
    overrides = {
        "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
        "d": args.d, "optimizer": args.optimizer, "loss_mask": args.loss_mask,
        "seed": args.seed, "gate_enabled": args.gate,
    }
    defaults = {}
    meta_path = os.path.join(args.data, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        defaults = {key: int(meta[key]) for key in ("h", "w", "f")}
    config = build_train_config(args.config, overrides, defaults)
    dataset = load_dataset(args.data, vocab)
    params, report = training.fit(
        dataset, config, vocab,
        checkpoint_hook=lambda p: io_formats.save_checkpoint(args.out, p),
        log_fn=(None if args.quiet else lambda msg: print(msg, flush=True)),
    )
    report_path = args.report or (args.out + ".report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(include_timing=False), fh, indent=2, sort_keys=True)
    print(f"checkpoint {report.checkpoint_id} -> {args.out}")
    print(f"wall clock: {report.wall_clock_seconds:.1f}s", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    vocab = tokenizer.canonical_vocab()
    params = io_formats.load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, vocab)
    report = evaluation.evaluate_dataset(params, dataset, vocab)
    for key, value in report.headline().items():
        print(f"{key} {json.dumps(value)}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return 0


def cmd_infer(args) -> int:
    vocab = tokenizer.canonical_vocab()
    params = io_formats.load_checkpoint(args.ckpt)
    x_map = io_formats.read_feature_file(args.feature)
    seq, trace = decode_greedy(x_map, params, vocab)
    sentence = tokenizer.decode(seq, vocab)
    reasons = evaluation.extract_reason_set(seq, vocab)
    actions = evaluation.derive_actions(reasons)
    print(f"sentence: {sentence}")
    print("reasons: " + (" | ".join(tokenizer.CANONICAL_REASONS[c] for c in sorted(reasons)) or "(none)"))
    action_words = [
        name for name, flag in
        (("cannot turn left", actions.cannot_turn_left), ("cannot turn right", actions.cannot_turn_right))
        if flag
    ]
    print("actions: " + (" | ".join(action_words) or "(none)"))
    if args.trace_out:
        io_formats.write_trace(args.trace_out, trace, vocab)
    if args.render_dir:
        io_formats.render_attention(trace, args.render_dir, vocab, scale=args.scale, overlay_image=args.overlay)
    return 0


def cmd_render(args) -> int:
    vocab = tokenizer.canonical_vocab()
    trace, _words = io_formats.read_trace(args.trace)
    out = _default_out(args.out)
    if out is None:
        raise ValueError(f"--out is required (or set {OUT_DIR_ENV})")
    io_formats.render_attention(trace, out, vocab, scale=args.scale, overlay_image=args.overlay)
    print(f"rendered {len(trace)} maps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attncap", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="cap worker parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--h", type=int, default=7)
    p.add_argument("--w", type=int, default=7)
    p.add_argument("--f", type=int, default=32)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--reason-prob", type=float, default=0.35)
    p.add_argument("--test-out", default=None, help="also write a test split here")
    p.add_argument("--test-n", type=int, default=500)
    p.add_argument("--test-seed", type=int, default=None, help="must differ from --seed")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a decoder on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--report", default=None, help="report JSON path (default: <out>.report.json)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--optimizer", choices=training.OPTIMIZERS, default=None)
    p.add_argument("--loss-mask", choices=training.MASK_MODES, default=None)
    p.add_argument("--seed", type=int, default=None)
    gate = p.add_mutually_exclusive_group()
    gate.add_argument("--gate", dest="gate", action="store_true", default=None)
    gate.add_argument("--no-gate", dest="gate", action="store_false")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None, help="metrics JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="generate the sentence for one feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--render-dir", default=None)
    p.add_argument("--overlay", default=None, help="P6 PPM source image for overlays")
    p.add_argument("--scale", type=int, default=32)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("render", help="render heatmaps from a saved trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--overlay", default=None)
    p.add_argument("--scale", type=int, default=32)
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    _cap_threads(args.threads)
    try:
        return args.fn(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
