"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines as
they happen (they are also visible in captured output on failure).  The two
training pipelines (overfit and generalization) execute twice each so the
determinism criterion can byte-compare full artifacts.
"""

import itertools
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import pytest

from attncap import tensor as T
from attncap.decoder import DecoderConfig, decode_greedy, forward_teacher_forced, init_params
from attncap.evaluation import bleu, derive_actions, evaluate_dataset, f1_all, mf1
from attncap.features import FeatureMap
from attncap.io_formats import save_checkpoint
from attncap.scenes import SceneSpec, attention_alignment, generate_dataset
from attncap.tensor import Tape, Tensor, backward
from attncap.tokenizer import canonical_vocab, encode
from attncap.training import TrainConfig, fit, sequence_cross_entropy, temporal_cross_entropy

from fdcheck import finite_difference_grad, max_rel_error
from test_evaluation import bleu_bruteforce, confusion_bruteforce

VOCAB = canonical_vocab()

# pipeline hyperparameters pinned for the acceptance runs
OVERFIT = dict(d=64, learning_rate=3e-3, batch_size=16, epochs=150, seed=0)
GENERALIZE = dict(d=16, learning_rate=3e-3, batch_size=16, epochs=12, seed=0)


def _criterion(num, text, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] criterion {num}: {text}{(' -- ' + detail) if detail else ''}")
    assert passed, f"criterion {num} failed: {text} {detail}"


# ---------------------------------------------------------------------------
# criterion 1: end-to-end gradient integrity on the tiny config
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    cfg = DecoderConfig(h=2, w=2, f=5, d=3, vocab_size=6, t_max=5, gate_enabled=True)
    params = init_params(cfg, np.random.default_rng(41))
    rng = np.random.default_rng(42)
    x_map = FeatureMap(h=2, w=2, data=rng.normal(size=(4, 5)))
    target = (0, 4, 5, 1, 3)

    def loss_tensor():
        rows, _ = forward_teacher_forced(x_map, target, params)
        return sequence_cross_entropy(rows, target, eos_id=1, mask_mode="none")

    with Tape() as tape:
        loss = loss_tensor()
    backward(tape, loss)
    worst = 0.0
    worst_name = ""
    for name, t in params.named():
        numeric = finite_difference_grad(t, lambda: loss_tensor().item())
        err = max_rel_error(t.grad, numeric)
        if err > worst:
            worst, worst_name = err, name
    _criterion(
        1,
        "full-decoder finite-difference check <= 1e-3 on every parameter group",
        worst <= 1e-3,
        f"max rel error {worst:.2e} ({worst_name})",
    )


# ---------------------------------------------------------------------------
# shared training pipelines (criteria 2, 3, 4, 7)
# ---------------------------------------------------------------------------


@dataclass
class PipelineRun:
    checkpoint_bytes: bytes
    train_report: dict
    metrics: dict
    extra: dict


def _run_overfit(tmp_dir, tag):
    scenes = generate_dataset(SceneSpec(), 64, VOCAB, seed=1)
    data = [(s.features, s.target) for s in scenes]
    cfg = TrainConfig(**OVERFIT)
    params, report = fit(data, cfg, VOCAB)
    ckpt_path = os.path.join(tmp_dir, f"overfit-{tag}.ckpt")
    save_checkpoint(ckpt_path, params)
    exact = sum(decode_greedy(x, params, VOCAB)[0] == t for x, t in data)
    metrics = evaluate_dataset(params, data, VOCAB)
    with open(ckpt_path, "rb") as fh:
        blob = fh.read()
    return PipelineRun(
        checkpoint_bytes=blob,
        train_report=report.to_dict(include_timing=False),
        metrics=metrics.to_dict(),
        extra={"exact": exact, "n": len(data)},
    )


def _run_generalization(tmp_dir, tag):
    spec = SceneSpec()
    train_scenes = generate_dataset(spec, 2000, VOCAB, seed=1)
    test_scenes = generate_dataset(spec, 500, VOCAB, seed=2)
    train_pairs = [(s.features, s.target) for s in train_scenes]
    test_pairs = [(s.features, s.target) for s in test_scenes]
    cfg = TrainConfig(**GENERALIZE)
    params, report = fit(train_pairs, cfg, VOCAB)
    ckpt_path = os.path.join(tmp_dir, f"gen-{tag}.ckpt")
    save_checkpoint(ckpt_path, params)
    metrics = evaluate_dataset(params, test_pairs, VOCAB)

    singles = [s for s in test_scenes if len(s.annotation) == 1]
    per_class = {c: [] for c in range(6)}
    missing = 0
    for scene in singles:
        _, trace = decode_greedy(scene.features, params, VOCAB)
        result = attention_alignment(trace, scene, VOCAB)
        for cls, ratio in result.per_reason.items():
            per_class[cls].append(ratio)
        missing += len(result.missing)
    ratios = [r for values in per_class.values() for r in values]
    with open(ckpt_path, "rb") as fh:
        blob = fh.read()
    return PipelineRun(
        checkpoint_bytes=blob,
        train_report=report.to_dict(include_timing=False),
        metrics=metrics.to_dict(),
        extra={
            "mean_ratio": float(np.mean(ratios)),
            "per_class_ratio": {c: float(np.mean(v)) if v else None for c, v in per_class.items()},
            "n_singles": len(singles),
            "missing_segments": missing,
        },
    )


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory):
    tmp_dir = str(tmp_path_factory.mktemp("overfit"))
    return _run_overfit(tmp_dir, "run1"), _run_overfit(tmp_dir, "run2")


@pytest.fixture(scope="session")
def generalization_runs(tmp_path_factory):
    tmp_dir = str(tmp_path_factory.mktemp("gen"))
    return _run_generalization(tmp_dir, "run1"), _run_generalization(tmp_dir, "run2")


def test_criterion_2_overfit_oracle(overfit_runs):
    run = overfit_runs[0]
    exact_frac = run.extra["exact"] / run.extra["n"]
    final_loss = run.train_report["epoch_loss"][-1]
    avg_bleu = run.metrics["avg_bleu"]
    ok = exact_frac >= 0.95 and avg_bleu >= 0.95 and final_loss < 0.05
    _criterion(
        2,
        "64-scene overfit: >=95% exact, train BLEU >= 0.95, final loss < 0.05",
        ok,
        f"exact {run.extra['exact']}/{run.extra['n']}, bleu {avg_bleu:.4f}, loss {final_loss:.4f}",
    )


def test_criterion_3_generalization_smoke(generalization_runs):
    run = generalization_runs[0]
    mf1_reasons = run.metrics["reasons_mf1"]
    f1_actions = run.metrics["actions_f1_all"]
    ok = mf1_reasons >= 0.90 and f1_actions >= 0.95
    _criterion(
        3,
        "2000/500 split: test reasons mF1 >= 0.90, actions F1_all >= 0.95",
        ok,
        f"reasons mF1 {mf1_reasons:.4f}, actions F1_all {f1_actions:.4f}",
    )


def test_criterion_4_attention_alignment(generalization_runs):
    run = generalization_runs[0]
    mean_ratio = run.extra["mean_ratio"]
    breakdown = ", ".join(
        f"class {c}: {v:.3f}" if v is not None else f"class {c}: n/a"
        for c, v in sorted(run.extra["per_class_ratio"].items())
    )
    _criterion(
        4,
        "single-reason test scenes: mean alignment ratio >= 2.0",
        mean_ratio >= 2.0,
        f"mean {mean_ratio:.3f} over {run.extra['n_singles']} scenes ({breakdown})",
    )


# ---------------------------------------------------------------------------
# criterion 5: metric oracles
# ---------------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(55)
    words = [f"w{i}" for i in range(7)]
    bleu_worst = 0.0
    for _ in range(1000):
        hyp = [words[int(rng.integers(0, 7))] for _ in range(int(rng.integers(1, 10)))]
        ref = [words[int(rng.integers(0, 7))] for _ in range(int(rng.integers(1, 10)))]
        bleu_worst = max(bleu_worst, abs(bleu(hyp, ref) - bleu_bruteforce(hyp, ref)))

    f1_ok = True
    for pred_bits in itertools.product([0, 1], repeat=6):
        pred = frozenset(i for i in range(6) if pred_bits[i])
        for label_bits in itertools.product([0, 1], repeat=6):
            label = frozenset(i for i in range(6) if label_bits[i])
            tp, fp, fn = confusion_bruteforce(pred_bits, label_bits)
            expected = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
            if abs(f1_all([pred], [label]) - expected) > 1e-15:
                f1_ok = False

    actions_ok = True
    for bits in itertools.product([0, 1], repeat=6):
        subset = frozenset(i for i in range(6) if bits[i])
        act = derive_actions(subset)
        if act.cannot_turn_left != any(b for b in bits[:3]):
            actions_ok = False
        if act.cannot_turn_right != any(b for b in bits[3:]):
            actions_ok = False

    ok = bleu_worst <= 1e-12 and f1_ok and actions_ok
    _criterion(
        5,
        "BLEU vs brute force <= 1e-12 (1000 pairs); F1 vs confusion counts (4096 pairs); action rule (64 subsets)",
        ok,
        f"bleu max diff {bleu_worst:.2e}, f1 {'ok' if f1_ok else 'BAD'}, actions {'ok' if actions_ok else 'BAD'}",
    )


# ---------------------------------------------------------------------------
# criterion 6: literal Eq-4 batch loss on a 2-example fixture
# ---------------------------------------------------------------------------


def test_criterion_6_literal_loss():
    rng = np.random.default_rng(66)
    v = len(VOCAB)
    t_max = 6
    # two fixed fixtures: short sequences with explicit targets
    target_a = (0, 9, 8, 1, 3, 3)  # SOS no lane EOS NULL NULL
    target_b = (0, 10, 11, 5, 1, 3)  # SOS solid line on EOS NULL
    logits_a = rng.normal(scale=2.0, size=(t_max - 1, v))
    logits_b = rng.normal(scale=2.0, size=(t_max - 1, v))

    batch_loss = temporal_cross_entropy(
        [[Tensor(r) for r in logits_a], [Tensor(r) for r in logits_b]],
        [target_a, target_b],
        eos_id=VOCAB.eos_id,
        mask_mode="none",
    ).item()

    # independent arithmetic: -(1/N) sum_i sum_t log softmax(logits)[target]
    expected = 0.0
    for logits, target in ((logits_a, target_a), (logits_b, target_b)):
        for t_pos in range(1, t_max):
            row = logits[t_pos - 1]
            exps = [math.exp(x) for x in row]
            p = exps[target[t_pos]] / sum(exps)
            expected += -math.log(p)
    expected /= 2.0

    diff = abs(batch_loss - expected)
    _criterion(
        6,
        "mask_mode=none batch loss equals hand-computed -(1/N) sum sum log p to 1e-9",
        diff <= 1e-9,
        f"diff {diff:.2e}",
    )


# ---------------------------------------------------------------------------
# criterion 7: determinism of the full pipelines
# ---------------------------------------------------------------------------


def test_criterion_7_determinism(overfit_runs, generalization_runs):
    problems = []
    for name, (r1, r2) in (("overfit", overfit_runs), ("generalization", generalization_runs)):
        if r1.checkpoint_bytes != r2.checkpoint_bytes:
            problems.append(f"{name} checkpoints differ")
        if json.dumps(r1.train_report, sort_keys=True) != json.dumps(r2.train_report, sort_keys=True):
            problems.append(f"{name} train reports differ")
        if json.dumps(r1.metrics, sort_keys=True) != json.dumps(r2.metrics, sort_keys=True):
            problems.append(f"{name} metrics differ")
        if json.dumps(r1.extra, sort_keys=True) != json.dumps(r2.extra, sort_keys=True):
            problems.append(f"{name} derived measurements differ")
    _criterion(
        7,
        "two identically-seeded runs of criteria 2-4 produce byte-identical checkpoints and reports",
        not problems,
        "; ".join(problems) or "all byte-identical",
    )


# ---------------------------------------------------------------------------
# criterion 8: gate ablation parity
# ---------------------------------------------------------------------------


def test_criterion_8_gate_ablation_parity():
    cfg_gated = DecoderConfig(h=7, w=7, f=32, d=16, vocab_size=len(VOCAB), t_max=37, gate_enabled=True)
    params = init_params(cfg_gated, np.random.default_rng(88))
    params.w_gate.data[...] = 0.0
    params.b_gate.data[...] = 0.0
    scene = generate_dataset(SceneSpec(), 1, VOCAB, seed=9)[0]
    sink = []
    forward_teacher_forced(scene.features, scene.target, params, context_sink=sink)
    worst = max(float(np.abs(fed.data - 0.5 * attended.data).max()) for attended, fed in sink)
    _criterion(
        8,
        "zero-weight gate: fed context = 0.5 x attended context at every step (<= 1e-9)",
        worst <= 1e-9 and len(sink) == 36,
        f"max deviation {worst:.2e} over {len(sink)} steps",
    )
