"""Caption scoring: BLEU, reason extraction, action rule and F1 variants."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .tokenizer import CANONICAL_REASONS, EOS, NULL, SOS, Vocabulary, body_words, split_reasons

log = logging.getLogger(__name__)

_BLEU_STRIP = {SOS, EOS, NULL}


class EmptyReference(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ActionSet:
    cannot_turn_left: bool
    cannot_turn_right: bool


@dataclass
class MetricsReport:
    avg_bleu: float
    reasons_f1_all: float
    reasons_mf1: float
    actions_f1_all: float
    actions_mf1: float
    reasons_per_class_f1: list
    actions_per_class_f1: list
    n_examples: int

    def headline(self) -> dict:
        return {
            "avg_bleu": self.avg_bleu,
            "reasons_f1_all": self.reasons_f1_all,
            "reasons_mf1": self.reasons_mf1,
            "actions_f1_all": self.actions_f1_all,
            "actions_mf1": self.actions_mf1,
        }

    def to_dict(self) -> dict:
        out = dict(self.headline())
        out["reasons_per_class_f1"] = self.reasons_per_class_f1
        out["actions_per_class_f1"] = self.actions_per_class_f1
        out["n_examples"] = self.n_examples
        return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Cumulative BLEU up to 4-grams with brevity penalty.

    Modified (clipped) n-gram precisions, geometric mean with uniform weights
    over the orders actually usable (min(4, hypothesis length)); when a
    clipped count is zero at order n >= 2, numerator and denominator each get
    +1 so short near-misses keep a nonzero score.  SOS/EOS/NULL markers are
    stripped; delimiter tokens count as ordinary tokens.
    """
    hyp = [t for t in hypothesis if t not in _BLEU_STRIP]
    ref = [t for t in reference if t not in _BLEU_STRIP]
    if not ref:
        raise EmptyReference("reference sentence has no tokens")
    if not hyp:
        return 0.0
    max_order = min(4, len(hyp))
    log_sum = 0.0
    for n in range(1, max_order + 1):
        hyp_counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        clipped = sum(min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items())
        total = sum(hyp_counts.values())
        if clipped == 0 and n >= 2:
            clipped, total = clipped + 1, total + 1
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    precision_mean = math.exp(log_sum / max_order)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * precision_mean


def extract_reason_set(seq: Sequence[int], vocab: Vocabulary) -> frozenset:
    """Class indices whose canonical phrase appears verbatim as a segment.

    Segments that match no canonical phrase are ignored here (they still
    penalize BLEU); matching is exact after whitespace normalization.
    """
    found = set()
    for segment in split_reasons(seq, vocab):
        normalized = " ".join(segment.split())
        for idx, canonical in enumerate(CANONICAL_REASONS):
            if normalized == canonical:
                found.add(idx)
    return frozenset(found)


def derive_actions(reasons: Iterable[int]) -> ActionSet:
    """Left-side reasons (0-2) block a left turn, right-side (3-5) a right turn."""
    reasons = frozenset(reasons)
    if any(r not in range(6) for r in reasons):
        raise ValueError(f"reason indices must be in 0..5, got {sorted(reasons)}")
    return ActionSet(
        cannot_turn_left=bool(reasons & {0, 1, 2}),
        cannot_turn_right=bool(reasons & {3, 4, 5}),
    )


def _as_indicator_pairs(predictions, labels) -> tuple:
    """Normalize ReasonSet/ActionSet pairs to aligned binary index sets + class count."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise EmptyInput("no examples to score")

    def to_set(v):
        if isinstance(v, ActionSet):
            return frozenset(i for i, flag in enumerate((v.cannot_turn_left, v.cannot_turn_right)) if flag)
        return frozenset(v)

    preds = [to_set(p) for p in predictions]
    labs = [to_set(l) for l in labels]
    any_action = any(isinstance(v, ActionSet) for v in list(predictions) + list(labels))
    n_classes = 2 if any_action else 6
    for v in preds + labs:
        if any(i >= n_classes for i in v):
            raise ValueError(f"class index out of range for {n_classes} classes: {sorted(v)}")
    return preds, labs, n_classes


def f1_all(predictions: Sequence, labels: Sequence) -> float:
    """Samples-averaged F1: per-example F1 over the binary label vector,
    averaged over examples.  Empty prediction matching empty label counts
    as a correct example (F1 = 1)."""
    preds, labs, _ = _as_indicator_pairs(predictions, labels)
    total = 0.0
    for p, l in zip(preds, labs):
        if not p and not l:
            log.debug("f1_all: empty prediction matches empty label, scoring 1.0")
            total += 1.0
            continue
        tp = len(p & l)
        fp = len(p - l)
        fn = len(l - p)
        total += 2.0 * tp / (2.0 * tp + fp + fn)
    return total / len(preds)


def micro_f1(predictions: Sequence, labels: Sequence) -> float:
    """Micro-averaged alternative: one confusion pool over all (example, class)
    pairs.  Provided for comparison with the samples average."""
    preds, labs, _ = _as_indicator_pairs(predictions, labels)
    tp = fp = fn = 0
    for p, l in zip(preds, labs):
        tp += len(p & l)
        fp += len(p - l)
        fn += len(l - p)
    if tp + fp + fn == 0:
        log.debug("micro_f1: no positives anywhere, scoring 1.0")
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def mf1(predictions: Sequence, labels: Sequence) -> tuple:
    """Macro (in-class mean) F1: per-class F1 over pooled confusion counts,
    averaged over classes.  Returns (mean, per-class list).  A class with no
    positives in either predictions or labels scores 1 by convention."""
    preds, labs, n_classes = _as_indicator_pairs(predictions, labels)
    per_class = []
    for c in range(n_classes):
        tp = fp = fn = 0
        for p, l in zip(preds, labs):
            hit_p, hit_l = c in p, c in l
            tp += hit_p and hit_l
            fp += hit_p and not hit_l
            fn += hit_l and not hit_p
        if tp + fp + fn == 0:
            log.debug("mf1: class %d absent from predictions and labels, scoring 1.0", c)
            per_class.append(1.0)
        else:
            per_class.append(2.0 * tp / (2.0 * tp + fp + fn))
    return sum(per_class) / n_classes, per_class


def evaluate_dataset(params, dataset: Sequence, vocab: Vocabulary) -> MetricsReport:
    """Greedy-decode every (FeatureMap, TokenSequence) pair and score it.

    Per-image BLEU is averaged over examples; reason sets come from exact
    segment matching and action sets from the fixed derivation rule.
    """
    from .decoder import decode_greedy

    if not dataset:
        raise EmptyInput("evaluate_dataset requires a nonempty dataset")
    bleu_sum = 0.0
    pred_reasons = []
    true_reasons = []
    for x_map, target in dataset:
        generated, _ = decode_greedy(x_map, params, vocab)
        hyp = body_words(generated, vocab)
        ref = body_words(target, vocab)
        if ref:
            bleu_sum += bleu(hyp, ref)
        else:
            # Empty reference (no-reason scene): mirror the empty-empty F1
            # convention instead of raising out of the batch loop.
            bleu_sum += 1.0 if not hyp else 0.0
        pred_reasons.append(extract_reason_set(generated, vocab))
        true_reasons.append(extract_reason_set(target, vocab))
    pred_actions = [derive_actions(r) for r in pred_reasons]
    true_actions = [derive_actions(r) for r in true_reasons]
    reasons_mean, reasons_pc = mf1(pred_reasons, true_reasons)
    actions_mean, actions_pc = mf1(pred_actions, true_actions)
    return MetricsReport(
        avg_bleu=bleu_sum / len(dataset),
        reasons_f1_all=f1_all(pred_reasons, true_reasons),
        reasons_mf1=reasons_mean,
        actions_f1_all=f1_all(pred_actions, true_actions),
        actions_mf1=actions_mean,
        reasons_per_class_f1=reasons_pc,
        actions_per_class_f1=actions_pc,
        n_examples=len(dataset),
    )
