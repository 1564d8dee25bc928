"""Synthetic scene generator: planted per-class channel signals plus noise.

Each reason class owns one feature channel and one side of the grid.  An
active class adds a constant amplitude to its channel over every cell of its
side band, on top of Gaussian noise, and the paired target sentence lists the
active reasons in canonical order.  The planted cell sets are kept so tests
can measure whether decoder attention actually lands on the evidence.

Randomness: Philox keyed through numpy's SeedSequence, split per scene index
(spawn_key), so scene i depends only on (spec, dataset seed, i) and datasets
are bit-reproducible and parallelizable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decoder import AttentionTrace
from .features import FeatureMap
from .tokenizer import CANONICAL_REASONS, CANONICAL_T_MAX, Vocabulary, encode

log = logging.getLogger(__name__)

N_CLASSES = len(CANONICAL_REASONS)


class InvalidSpec(ValueError):
    pass


class NoActiveReasons(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    h: int = 7
    w: int = 7
    f: int = 32
    signal_amplitude: float = 1.0
    noise_sigma: float = 0.1
    reason_prob: float = 0.35
    seed: int = 0
    # class index -> channel carrying its signal
    signal_channels: tuple = tuple(range(N_CLASSES))

    def __post_init__(self):
        if self.f < N_CLASSES:
            raise InvalidSpec(f"need at least {N_CLASSES} channels, got f={self.f}")
        if self.w < 3:
            raise InvalidSpec("w must be >= 3 so left and right bands are distinct")
        if self.h < 1:
            raise InvalidSpec("h must be positive")
        if not 0.0 < self.reason_prob < 1.0:
            raise InvalidSpec("reason_prob must lie strictly between 0 and 1")
        if len(self.signal_channels) != N_CLASSES:
            raise InvalidSpec(f"signal_channels must map all {N_CLASSES} classes")
        if any(not 0 <= c < self.f for c in self.signal_channels):
            raise InvalidSpec("signal channel outside feature range")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be nonnegative")

    def side_columns(self, class_index: int) -> range:
        """Column band for a class: the floor(w/2) leftmost columns for
        left-side classes (0-2), the mirrored rightmost for right-side (3-5);
        with odd w the middle column stays neutral."""
        half = self.w // 2
        if class_index < 3:
            return range(0, half)
        return range(self.w - half, self.w)

    def planted_cells(self, class_index: int) -> frozenset:
        cols = self.side_columns(class_index)
        return frozenset(r * self.w + c for r in range(self.h) for c in cols)


@dataclass
class SyntheticScene:
    features: FeatureMap
    annotation: frozenset  # active reason class indices
    target: tuple  # TokenSequence
    planted_masks: dict  # class index -> frozenset of flat cell indices


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def generate_scene(
    spec: SceneSpec,
    rng: np.random.Generator,
    vocab: Vocabulary,
    forced_reasons: Optional[Sequence[int]] = None,
) -> SyntheticScene:
    """One scene: per-class coin flips (draw order is fixed: six uniforms,
    then the full noise block), noise fill, then per-class signal bands."""
    if forced_reasons is None:
        flips = rng.uniform(size=N_CLASSES)
        active = frozenset(i for i in range(N_CLASSES) if flips[i] < spec.reason_prob)
    else:
        # Forced annotations still consume the flips so the noise stream
        # (and therefore the rest of the scene) is unchanged.
        rng.uniform(size=N_CLASSES)
        active = frozenset(int(i) for i in forced_reasons)
    grid = rng.normal(0.0, spec.noise_sigma, size=(spec.h, spec.w, spec.f))
    masks = {}
    for cls in sorted(active):
        cols = spec.side_columns(cls)
        grid[:, cols.start : cols.stop, spec.signal_channels[cls]] += spec.signal_amplitude
        masks[cls] = spec.planted_cells(cls)
    target = encode([CANONICAL_REASONS[i] for i in sorted(active)], vocab, CANONICAL_T_MAX)
    return SyntheticScene(
        features=FeatureMap.from_grid(grid),
        annotation=active,
        target=target,
        planted_masks=masks,
    )


def generate_dataset(spec: SceneSpec, n: int, vocab: Vocabulary, seed: Optional[int] = None) -> list:
    """n scenes from a seeded stream; scene i uses the (seed, i) split.

    ``seed`` defaults to the spec's own; train/test datasets must use
    disjoint seeds (the CLI enforces the convention by requiring them).
    """
    if n < 1:
        raise InvalidSpec(f"dataset size must be >= 1, got {n}")
    if seed is None:
        seed = spec.seed
    return [generate_scene(spec, _scene_rng(seed, i), vocab) for i in range(n)]


@dataclass
class AlignmentResult:
    # class index -> mean attention-mass ratio over the reason's word timesteps
    per_reason: dict = field(default_factory=dict)
    # active reasons whose phrase never appeared in the generated sentence
    missing: list = field(default_factory=list)

    def mean_ratio(self) -> float:
        if not self.per_reason:
            raise NoActiveReasons("no aligned reasons to average")
        return sum(self.per_reason.values()) / len(self.per_reason)


def _segment_spans(emitted_ids: Sequence[int], vocab: Vocabulary) -> list:
    """(phrase, [timestep indices of its words]) for each generated segment."""
    spans = []
    words: list = []
    steps: list = []
    stop = {vocab.eos_id, vocab.null_id}
    for k, token in enumerate(emitted_ids):
        if token in stop:
            break
        if token == vocab.delim_id:
            if words:
                spans.append((" ".join(words), steps))
            words, steps = [], []
            continue
        words.append(vocab.word_of(token))
        steps.append(k)
    if words:
        spans.append((" ".join(words), steps))
    return spans


def attention_alignment(
    trace: AttentionTrace,
    scene: SyntheticScene,
    vocab: Vocabulary,
) -> AlignmentResult:
    """How much attention mass lands on each active reason's planted cells.

    For every active reason whose phrase appears in the generated sentence,
    the ratio is the mean (over that segment's word timesteps) of the mass
    inside the planted mask divided by the mask's area fraction |mask| / s.
    Uniform maps therefore score exactly 1.0; above 1 means aligned.
    """
    if not scene.annotation:
        raise NoActiveReasons("scene has no active reasons")
    s = scene.features.s
    spans = _segment_spans(trace.emitted_ids, vocab)
    result = AlignmentResult()
    for cls in sorted(scene.annotation):
        phrase = CANONICAL_REASONS[cls]
        mask = sorted(scene.planted_masks[cls])
        area_fraction = len(mask) / s
        matching = [steps for seg, steps in spans if seg == phrase]
        if not matching:
            log.debug("attention_alignment: reason %d not present in generation", cls)
            result.missing.append(cls)
            continue
        steps = matching[0]
        mass = float(np.mean([trace.maps[k][mask].sum() for k in steps]))
        result.per_reason[cls] = mass / area_fraction
    return result
