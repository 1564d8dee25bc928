"""Temporal cross-entropy loss, optimizers and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, DecoderParams, forward_teacher_forced, init_params
from .tensor import Tape, Tensor, backward


class EmptyDataset(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


MASK_MODES = ("none", "after_eos")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    h: int = 7
    w: int = 7
    f: int = 32
    d: int = 64
    t_max: int = 37
    gate_enabled: bool = False
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: Optional[float] = None  # max global grad norm, None = no clipping
    loss_mask: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "h", "w", "f", "d", "t_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.loss_mask not in MASK_MODES:
            raise ValueError(f"loss_mask must be one of {MASK_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(
            h=self.h, w=self.w, f=self.f, d=self.d,
            vocab_size=vocab_size, t_max=self.t_max, gate_enabled=self.gate_enabled,
        )


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_token_accuracy: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint_id: Optional[str] = None

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "epoch_loss": self.epoch_loss,
            "epoch_token_accuracy": self.epoch_token_accuracy,
            "checkpoint_id": self.checkpoint_id,
        }
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return out


def included_positions(target: Sequence[int], eos_id: int, mask_mode: str) -> list:
    """Prediction positions 1..T-1 that count toward the loss.

    mode "none" keeps every position (placeholders are predicted classes);
    "after_eos" keeps positions up to and including the first EOS.
    """
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    positions = list(range(1, len(target)))
    if mask_mode == "none":
        return positions
    kept = []
    for t in positions:
        kept.append(t)
        if target[t] == eos_id:
            break
    return kept


def sequence_cross_entropy(
    logits_rows: Sequence[Tensor],
    target: Sequence[int],
    eos_id: int,
    mask_mode: str = "none",
) -> Tensor:
    """Sum over included positions of -log p(target | logits) for one example.

    logits_rows[k] scores position k + 1 of the target sequence.
    """
    if len(logits_rows) != len(target) - 1:
        raise T.ShapeMismatch(
            f"{len(logits_rows)} logits rows for target of length {len(target)}"
        )
    total: Optional[Tensor] = None
    for t in included_positions(target, eos_id, mask_mode):
        ce = T.cross_entropy_logits(logits_rows[t - 1], target[t])
        total = ce if total is None else T.add(total, ce)
    if total is None:
        return Tensor(np.asarray(0.0))
    return total


def temporal_cross_entropy(
    batch_logits: Sequence[Sequence[Tensor]],
    batch_targets: Sequence[Sequence[int]],
    eos_id: int,
    mask_mode: str = "none",
) -> Tensor:
    """Batch loss: (1/N) * sum over examples of the per-position sums."""
    if len(batch_logits) != len(batch_targets):
        raise T.ShapeMismatch("batch logits/targets length mismatch")
    if not batch_logits:
        raise EmptyDataset("empty batch")
    n = len(batch_logits)
    total: Optional[Tensor] = None
    for rows, target in zip(batch_logits, batch_targets):
        per = sequence_cross_entropy(rows, target, eos_id, mask_mode)
        total = per if total is None else T.add(total, per)
    return T.mul_scalar(total, 1.0 / n)


class Optimizer:
    """Plain gradient descent or the adaptive-moment method, over named params.

    Update order follows the fixed parameter declaration order, so training is
    bit-reproducible.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: DecoderParams) -> None:
        cfg = self.config
        named = params.named()
        for name, t in named:
            if t.grad is None:
                raise MissingGradient(f"no gradient for parameter {name}")
        if cfg.grad_clip is not None:
            norm = float(np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in named)))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                for _, t in named:
                    t.grad = t.grad * scale
        self.step_count += 1
        k = self.step_count
        for name, t in named:
            g = t.grad
            if cfg.optimizer == "sgd":
                t.data -= cfg.learning_rate * g
                continue
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - cfg.beta1 ** k)
            v_hat = v / (1.0 - cfg.beta2 ** k)
            t.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def optimizer_step(params: DecoderParams, optimizer: Optimizer) -> None:
    """Apply one update from the gradients currently on ``params``."""
    optimizer.step(params)


def _check_dims(dataset: Sequence, config: TrainConfig) -> None:
    for x_map, target in dataset:
        if (x_map.h, x_map.w, x_map.f) != (config.h, config.w, config.f):
            raise DimMismatch(
                f"feature map {x_map.h}x{x_map.w}x{x_map.f} != configured "
                f"{config.h}x{config.w}x{config.f}"
            )
        if len(target) != config.t_max:
            raise DimMismatch(f"target length {len(target)} != t_max {config.t_max}")


def fit(
    dataset: Sequence,
    config: TrainConfig,
    vocab,
    init: Optional[DecoderParams] = None,
    checkpoint_hook: Optional[Callable[[DecoderParams], str]] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> tuple:
    """Train on (FeatureMap, TokenSequence) pairs; returns (params, report).

    Teacher forcing throughout; examples are shuffled each epoch with the
    seeded RNG; gradients are averaged over each mini-batch (the last batch
    may be smaller) and accumulated in example order for determinism.
    """
    if not dataset:
        raise EmptyDataset("fit requires at least one example")
    _check_dims(dataset, config)
    started = time.perf_counter()
    dec_cfg = config.decoder_config(len(vocab))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    params = init if init is not None else init_params(dec_cfg, rng)
    params.set_requires_grad(True)
    optimizer = Optimizer(config)
    report = TrainReport()
    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        token_hits = 0
        token_total = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            params.zero_grads()
            inv = 1.0 / len(batch)
            for idx in batch:
                x_map, target = dataset[idx]
                with Tape() as tape:
                    logits_rows, _ = forward_teacher_forced(x_map, target, params)
                    per = sequence_cross_entropy(logits_rows, target, vocab.eos_id, config.loss_mask)
                    scaled = T.mul_scalar(per, inv)
                backward(tape, scaled)
                loss_sum += per.item()
                for t_pos in included_positions(target, vocab.eos_id, config.loss_mask):
                    token_total += 1
                    if int(np.argmax(logits_rows[t_pos - 1].data)) == target[t_pos]:
                        token_hits += 1
            for _, t in params.named():
                if t.grad is None:  # outside the active architecture (gate off)
                    t.grad = np.zeros(t.shape)
            optimizer.step(params)
        report.epoch_loss.append(loss_sum / n)
        report.epoch_token_accuracy.append(token_hits / token_total if token_total else 1.0)
        if log_fn is not None:
            log_fn(
                f"epoch {epoch + 1}/{config.epochs} "
                f"loss {report.epoch_loss[-1]:.6f} acc {report.epoch_token_accuracy[-1]:.4f}"
            )
    params.set_requires_grad(False)
    params.zero_grads()
    report.wall_clock_seconds = time.perf_counter() - started
    if checkpoint_hook is not None:
        report.checkpoint_id = checkpoint_hook(params)
    return params, report
