"""Attention-LSTM language decoder over spatial image features.

One step: score every spatial cell against the previous hidden state (scaled
dot product), softmax the scores into an attention map, rescale the projected
features with it and fold them into a single context vector, optionally gate
the context, concatenate with the previous word's embedding, run an LSTM cell
and emit word logits.  Generation repeats the step greedily to a fixed length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .features import FeatureMap
from .tensor import Tensor


class GateDisabled(RuntimeError):
    """input_gate called on a configuration without the gate."""


class StepOverflow(RuntimeError):
    """step called past the fixed sequence length."""


@dataclass(frozen=True)
class DecoderConfig:
    h: int
    w: int
    f: int
    d: int
    vocab_size: int
    t_max: int
    gate_enabled: bool = False

    @property
    def s(self) -> int:
        return self.h * self.w


# (name, shape) for every learned block, in fixed order.  The LSTM carries
# one fused weight of shape (3d, 4d): rows stack the input block (context ++
# embedding, 2d) over the recurrent block (hidden state, d); columns stack
# the input, forget, output and cell-candidate gates, each d wide, with the
# matching fused (4d,) bias.
def _param_shapes(cfg: DecoderConfig) -> list:
    d, f, v = cfg.d, cfg.f, cfg.vocab_size
    return [
        ("w_attn", (f, d)),
        ("embed", (v, d)),
        ("lstm_w", (3 * d, 4 * d)),
        ("lstm_b", (4 * d,)),
        ("w_out", (d, v)),
        ("b_out", (v,)),
        ("w_c0", (f, d)),
        ("b_c0", (d,)),
        ("w_h0", (f, d)),
        ("b_h0", (d,)),
        ("w_gate", (d, d)),
        ("b_gate", (d,)),
    ]


class DecoderParams:
    """All learned weights, addressable by name for the optimizer and IO."""

    def __init__(self, cfg: DecoderConfig, tensors: dict):
        self.cfg = cfg
        self._tensors = dict(tensors)
        for name, shape in _param_shapes(cfg):
            t = self._tensors.get(name)
            if t is None:
                raise KeyError(f"missing parameter {name}")
            if t.shape != shape:
                raise T.ShapeMismatch(f"parameter {name}: expected {shape}, got {t.shape}")
            if not np.isfinite(t.data).all():
                raise ValueError(f"parameter {name} contains non-finite values")
            setattr(self, name, t)

    @property
    def gate_enabled(self) -> bool:
        return self.cfg.gate_enabled

    def named(self) -> list:
        """(name, Tensor) pairs in fixed declaration order."""
        return [(name, self._tensors[name]) for name, _ in _param_shapes(self.cfg)]

    def zero_grads(self) -> None:
        for _, t in self.named():
            t.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named():
            t.requires_grad = flag

    def copy(self) -> "DecoderParams":
        tensors = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.named()}
        return DecoderParams(self.cfg, tensors)


def init_params(cfg: DecoderConfig, rng: np.random.Generator) -> DecoderParams:
    """Standard-Gaussian embeddings, Glorot-uniform weights, zero biases
    except a forget-gate bias of 1 (training stabilizer)."""
    d = cfg.d
    tensors = {}
    for name, shape in _param_shapes(cfg):
        if name == "embed":
            data = rng.standard_normal(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
            if name == "lstm_b":
                data[d : 2 * d] = 1.0  # forget-gate segment
        else:
            fan_in = shape[0]
            fan_out = d if name == "lstm_w" else shape[1]  # per-gate fan-out
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return DecoderParams(cfg, tensors)


@dataclass
class DecoderState:
    h: Tensor
    c_cell: Tensor
    t: int


@dataclass
class AttentionTrace:
    """Per-timestep attention distributions aligned with the emitted tokens.

    maps[k] is the attention used to produce emitted_ids[k] (the token at
    sequence position k + 1; position 0 is the forced SOS).
    """

    h: int
    w: int
    maps: list = field(default_factory=list)
    emitted_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.maps)


def project_features(x_map: FeatureMap, params: DecoderParams) -> Tensor:
    """(s, f) features -> (s, d) projection, no bias."""
    if x_map.f != params.cfg.f:
        raise T.ShapeMismatch(f"feature dim {x_map.f} != configured {params.cfg.f}")
    return T.matmul(Tensor(x_map.data), params.w_attn)


def attend(x_proj: Tensor, h_prev: Tensor, d: int) -> tuple:
    """Attention map and context vector for one timestep.

    Scores are the scaled dot product of each projected cell with the previous
    hidden state; the map rescales the cells row-wise and the context is the
    column sum of the rescaled cells, i.e. the attention-weighted feature sum.
    """
    scores = T.matmul(x_proj, h_prev)
    a_t = T.softmax_scaled(scores, math.sqrt(d))
    rescaled = T.mul(a_t, x_proj)
    context = T.reduce_sum(rescaled, axis=0)
    return a_t, context


def input_gate(h_prev: Tensor, params: DecoderParams) -> Tensor:
    """Sigmoid gate over the context vector, from the previous hidden state."""
    if not params.gate_enabled:
        raise GateDisabled("input_gate requires gate_enabled")
    return T.sigmoid(T.add(T.matmul(h_prev, params.w_gate), params.b_gate))


def init_state(x_map: FeatureMap, params: DecoderParams) -> DecoderState:
    """Initial hidden/cell states from two FC layers over the mean feature."""
    if x_map.f != params.cfg.f:
        raise T.ShapeMismatch(f"feature dim {x_map.f} != configured {params.cfg.f}")
    m = T.reduce_mean(Tensor(x_map.data), axis=0)
    c0 = T.add(T.matmul(m, params.w_c0), params.b_c0)
    h0 = T.add(T.matmul(m, params.w_h0), params.b_h0)
    return DecoderState(h=h0, c_cell=c0, t=0)


def _lstm_cell(z: Tensor, state: DecoderState, params: DecoderParams) -> DecoderState:
    d = params.cfg.d
    zh = T.concat(z, state.h)
    pre = T.add(T.matmul(zh, params.lstm_w), params.lstm_b)
    i = T.sigmoid(T.slice1d(pre, 0, d))
    f = T.sigmoid(T.slice1d(pre, d, 2 * d))
    o = T.sigmoid(T.slice1d(pre, 2 * d, 3 * d))
    g = T.tanh(T.slice1d(pre, 3 * d, 4 * d))
    c_new = T.add(T.mul(f, state.c_cell), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return DecoderState(h=h_new, c_cell=c_new, t=state.t + 1)


def step(
    state: DecoderState,
    x_proj: Tensor,
    prev_token_id: int,
    params: DecoderParams,
    context_sink: Optional[list] = None,
) -> tuple:
    """One decode step: returns (new state, logits, attention map).

    Logits are raw scores; softmax is left to the loss or the sampler.
    ``context_sink``, when given, collects (attended context, context as fed
    to the LSTM) pairs -- identical unless the gate rescales it -- for the
    gate-ablation checks.
    """
    cfg = params.cfg
    if state.t >= cfg.t_max:
        raise StepOverflow(f"step at t={state.t} with t_max={cfg.t_max}")
    if not 0 <= prev_token_id < cfg.vocab_size:
        raise T.IndexOutOfRange(f"token id {prev_token_id} outside vocabulary of {cfg.vocab_size}")
    a_t, attended = attend(x_proj, state.h, cfg.d)
    context = attended
    if cfg.gate_enabled:
        context = T.mul(input_gate(state.h, params), context)
    if context_sink is not None:
        context_sink.append((attended, context))
    e_prev = T.embed_lookup(params.embed, prev_token_id)
    z = T.concat(context, e_prev)
    new_state = _lstm_cell(z, state, params)
    logits = T.add(T.matmul(new_state.h, params.w_out), params.b_out)
    return new_state, logits, a_t


def decode_greedy(x_map: FeatureMap, params: DecoderParams, vocab) -> tuple:
    """Greedy generation: returns (TokenSequence, AttentionTrace).

    Always emits exactly t_max ids; after the first EOS the remaining
    positions are filled with NULL without running further steps, so the
    trace holds at most t_max - 1 maps.  The placeholder token is excluded
    from the argmax: a NULL before EOS can never form a valid sequence, so
    the sampler picks the best legal token instead.
    """
    cfg = params.cfg
    if (x_map.h, x_map.w, x_map.f) != (cfg.h, cfg.w, cfg.f):
        raise T.ShapeMismatch(
            f"feature map {x_map.h}x{x_map.w}x{x_map.f} != configured {cfg.h}x{cfg.w}x{cfg.f}"
        )
    x_proj = project_features(x_map, params)
    state = init_state(x_map, params)
    trace = AttentionTrace(h=cfg.h, w=cfg.w)
    ids = [vocab.sos_id]
    prev = vocab.sos_id
    for _ in range(cfg.t_max - 1):
        state, logits, a_t = step(state, x_proj, prev, params)
        scores = logits.data.copy()
        scores[vocab.null_id] = -np.inf
        token = int(np.argmax(scores))  # first maximum wins on ties
        ids.append(token)
        trace.maps.append(a_t.data.copy())
        trace.emitted_ids.append(token)
        prev = token
        if token == vocab.eos_id:
            break
    if ids[-1] != vocab.eos_id:
        # No EOS emitted within the budget: the last slot becomes EOS so the
        # sequence always satisfies the fixed-layout invariants.
        ids[-1] = vocab.eos_id
        trace.emitted_ids[-1] = vocab.eos_id
    ids.extend([vocab.null_id] * (cfg.t_max - len(ids)))
    return tuple(ids), trace


def forward_teacher_forced(
    x_map: FeatureMap,
    target: tuple,
    params: DecoderParams,
    context_sink: Optional[list] = None,
) -> tuple:
    """Unrolled pass with ground-truth inputs: returns (logits rows, trace).

    At timestep t the input token is target[t - 1] and the prediction target
    is target[t], so one logits row is produced for each of positions
    1 .. t_max - 1.  ``context_sink`` is forwarded to ``step``.
    """
    cfg = params.cfg
    if len(target) != cfg.t_max:
        raise T.ShapeMismatch(f"target length {len(target)} != t_max {cfg.t_max}")
    x_proj = project_features(x_map, params)
    state = init_state(x_map, params)
    trace = AttentionTrace(h=cfg.h, w=cfg.w)
    logits_rows = []
    for t in range(1, cfg.t_max):
        state, logits, a_t = step(state, x_proj, target[t - 1], params, context_sink=context_sink)
        logits_rows.append(logits)
        trace.maps.append(a_t.data.copy())
        trace.emitted_ids.append(int(target[t]))
    return logits_rows, trace
