"""Attention-LSTM scene captioner: generates driving-scene reasons word by
word with per-word spatial attention maps, derives infeasible actions from
the reasons by rule, and scores itself with BLEU and two F1 variants."""

from .decoder import (
    AttentionTrace,
    DecoderConfig,
    DecoderParams,
    DecoderState,
    decode_greedy,
    forward_teacher_forced,
    init_params,
)
from .evaluation import (
    ActionSet,
    MetricsReport,
    bleu,
    derive_actions,
    evaluate_dataset,
    extract_reason_set,
    f1_all,
    mf1,
)
from .features import FeatureMap
from .scenes import SceneSpec, SyntheticScene, attention_alignment, generate_dataset, generate_scene
from .tokenizer import (
    CANONICAL_REASONS,
    CANONICAL_T_MAX,
    Vocabulary,
    build_vocab,
    canonical_vocab,
    decode,
    encode,
    split_reasons,
)
from .training import TrainConfig, TrainReport, fit, temporal_cross_entropy

__version__ = "0.1.0"
