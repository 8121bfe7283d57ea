"""Desk-scale preference-optimization laboratory.

Pairwise preference losses (response-level, segment-level, and
token-weighted) over tiny autoregressive policies, built on a from-scratch
reverse-mode autodiff core, with brute-force oracles that certify the
underlying theory on enumerable token spaces.
"""

from .composition import StrongComposition, segment_pair, xi_adaptive, xi_static
from .data import BigramMatchTask, PreferencePair, generate_dataset, load_jsonl, save_jsonl
from .lm import (
    NeuralPolicy,
    NGramPolicy,
    Vocab,
    clone_frozen,
    load_checkpoint,
    save_checkpoint,
    seq_logprob,
    token_logprobs,
)
from .losses import (
    LogRatioBatch,
    LossConfig,
    PairLogRatios,
    adpo_loss,
    cadpo_loss,
    dpo_loss,
    implicit_rewards,
    segment_log_ratio,
)
from .oracle import (
    EnumSpace,
    additive_decompose,
    boltzmann_distribution,
    kl_objective,
    reparameterize,
)
from .trainer import TrainConfig, eval_pairs, prefix_reward_profile, train

__version__ = "0.1.0"

__all__ = [
    "BigramMatchTask",
    "EnumSpace",
    "LogRatioBatch",
    "LossConfig",
    "NGramPolicy",
    "NeuralPolicy",
    "PairLogRatios",
    "PreferencePair",
    "StrongComposition",
    "TrainConfig",
    "Vocab",
    "additive_decompose",
    "adpo_loss",
    "boltzmann_distribution",
    "cadpo_loss",
    "clone_frozen",
    "dpo_loss",
    "eval_pairs",
    "generate_dataset",
    "implicit_rewards",
    "kl_objective",
    "load_checkpoint",
    "load_jsonl",
    "prefix_reward_profile",
    "reparameterize",
    "save_checkpoint",
    "save_jsonl",
    "segment_log_ratio",
    "segment_pair",
    "seq_logprob",
    "token_logprobs",
    "train",
    "xi_adaptive",
    "xi_static",
]
