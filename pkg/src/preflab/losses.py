"""Preference losses as differentiable scalar graphs over token log-ratios.

Every loss consumes per-token log-ratios log(pi_theta / pi_ref), not
policies, so reference log-probabilities can be precomputed. Three
objectives are provided:

* dpo_loss: one Bradley-Terry comparison per pair on the total log-ratio;
* adpo_loss: one comparison per segment, summed outside the log-sigmoid,
  for any segmentation produced by the composition module;
* cadpo_loss: adpo_loss with per-token weights 1 - s_j applied to the
  rejected side before segment summation.

Batch reduction is the mean over pairs (in fixed pair order); per-pair
segment reduction is a plain sum with no length normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .composition import SegmentedPair
from .errors import ValidationError


@dataclass
class LossConfig:
    method: str = "dpo"
    family: str = "adaptive"
    k: int | None = None
    m: int | None = None
    beta: float = 1.0
    weighted: bool = False
    mask_padding: bool = True

    def validate(self) -> "LossConfig":
        if self.method not in ("dpo", "adpo"):
            raise ValidationError(f"loss.method must be dpo or adpo, got {self.method!r}")
        if self.beta <= 0:
            raise ValidationError(f"loss.beta must be positive, got {self.beta}")
        if self.method == "adpo":
            if self.family not in ("static", "adaptive"):
                raise ValidationError(
                    f"loss.family must be static or adaptive, got {self.family!r}"
                )
            if self.family == "static" and (self.k is None or self.k < 1):
                raise ValidationError("loss.k must be >= 1 for the static family")
            if self.family == "adaptive" and (self.m is None or self.m < 1):
                raise ValidationError("loss.m must be >= 1 for the adaptive family")
        return self

    def segment_param(self) -> int:
        return self.k if self.family == "static" else self.m


@dataclass
class PairLogRatios:
    """Token log-ratio vectors of one pair, beta-free, as graph nodes.

    Masks are True at real tokens; for the static family the vectors cover
    the padded grid and the mask marks the padding tail.
    """

    chosen: Node
    rejected: Node
    chosen_mask: np.ndarray
    rejected_mask: np.ndarray
    rejected_scores: np.ndarray | None = None


@dataclass
class LogRatioBatch:
    pairs: list[PairLogRatios]
    beta: float

    def validate(self) -> "LogRatioBatch":
        if self.beta <= 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        for i, pair in enumerate(self.pairs):
            if pair.chosen.value.shape != pair.chosen_mask.shape:
                raise ValidationError(
                    f"pair {i}: chosen mask shape {pair.chosen_mask.shape} "
                    f"!= log-ratio shape {pair.chosen.value.shape}"
                )
            if pair.rejected.value.shape != pair.rejected_mask.shape:
                raise ValidationError(
                    f"pair {i}: rejected mask shape {pair.rejected_mask.shape} "
                    f"!= log-ratio shape {pair.rejected.value.shape}"
                )
        return self


def segment_log_ratio(side_log_ratios: Node, segment: tuple[int, int], mask=None) -> Node:
    """Cumulative log-ratio of one segment: sum of its unmasked entries.

    An empty or fully masked-out segment sums to 0.
    """
    start, stop = segment
    return ad.segment_sum(side_log_ratios, start, stop, mask)


def _check_alignment(index: int, pair: PairLogRatios, seg: SegmentedPair) -> None:
    want_w = seg.w_mask.shape[0]
    want_l = seg.l_mask.shape[0]
    got_w = pair.chosen.value.shape[0]
    got_l = pair.rejected.value.shape[0]
    if got_w != want_w or got_l != want_l:
        raise ValidationError(
            f"pair {index}: segmentation expects lengths ({want_w}, {want_l}) "
            f"but log-ratio vectors have ({got_w}, {got_l})"
        )


def _rejected_weights(index: int, pair: PairLogRatios, scores) -> np.ndarray:
    """Per-position weights 1 - s_j on the rejected vector (padding kept at 1)."""
    if scores is None:
        raise ValidationError(f"pair {index}: weighted loss requires rejected scores")
    scores = np.asarray(scores, dtype=np.float64)
    true_len = int(np.sum(pair.rejected_mask))
    if scores.shape != (true_len,):
        raise ValidationError(
            f"pair {index}: got {scores.shape[0] if scores.ndim == 1 else scores.shape} "
            f"scores for {true_len} rejected tokens"
        )
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        bad = scores[(scores < 0.0) | (scores > 1.0)][0]
        raise ValidationError(f"pair {index}: score {bad} outside [0, 1]")
    weights = np.ones(pair.rejected.value.shape[0])
    weights[:true_len] = 1.0 - scores
    return weights


def _pair_loss(
    pair: PairLogRatios,
    w_bounds,
    l_bounds,
    beta: float,
    apply_mask: bool,
    l_weights: np.ndarray | None = None,
) -> Node:
    w_mask = pair.chosen_mask if apply_mask else None
    l_mask = pair.rejected_mask if apply_mask else None
    rejected = pair.rejected
    if l_weights is not None:
        rejected = ad.mul(rejected, l_weights)
    s_w = ad.segment_sums(pair.chosen, w_bounds, w_mask)
    s_l = ad.segment_sums(rejected, l_bounds, l_mask)
    logits = ad.mul(ad.sub(s_w, s_l), beta)
    return ad.neg(ad.sum(ad.log_sigmoid(logits)))


def dpo_loss(batch: LogRatioBatch, mask_padding: bool = True) -> Node:
    """Mean over pairs of -log sigmoid(beta * (total_w - total_l))."""
    batch.validate()
    losses = []
    for pair in batch.pairs:
        w_bounds = ((0, pair.chosen.value.shape[0]),)
        l_bounds = ((0, pair.rejected.value.shape[0]),)
        losses.append(_pair_loss(pair, w_bounds, l_bounds, batch.beta, mask_padding))
    return ad.mean_n(losses)


def adpo_pair_loss(
    pair: PairLogRatios,
    seg: SegmentedPair,
    beta: float,
    mask_padding: bool = True,
    l_weights: np.ndarray | None = None,
) -> Node:
    """Sum over kept segments of -log sigmoid(beta * (S_w(i) - S_l(i)))."""
    kept = seg.kept_segments(mask_padding)
    w_bounds = tuple(seg.w_bounds[i] for i in kept)
    l_bounds = tuple(seg.l_bounds[i] for i in kept)
    return _pair_loss(pair, w_bounds, l_bounds, beta, mask_padding, l_weights)


def adpo_loss(
    batch: LogRatioBatch, segmentation: list[SegmentedPair], mask_padding: bool = True
) -> Node:
    """Mean over pairs of the segment-wise comparison loss."""
    batch.validate()
    if len(segmentation) != len(batch.pairs):
        raise ValidationError(
            f"{len(segmentation)} segmentations for {len(batch.pairs)} pairs"
        )
    losses = []
    for i, (pair, seg) in enumerate(zip(batch.pairs, segmentation)):
        _check_alignment(i, pair, seg)
        losses.append(adpo_pair_loss(pair, seg, batch.beta, mask_padding))
    return ad.mean_n(losses)


def cadpo_loss(
    batch: LogRatioBatch,
    segmentation: list[SegmentedPair],
    rejected_scores: list | None = None,
    mask_padding: bool = True,
) -> Node:
    """adpo_loss with rejected log-ratios scaled by 1 - s_j per token.

    Scores come from ``rejected_scores`` when given, otherwise from each
    pair's own ``rejected_scores`` field. The chosen side is unweighted.
    """
    batch.validate()
    if len(segmentation) != len(batch.pairs):
        raise ValidationError(
            f"{len(segmentation)} segmentations for {len(batch.pairs)} pairs"
        )
    if rejected_scores is not None and len(rejected_scores) != len(batch.pairs):
        raise ValidationError(
            f"{len(rejected_scores)} score vectors for {len(batch.pairs)} pairs"
        )
    losses = []
    for i, (pair, seg) in enumerate(zip(batch.pairs, segmentation)):
        _check_alignment(i, pair, seg)
        scores = rejected_scores[i] if rejected_scores is not None else pair.rejected_scores
        weights = _rejected_weights(i, pair, scores)
        losses.append(adpo_pair_loss(pair, seg, batch.beta, mask_padding, weights))
    return ad.mean_n(losses)


def implicit_rewards(batch: LogRatioBatch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-position rewards beta * log-ratio, masked positions excluded.

    Returns one (chosen, rejected) array pair per batch pair; entries line
    up with the real (unpadded) tokens of each side.
    """
    batch.validate()
    out = []
    for pair in batch.pairs:
        chosen = batch.beta * pair.chosen.value[pair.chosen_mask]
        rejected = batch.beta * pair.rejected.value[pair.rejected_mask]
        out.append((chosen, rejected))
    return out


def batch_loss(
    batch: LogRatioBatch,
    segmentation: list[SegmentedPair] | None,
    cfg: LossConfig,
) -> Node:
    """Dispatch to the configured loss."""
    if cfg.weighted:
        if segmentation is None:
            raise ValidationError("weighted loss requires a segmentation")
        return cadpo_loss(batch, segmentation, mask_padding=cfg.mask_padding)
    if cfg.method == "dpo":
        return dpo_loss(batch, mask_padding=cfg.mask_padding)
    if segmentation is None:
        raise ValidationError("adpo loss requires a segmentation")
    return adpo_loss(batch, segmentation, mask_padding=cfg.mask_padding)
