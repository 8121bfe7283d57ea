"""Strong-composition segmentation of paired responses.

A strong composition splits the positions 1..n of a (possibly padded)
sequence into ordered contiguous segments. Two families are provided:

* static: a fixed window of ``k`` tokens on a shared padded grid, so both
  sides of a pair are cut at the same absolute positions, with padding
  positions marked in a mask;
* adaptive: each side is split into exactly ``m`` near-equal segments of
  its own length, with no padding (segments may be empty when the side is
  shorter than ``m``).

Pure functions throughout; safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class StrongComposition:
    """Ordered segment sizes that sum to the decomposed length."""

    parts: tuple[int, ...]

    def __post_init__(self):
        if any(p < 0 for p in self.parts):
            raise ValidationError(f"negative segment size in {self.parts}")

    @property
    def total(self) -> int:
        return sum(self.parts)

    def bounds(self) -> tuple[tuple[int, int], ...]:
        """Half-open [start, stop) ranges of each segment, 0-based."""
        out = []
        start = 0
        for p in self.parts:
            out.append((start, start + p))
            start += p
        return tuple(out)


def xi_static(
    len_w: int, len_l: int, k: int
) -> tuple[StrongComposition, StrongComposition, tuple[np.ndarray, np.ndarray]]:
    """Fixed-window segmentation on the padded grid shared by both sides.

    Both sides are padded to T = max(len_w, len_l) and cut into ceil(T/k)
    windows of size min(k, remaining). The returned masks mark positions
    beyond each side's true length as padding.
    """
    if k < 1:
        raise ValidationError(f"static window size must be >= 1, got {k}")
    if len_w < 1 or len_l < 1:
        raise ValidationError(
            f"both sides must be non-empty, got lengths ({len_w}, {len_l})"
        )
    padded = max(len_w, len_l)
    n_segments = -(-padded // k)
    parts = tuple(min(k, padded - k * i) for i in range(n_segments))
    comp = StrongComposition(parts)
    mask_w = np.arange(padded) < len_w
    mask_l = np.arange(padded) < len_l
    return comp, comp, (mask_w, mask_l)


def xi_adaptive(length: int, m: int) -> StrongComposition:
    """Split ``length`` positions into exactly ``m`` near-uniform segments.

    Segment sizes are floor(i*length/m) - floor((i-1)*length/m), so each is
    either floor(length/m) or ceil(length/m); sizes may be 0 when
    length < m.
    """
    if m < 1:
        raise ValidationError(f"adaptive segment count must be >= 1, got {m}")
    if length < 0:
        raise ValidationError(f"length must be >= 0, got {length}")
    parts = tuple(length * (i + 1) // m - length * i // m for i in range(m))
    return StrongComposition(parts)


@dataclass(frozen=True)
class SegmentedPair:
    """Aligned segmentation of one preference pair.

    Segment i of the chosen side is compared against segment i of the
    rejected side. Bounds index into each side's (padded, for the static
    family) token-logprob vector; masks are True at real tokens and False
    at padding.
    """

    family: str
    param: int
    n_segments: int
    w_bounds: tuple[tuple[int, int], ...]
    l_bounds: tuple[tuple[int, int], ...]
    w_mask: np.ndarray
    l_mask: np.ndarray
    padded_len: int | None

    def scored_sizes(self, side: str, apply_mask: bool) -> np.ndarray:
        """Number of positions each segment contributes on one side."""
        bounds = self.w_bounds if side == "w" else self.l_bounds
        mask = self.w_mask if side == "w" else self.l_mask
        starts = np.fromiter((b[0] for b in bounds), dtype=np.intp, count=len(bounds))
        stops = np.fromiter((b[1] for b in bounds), dtype=np.intp, count=len(bounds))
        if not apply_mask:
            return stops - starts
        running = np.concatenate(([0], np.cumsum(mask.astype(np.intp))))
        return running[stops] - running[starts]

    def kept_segments(self, apply_mask: bool) -> tuple[int, ...]:
        """Indices of segments with scored content on at least one side.

        A segment empty (or fully padded) on both sides would contribute a
        constant with zero gradient, so it is skipped. Memoized; the
        segmentation is immutable.
        """
        cache = getattr(self, "_kept_cache", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_kept_cache", cache)
        if apply_mask not in cache:
            live = (self.scored_sizes("w", apply_mask) > 0) | (
                self.scored_sizes("l", apply_mask) > 0
            )
            cache[apply_mask] = tuple(int(i) for i in np.nonzero(live)[0])
        return cache[apply_mask]


def segment_pair(lengths: tuple[int, int], family: str, param: int) -> SegmentedPair:
    """Segment both sides of a pair by one composition family.

    ``lengths`` are the true token counts of the chosen and rejected
    responses (their token-logprob vector lengths before any padding).
    """
    len_w, len_l = lengths
    if family == "static":
        comp, _, (mask_w, mask_l) = xi_static(len_w, len_l, param)
        bounds = comp.bounds()
        return SegmentedPair(
            family="static",
            param=param,
            n_segments=len(bounds),
            w_bounds=bounds,
            l_bounds=bounds,
            w_mask=mask_w,
            l_mask=mask_l,
            padded_len=comp.total,
        )
    if family == "adaptive":
        if len_w < 1 or len_l < 1:
            raise ValidationError(
                f"both sides must be non-empty, got lengths ({len_w}, {len_l})"
            )
        comp_w = xi_adaptive(len_w, param)
        comp_l = xi_adaptive(len_l, param)
        return SegmentedPair(
            family="adaptive",
            param=param,
            n_segments=param,
            w_bounds=comp_w.bounds(),
            l_bounds=comp_l.bounds(),
            w_mask=np.ones(len_w, dtype=bool),
            l_mask=np.ones(len_l, dtype=bool),
            padded_len=None,
        )
    raise ValidationError(f"unknown composition family {family!r}")


def pad_tokens(tokens, padded_len: int, pad_id: int) -> tuple[int, ...]:
    """Right-pad a token sequence to ``padded_len`` with the PAD id."""
    tokens = tuple(tokens)
    if len(tokens) > padded_len:
        raise ValidationError(
            f"sequence of length {len(tokens)} longer than padded length {padded_len}"
        )
    return tokens + (pad_id,) * (padded_len - len(tokens))
