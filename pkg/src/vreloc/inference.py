"""Segment decoding from per-step probabilities.

The score of a candidate (s, e) is

    p_start[s] * p_end[e] * geometric_mean(p_inside[s..e])

and the decoder returns the best candidate no longer than ``max_len`` steps.
Indices in :class:`Segment` are 1-based and inclusive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

# Candidates whose log-scores differ by less than this are treated as tied and
# resolved by position (smaller s, then smaller e).
TIE_TOL = 1e-12

BRUTE_FORCE_LIMIT = 10000


@dataclass(frozen=True, order=True)
class Segment:
    s: int
    e: int

    def __post_init__(self):
        if self.s < 1 or self.e < self.s:
            raise ContractError(f"invalid segment [{self.s}, {self.e}]")

    @property
    def length(self) -> int:
        return self.e - self.s + 1

    def check_within(self, r: int) -> None:
        if self.e > r:
            raise ContractError(f"segment [{self.s}, {self.e}] exceeds timeline of length {r}")


@dataclass(frozen=True)
class DecodeConfig:
    # 1024 frames / (16 frames per feature x temporal downsampling by 2)
    max_len: int = 32

    def __post_init__(self):
        if self.max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {self.max_len}")


def _check_probs(probs: np.ndarray) -> np.ndarray:
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != 4:
        raise ContractError(f"expected a 4 x r probability table, got shape {P.shape}")
    if P.shape[1] == 0:
        raise ContractError("empty probability table (r = 0)")
    if np.any(P[:3] <= 0):
        raise ContractError("start/end/inside probabilities must be positive")
    return P


def decode(probs: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> tuple[Segment, float]:
    """Best segment and its log-score, in O(r * max_len)."""
    P = _check_probs(probs)
    r = P.shape[1]
    log_s, log_e, log_i = np.log(P[0]), np.log(P[1]), np.log(P[2])
    prefix = np.concatenate([[0.0], np.cumsum(log_i)])

    best, best_score = (1, 1), -math.inf
    for s in range(r):
        e = np.arange(s, min(r, s + cfg.max_len))
        n = e - s + 1
        scores = log_s[s] + log_e[e] + (prefix[e + 1] - prefix[s]) / n
        # first candidate (smallest e) that beats the running best by more than TIE_TOL
        for j in np.flatnonzero(scores > best_score + TIE_TOL):
            if scores[j] > best_score + TIE_TOL:
                best, best_score = (s + 1, int(e[j]) + 1), float(scores[j])
    return Segment(*best), best_score


def brute_force_decode(probs: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> tuple[Segment, float]:
    """Exhaustive reference for :func:`decode`; evaluates the product form directly."""
    P = _check_probs(probs)
    r = P.shape[1]
    if r > BRUTE_FORCE_LIMIT:
        raise ContractError(f"brute_force_decode: r={r} exceeds guard {BRUTE_FORCE_LIMIT}")
    best, best_score = None, -math.inf
    for s in range(1, r + 1):
        for e in range(s, r + 1):
            if e - s + 1 > cfg.max_len:
                break
            inside = P[2, s - 1:e]
            geo = math.prod(float(x) for x in inside) ** (1.0 / len(inside))
            joint = float(P[0, s - 1]) * float(P[1, e - 1]) * geo
            score = math.log(joint) if joint > 0 else -math.inf
            if best is None or score > best_score + TIE_TOL:
                best, best_score = (s, e), score
    return Segment(*best), best_score
