"""Temporal IoU and top-1 mAP over tIoU thresholds."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .autodiff import ContractError
from .inference import DecodeConfig, Segment

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
_EXACT = tuple(Fraction(str(t)) for t in THRESHOLDS)


def _overlap(a: Segment, b: Segment) -> tuple[int, int]:
    inter = max(0, min(a.e, b.e) - max(a.s, b.s) + 1)
    union = a.length + b.length - inter
    return inter, union


def tiou(a: Segment, b: Segment) -> float:
    """Intersection over union of inclusive step ranges."""
    inter, union = _overlap(a, b)
    return inter / union


def tiou_exact(a: Segment, b: Segment) -> Fraction:
    inter, union = _overlap(a, b)
    return Fraction(inter, union)


@dataclass(frozen=True)
class EvalResult:
    """Fractions in [0, 1], one per threshold in :data:`THRESHOLDS`."""

    scores: tuple[float, ...]
    n: int

    @property
    def average(self) -> float:
        return sum(self.scores) / len(self.scores)

    def row(self, label: str | None = None) -> str:
        """Tab-separated percentages: thresholds then the average."""
        cells = [f"{100 * s:.1f}" for s in self.scores] + [f"{100 * self.average:.1f}"]
        return "\t".join(([label] if label is not None else []) + cells)

    @staticmethod
    def header(label: str | None = "method") -> str:
        cells = [str(t) for t in THRESHOLDS] + ["Average"]
        return "\t".join(([label] if label is not None else []) + cells)


def evaluate(preds: Sequence[Segment], gts: Sequence[Segment]) -> EvalResult:
    """Fraction of pairs whose single prediction reaches each tIoU threshold."""
    if len(preds) != len(gts):
        raise ContractError(f"evaluate: {len(preds)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ContractError("evaluate: no pairs")
    ious = [tiou_exact(p, g) for p, g in zip(preds, gts)]
    scores = tuple(sum(1 for v in ious if v >= t) / len(ious) for t in _EXACT)
    return EvalResult(scores=scores, n=len(ious))


def evaluate_by_class(
    preds: Sequence[Segment], gts: Sequence[Segment], classes: Sequence[str]
) -> dict[str, EvalResult]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, c in enumerate(classes):
        groups[c].append(i)
    return {c: evaluate([preds[i] for i in idx], [gts[i] for i in idx])
            for c, idx in sorted(groups.items())}


def legal_segments(r: int, cfg: DecodeConfig) -> list[Segment]:
    return [Segment(s, e) for s in range(1, r + 1)
            for e in range(s, min(r, s + cfg.max_len - 1) + 1)]


def chance_expectation(refs: Sequence[tuple[int, Segment]], cfg: DecodeConfig) -> EvalResult:
    """Expected scores of a uniformly random legal segment, by enumeration.

    ``refs`` holds (reference length, ground truth) per pair.
    """
    if not refs:
        raise ContractError("chance_expectation: no pairs")
    sums = [Fraction(0)] * len(_EXACT)
    for r, gt in refs:
        cands = legal_segments(r, cfg)
        ious = [tiou_exact(c, gt) for c in cands]
        for k, t in enumerate(_EXACT):
            sums[k] += Fraction(sum(1 for v in ious if v >= t), len(cands))
    return EvalResult(scores=tuple(float(s / len(refs)) for s in sums), n=len(refs))
