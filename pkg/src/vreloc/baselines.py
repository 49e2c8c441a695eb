"""Comparison methods: random segments, frame-level path search, and a
triplet-trained LSTM embedding with exhaustive segment search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import DatasetSplits, EpisodeRecord
from .inference import DecodeConfig, Segment
from .layers import LstmParams, lstm_step, zero_state
from .metrics import legal_segments, tiou
from .training import AdamState, adam_step, clip_global_norm, random_pairing

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


# --------------------------------------------------------------------------
# chance
# --------------------------------------------------------------------------


def chance_baseline(r: int, cfg: DecodeConfig, rng: np.random.Generator) -> Segment:
    """A legal segment drawn uniformly at random."""
    if r < 1:
        raise ContractError("chance_baseline: r must be >= 1")
    per_start = np.minimum(cfg.max_len, r - np.arange(r))
    cum = np.cumsum(per_start)
    k = int(rng.integers(cum[-1]))
    s = int(np.searchsorted(cum, k, side="right"))
    offset = k - (cum[s - 1] if s else 0)
    return Segment(s + 1, s + 1 + int(offset))


# --------------------------------------------------------------------------
# frame level
# --------------------------------------------------------------------------


def unit_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=0)
    return x / np.where(n > 0, n, 1.0)


def distance_table(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Euclidean distances between unit-normalized columns, shape (q, r)."""
    Q, R = unit_columns(query), unit_columns(ref)
    sq = (Q * Q).sum(0)[:, None] + (R * R).sum(0)[None, :] - 2.0 * Q.T @ R
    return np.sqrt(np.clip(sq, 0.0, None))


def frame_level_baseline(query: np.ndarray, ref: np.ndarray, cfg: DecodeConfig = DecodeConfig()
                         ) -> tuple[Segment, float]:
    """Minimum mean-cost warping path through the distance table.

    A path starts on the first query row at some reference column, ends on
    the last query row, and moves diagonally, horizontally or vertically.  Its
    reference-column span (at most ``cfg.max_len``) is the prediction.
    Returns the segment and the path's mean distance.
    """
    D = distance_table(query, ref)
    q, r = D.shape
    if q < 1 or r < 1:
        raise ContractError("frame_level_baseline: empty sequence")
    best: tuple[float, int, int] | None = None   # (mean, start, end), 0-based
    for j0 in range(r):
        W = min(cfg.max_len, r - j0)
        sub = D[:, j0:j0 + W]
        # C[i, j]: cheapest total over paths of the current length ending at (i, j)
        C = np.full((q, W), np.inf)
        C[0, 0] = sub[0, 0]
        for n in range(1, q + W):
            if n > 1:
                prev = C
                C = np.full((q, W), np.inf)
                C[1:, 1:] = prev[:-1, :-1]
                np.minimum(C[:, 1:], prev[:, :-1], out=C[:, 1:])
                np.minimum(C[1:, :], prev[:-1, :], out=C[1:, :])
                C += sub
            last = C[q - 1] / n
            j = int(np.argmin(last))
            m = float(last[j])
            if not math.isfinite(m):
                continue
            cand = (m, j0, j0 + j)
            if best is None or m < best[0] - TIE_TOL or (
                    abs(m - best[0]) <= TIE_TOL and cand[1:] < best[1:]):
                best = cand
    assert best is not None
    return Segment(best[1] + 1, best[2] + 1), best[0]


# --------------------------------------------------------------------------
# video level
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoConfig:
    l: int = 32
    margin: float = 0.2
    epochs: int = 10
    learning_rate: float = 0.001
    clip: float = 5.0
    stride: int = 1
    pos_tiou: float = 0.8
    neg_tiou: float = 0.2
    seed: int = 0


def encode(enc: LstmParams, seq) -> Tensor:
    """L2-normalized last hidden state of the encoder over ``seq`` (d x T)."""
    X = np.asarray(seq.data if isinstance(seq, Tensor) else seq, dtype=np.float64)
    state = zero_state(enc)
    for t in range(X.shape[1]):
        state = lstm_step(enc, Tensor(X[:, t]), state)
    return ad.l2_normalize(state[0])


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """max(0, |a - p|^2 - |a - n|^2 + margin)."""
    dp = ad.sub(anchor, positive)
    dn = ad.sub(anchor, negative)
    gap = ad.sub(ad.total(ad.mul(dp, dp)), ad.total(ad.mul(dn, dn)))
    return ad.relu(ad.add(gap, Tensor(np.array([margin]))))


def sample_triplet_segments(r: int, gt: Segment, dcfg: DecodeConfig, vcfg: VideoConfig,
                            rng: np.random.Generator) -> tuple[Segment, Segment] | None:
    cands = legal_segments(r, dcfg)
    ious = [tiou(c, gt) for c in cands]
    pos = [c for c, v in zip(cands, ious) if v > vcfg.pos_tiou]
    neg = [c for c, v in zip(cands, ious) if v < vcfg.neg_tiou]
    if not pos or not neg:
        return None
    return pos[int(rng.integers(len(pos)))], neg[int(rng.integers(len(neg)))]


def video_level_train(dataset: DatasetSplits, dcfg: DecodeConfig = DecodeConfig(),
                      vcfg: VideoConfig = VideoConfig(), history: list[float] | None = None
                      ) -> LstmParams:
    """Triplet-train an LSTM encoder: query as anchor, positive/negative cut from the reference."""
    if not dataset.train:
        raise ContractError("training split is empty")
    rng = np.random.default_rng([vcfg.seed, 2])
    enc = LstmParams.init(rng, dataset.d, vcfg.l)
    blocks = dict(enc.named("enc."))
    state = AdamState(lr=vcfg.learning_rate)
    for epoch in range(1, vcfg.epochs + 1):
        losses = []
        for q_rec, r_rec in random_pairing(dataset.train, rng):
            picked = sample_triplet_segments(r_rec.r, r_rec.gt, dcfg, vcfg, rng)
            if picked is None:
                log.warning("no positive/negative segment for %s; skipping", r_rec.pair_id)
                continue
            pos, neg = picked
            R = r_rec.reference
            with ad.Tape() as tape:
                loss = triplet_loss(encode(enc, q_rec.query), encode(enc, R[:, pos.s - 1:pos.e]),
                                    encode(enc, R[:, neg.s - 1:neg.e]), vcfg.margin)
            names = list(blocks)
            grads = dict(zip(names, tape.gradient(loss, [blocks[n] for n in names])))
            clip_global_norm(grads, vcfg.clip)
            adam_step(blocks, grads, state)
            losses.append(float(loss.data[0]))
        mean = float(np.mean(losses)) if losses else float("nan")
        log.info("video-level epoch %d triplet loss %.4f", epoch, mean)
        if history is not None:
            history.append(mean)
    return enc


def candidate_embeddings(enc: LstmParams, ref: np.ndarray, dcfg: DecodeConfig, stride: int = 1
                         ) -> tuple[list[Segment], np.ndarray]:
    """Embeddings (l x n) of every candidate segment on the stride grid."""
    if stride < 1:
        raise ContractError("stride must be >= 1")
    R = np.asarray(ref, dtype=np.float64)
    r = R.shape[1]
    starts = np.arange(0, r, stride)
    horizon = min(dcfg.max_len, r)
    segs: list[Segment] = []
    cols: list[np.ndarray] = []
    with ad.no_tape():
        state = zero_state(enc, batch=len(starts))
        for t in range(horizon):
            idx = np.minimum(starts + t, r - 1)
            state = lstm_step(enc, Tensor(R[:, idx]), state)
            if t % stride:
                continue
            live = np.flatnonzero(starts + t < r)
            if live.size == 0:
                break
            h = state[0].data[:, live]
            cols.append(unit_columns(h))
            segs.extend(Segment(int(starts[b]) + 1, int(starts[b]) + t + 1) for b in live)
    # order candidates by (s, e) so ties resolve deterministically
    emb = np.concatenate(cols, axis=1)
    order = sorted(range(len(segs)), key=lambda i: (segs[i].s, segs[i].e))
    return [segs[i] for i in order], emb[:, order]


def select_nearest(anchor: np.ndarray, cands: Sequence[Segment], emb: np.ndarray) -> Segment:
    """Candidate whose embedding is closest to ``anchor``; first one wins ties."""
    dist = np.linalg.norm(emb - anchor[:, None], axis=0)
    best = 0
    for i in range(1, len(cands)):
        if dist[i] < dist[best] - TIE_TOL:
            best = i
    return cands[best]


def video_level_search(enc: LstmParams, query: np.ndarray, ref: np.ndarray,
                       dcfg: DecodeConfig = DecodeConfig(), stride: int = 1) -> Segment:
    with ad.no_tape():
        anchor = encode(enc, query).data
    cands, emb = candidate_embeddings(enc, ref, dcfg, stride)
    return select_nearest(anchor, cands, emb)


# --------------------------------------------------------------------------
# batch helpers
# --------------------------------------------------------------------------


def run_baseline(method: str, records: Sequence[EpisodeRecord], dcfg: DecodeConfig, *,
                 seed: int = 0, encoder: LstmParams | None = None, stride: int = 1
                 ) -> list[tuple[Segment, float]]:
    """Predictions for ``records`` with method chance, frame or video.

    The second element is the method's own score (nan for chance, mean path
    distance for frame, embedding distance is not reported for video).
    """
    if method == "chance":
        rng = np.random.default_rng([seed, 3])
        return [(chance_baseline(rec.r, dcfg, rng), float("nan")) for rec in records]
    if method == "frame":
        return [frame_level_baseline(rec.query, rec.reference, dcfg) for rec in records]
    if method == "video":
        if encoder is None:
            raise ContractError("video baseline needs a trained encoder")
        return [(video_level_search(encoder, rec.query, rec.reference, dcfg, stride), float("nan"))
                for rec in records]
    raise ContractError(f"unknown baseline {method!r}")
