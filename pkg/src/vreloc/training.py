"""Soft labels, the weighted loss, Adam, and the training loop."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DomainError, Tensor
from .data import DatasetSplits, EpisodeRecord
from .inference import DecodeConfig, Segment, decode
from .metrics import EvalResult, evaluate
from .model import ModelParams, forward, predict_probs

log = logging.getLogger(__name__)

START, END, INSIDE, OUTSIDE = range(4)


def make_labels(r: int, seg: Segment) -> np.ndarray:
    """Per-step target distributions, shape (r, 4)."""
    if not 1 <= seg.s <= seg.e <= r:
        raise ContractError(f"make_labels: segment [{seg.s}, {seg.e}] not within 1..{r}")
    g = np.zeros((r, 4))
    g[:, OUTSIDE] = 1.0
    s, e = seg.s - 1, seg.e - 1
    g[s:e + 1] = (0.0, 0.0, 1.0, 0.0)
    if s == e:
        g[s] = (1 / 3, 1 / 3, 1 / 3, 0.0)
    else:
        g[s] = (0.5, 0.0, 0.5, 0.0)
        g[e] = (0.0, 0.5, 0.5, 0.0)
    return g


def step_weights(labels: np.ndarray, c_w: float) -> np.ndarray:
    return np.where(labels[:, START] + labels[:, END] > 0, float(c_w), 1.0)


def weighted_loss(probs: Tensor, labels: np.ndarray, c_w: float) -> Tensor:
    """-(1/r) sum_i w_i sum_n g_in log p_in, skipping entries where g_in = 0.

    ``probs`` is the 4 x r tensor from :func:`forward`; ``labels`` is (r, 4).
    """
    labels = np.asarray(labels, dtype=np.float64)
    r = labels.shape[0]
    if probs.shape != (4, r):
        raise ContractError(f"weighted_loss: probs {probs.shape} vs labels {labels.shape}")
    w = step_weights(labels, c_w)
    n_idx, i_idx = np.nonzero(labels.T > 0)
    flat = n_idx * r + i_idx
    picked = ad.gather(probs, flat)
    if np.any(picked.data <= 0):
        raise DomainError("weighted_loss: zero probability on a labelled class")
    coef = Tensor(labels.T[n_idx, i_idx] * w[i_idx])
    return ad.scale(ad.total(ad.mul(coef, ad.log(picked))), -1.0 / r)


def loss_value(probs: np.ndarray, labels: np.ndarray, c_w: float) -> float:
    with ad.no_tape():
        return float(weighted_loss(Tensor(probs), labels, c_w).data[0])


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown block {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in block {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if math.isfinite(max_norm) and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    l: int = 128
    k: int = 8
    c_w: float = 10.0
    epochs: int = 30
    seed: int = 0
    max_pred_len: int = 32
    clip: float = 5.0
    jobs: int = 1

    def validate(self) -> None:
        if self.c_w < 1:
            raise ContractError(f"c_w must be >= 1, got {self.c_w}")
        if not 1 <= self.k < self.l:
            raise ContractError(f"need 1 <= k < l, got k={self.k}, l={self.l}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ContractError("epochs must be >= 0 and learning_rate > 0")


@dataclass
class EpochLog:
    epoch: int
    mean_train_loss: float
    val_map_avg: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    best_epoch: int
    val_pairs_digest: str


def loss_and_grads(params: ModelParams, query, ref, gt: Segment, c_w: float):
    blocks = params.named_blocks()
    names = list(blocks)
    with ad.Tape() as tape:
        probs, _ = forward(params, query, ref)
        loss = weighted_loss(probs, make_labels(probs.shape[1], gt), c_w)
    grads = tape.gradient(loss, [blocks[n] for n in names])
    return float(loss.data[0]), dict(zip(names, grads))


def pair_digest(pairs: Sequence[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for q, r in pairs:
        h.update(f"{q}\t{r}\n".encode())
    return h.hexdigest()


def random_pairing(records: Sequence[EpisodeRecord], rng: np.random.Generator
                   ) -> list[tuple[EpisodeRecord, EpisodeRecord]]:
    """Pair each query with a reference drawn uniformly from other same-class episodes."""
    by_class: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.class_id, []).append(i)
    pairs = []
    for i in rng.permutation(len(records)):
        rec = records[i]
        partners = [j for j in by_class[rec.class_id] if j != i]
        if not partners:
            log.warning("class %s has a single segment; skipping %s", rec.class_id, rec.pair_id)
            continue
        j = partners[int(rng.integers(len(partners)))]
        pairs.append((rec, records[j]))
    return pairs


def predict_segments(params: ModelParams, records: Sequence[EpisodeRecord], cfg: DecodeConfig,
                     jobs: int = 1) -> list[tuple[Segment, float]]:
    """Decode the model's prediction for each record's fixed (query, reference) pair."""
    def one(rec: EpisodeRecord):
        return decode(predict_probs(params, rec.query, rec.reference), cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, records))
    return [one(rec) for rec in records]


def evaluate_model(params: ModelParams, records: Sequence[EpisodeRecord], cfg: DecodeConfig,
                   jobs: int = 1) -> EvalResult:
    preds = [seg for seg, _ in predict_segments(params, records, cfg, jobs)]
    return evaluate(preds, [rec.gt for rec in records])


def train(
    config: TrainConfig,
    dataset: DatasetSplits,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Batch-size-1 Adam over randomly re-paired training episodes.

    Keeps the parameters with the best validation average mAP (the final
    ones if there is no validation split).
    """
    config.validate()
    if not dataset.train:
        raise ContractError("training split is empty")
    d = dataset.d
    params = ModelParams.init(d, config.l, config.k, seed=config.seed)
    blocks = params.named_blocks()
    state = AdamState(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng([config.seed, 1])
    dcfg = DecodeConfig(config.max_pred_len)
    val = dataset.val
    val_digest = pair_digest([(r.pair_id, r.pair_id) for r in val])

    history: list[EpochLog] = []
    best_score, best_epoch, best_params = -math.inf, 0, params.copy()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for q_rec, r_rec in random_pairing(dataset.train, rng):
            loss, grads = loss_and_grads(params, q_rec.query, r_rec.reference, r_rec.gt, config.c_w)
            clip_global_norm(grads, config.clip)
            adam_step(blocks, grads, state)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val_avg = evaluate_model(params, val, dcfg, config.jobs).average if val else float("nan")
        entry = EpochLog(epoch, mean_loss, val_avg, time.perf_counter() - t0)
        history.append(entry)
        log.info("epoch %d loss %.4f val mAP %.3f (%.1fs)", epoch, mean_loss, val_avg, entry.wall_seconds)
        if on_epoch is not None:
            on_epoch(entry)
        score = val_avg if val else epoch
        if score > best_score:
            best_score, best_epoch, best_params = score, epoch, params.copy()
    if config.epochs == 0:
        best_params = params
    return TrainResult(best_params, history, best_epoch, val_digest)
