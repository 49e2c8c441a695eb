"""Building blocks of the matching network.

All functions are pure in (params, inputs) and are written against the
primitives in :mod:`vreloc.autodiff`, so they differentiate when a tape is
active and simply evaluate otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    r = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-r, r, size=shape)


class _Block:
    """Mixin: enumerate tensor fields under stable names."""

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + f.name, getattr(self, f.name)) for f in fields(self)
                if isinstance(getattr(self, f.name), Tensor)]

    def num_scalars(self) -> int:
        return sum(t.data.size for _, t in self.named())


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


@dataclass
class LstmParams(_Block):
    """Gate order in the stacked blocks is input, forget, candidate, output."""

    W: Tensor  # (4l, in_dim)
    U: Tensor  # (4l, l)
    b: Tensor  # (4l,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int) -> "LstmParams":
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return cls(
            W=Tensor(_uniform(rng, (4 * hidden, in_dim), in_dim)),
            U=Tensor(_uniform(rng, (4 * hidden, hidden), hidden)),
            b=Tensor(b),
        )


def zero_state(p: LstmParams, batch: int | None = None) -> tuple[Tensor, Tensor]:
    shape = (p.hidden,) if batch is None else (p.hidden, batch)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def lstm_step(p: LstmParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.  ``x`` may be a vector or a (in_dim, batch) matrix."""
    h, c = state
    if x.shape[0] != p.in_dim or h.shape[0] != p.hidden or h.shape != c.shape:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs in_dim={p.in_dim}, l={p.hidden}")
    l = p.hidden
    z = ad.add_bias(ad.add(ad.matmul(p.W, x), ad.matmul(p.U, h)), p.b)
    i = ad.sigmoid(ad.slice_rows(z, 0, l))
    f = ad.sigmoid(ad.slice_rows(z, l, 2 * l))
    g = ad.tanh(ad.slice_rows(z, 2 * l, 3 * l))
    o = ad.sigmoid(ad.slice_rows(z, 3 * l, 4 * l))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def aggregate(p: LstmParams, seq: Tensor) -> list[Tensor]:
    """Run the LSTM left to right over the columns of ``seq`` (d x T).

    Returns the hidden state for every step.
    """
    if seq.data.ndim != 2 or seq.shape[1] < 1:
        raise ContractError(f"aggregate: need a d x T sequence with T >= 1, got {seq.shape}")
    if seq.shape[0] != p.in_dim:
        raise DimensionError(f"aggregate: feature dim {seq.shape[0]} != LSTM in_dim {p.in_dim}")
    state = zero_state(p)
    hs = []
    for t in range(seq.shape[1]):
        col = Tensor(seq.data[:, t])
        state = lstm_step(p, col, state)
        hs.append(state[0])
    return hs


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


@dataclass
class AttentionParams(_Block):
    Wq: Tensor  # (l, l)
    Wr: Tensor  # (l, l)
    Wm: Tensor  # (l, l)
    bm: Tensor  # (l,)
    w: Tensor   # (1, l) - the scoring vector, kept as a row
    b: Tensor   # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, l: int) -> "AttentionParams":
        return cls(
            Wq=Tensor(_uniform(rng, (l, l), l)),
            Wr=Tensor(_uniform(rng, (l, l), l)),
            Wm=Tensor(_uniform(rng, (l, l), l)),
            bm=Tensor(np.zeros(l)),
            w=Tensor(_uniform(rng, (1, l), l)),
            b=Tensor(np.zeros(1)),
        )


def project_query(p: AttentionParams, Hq: Tensor) -> Tensor:
    """W^q H^q, shared by every reference step."""
    return ad.matmul(p.Wq, Hq)


def attend(
    p: AttentionParams,
    Hq: Tensor,
    h_r: Tensor,
    h_f_prev: Tensor,
    WqHq: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Attention-weighted query for one reference step.

    ``Hq`` is l x q.  ``WqHq`` may be passed in to avoid recomputing the query
    projection at every step.  Returns (weighted query, attention weights).
    """
    if Hq.data.ndim != 2 or Hq.shape[1] == 0:
        raise ContractError(f"attend: empty or malformed query {Hq.shape}")
    q = Hq.shape[1]
    if WqHq is None:
        WqHq = project_query(p, Hq)
    v = ad.add_bias(ad.add(ad.matmul(p.Wr, h_r), ad.matmul(p.Wm, h_f_prev)), p.bm)
    E = ad.tanh(ad.add_bias(WqHq, v))
    scores = ad.reshape(ad.add_bias(ad.matmul(p.w, E), p.b), (q,))
    alpha = ad.softmax(scores)
    return ad.matmul(Hq, alpha), alpha


# --------------------------------------------------------------------------
# cross gating
# --------------------------------------------------------------------------


@dataclass
class CrossGateParams(_Block):
    Wr: Tensor  # gate computed from the reference, applied to the query
    Wq: Tensor  # gate computed from the query, applied to the reference
    br: Tensor
    bq: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, l: int) -> "CrossGateParams":
        return cls(
            Wr=Tensor(_uniform(rng, (l, l), l)),
            Wq=Tensor(_uniform(rng, (l, l), l)),
            br=Tensor(np.zeros(l)),
            bq=Tensor(np.zeros(l)),
        )


def cross_gate(p: CrossGateParams, hq_bar: Tensor, h_r: Tensor) -> tuple[Tensor, Tensor]:
    if hq_bar.shape != h_r.shape or hq_bar.shape[0] != p.Wr.shape[1]:
        raise DimensionError(f"cross_gate: {hq_bar.shape} vs {h_r.shape}, l={p.Wr.shape[1]}")
    g_r = ad.sigmoid(ad.add_bias(ad.matmul(p.Wr, h_r), p.br))
    g_q = ad.sigmoid(ad.add_bias(ad.matmul(p.Wq, hq_bar), p.bq))
    return ad.mul(hq_bar, g_r), ad.mul(h_r, g_q)


# --------------------------------------------------------------------------
# factorized bilinear matching
# --------------------------------------------------------------------------


@dataclass
class BilinearParams(_Block):
    """Rank-k factors for all l output dimensions, stacked row-wise.

    Rows ``j*k:(j+1)*k`` of ``F`` hold the k x l factor of output ``j``;
    ``bf[j*k:(j+1)*k]`` is its bias.
    """

    F: Tensor   # (l*k, l)
    bf: Tensor  # (l*k,)

    @property
    def l(self) -> int:
        return self.F.shape[1]

    @property
    def k(self) -> int:
        return self.F.shape[0] // self.F.shape[1]

    def factor(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        k = self.k
        return self.F.data[j * k:(j + 1) * k], self.bf.data[j * k:(j + 1) * k]

    @classmethod
    def init(cls, rng: np.random.Generator, l: int, k: int) -> "BilinearParams":
        return cls(F=Tensor(_uniform(rng, (l * k, l), l)), bf=Tensor(np.zeros(l * k)))


_SUM_CACHE: dict[tuple[int, int], Tensor] = {}


def _block_sum(l: int, k: int) -> Tensor:
    key = (l, k)
    if key not in _SUM_CACHE:
        _SUM_CACHE[key] = Tensor(np.kron(np.eye(l), np.ones((1, k))))
    return _SUM_CACHE[key]


def bilinear_match(p: BilinearParams, hq: Tensor, hr: Tensor) -> Tensor:
    """t_j = (F_j hq + b_j) . (F_j hr + b_j) for every output dimension j."""
    l, k = p.l, p.k
    if hq.shape != (l,) or hr.shape != (l,):
        raise DimensionError(f"bilinear_match: inputs {hq.shape}, {hr.shape}, expected ({l},)")
    pq = ad.add_bias(ad.matmul(p.F, hq), p.bf)
    pr = ad.add_bias(ad.matmul(p.F, hr), p.bf)
    return ad.matmul(_block_sum(l, k), ad.mul(pq, pr))


def bilinear_expansion(p: BilinearParams, hq: np.ndarray, hr: np.ndarray) -> np.ndarray:
    """Quadratic + linear + bias form of :func:`bilinear_match` (plain numpy)."""
    t = np.empty(p.l)
    for j in range(p.l):
        F, b = p.factor(j)
        t[j] = hq @ F.T @ F @ hr + b @ F @ (hq + hr) + b @ b
    return t


def bilinear_full_oracle(Wb: np.ndarray, bb: np.ndarray, hq: np.ndarray, hr: np.ndarray) -> np.ndarray:
    """Unfactorized bilinear map t_j = hq^T Wb[j] hr + bb[j].  Reference only."""
    Wb = np.asarray(Wb, dtype=np.float64)
    if Wb.ndim != 3 or Wb.shape[1:] != (hq.shape[0], hr.shape[0]) or bb.shape != (Wb.shape[0],):
        raise DimensionError(f"bilinear_full_oracle: Wb {Wb.shape}, bb {bb.shape}")
    return np.einsum("a,jab,b->j", hq, Wb, hr) + bb
