"""The cross gated bilinear matching network and its checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .layers import (
    AttentionParams,
    BilinearParams,
    CrossGateParams,
    LstmParams,
    aggregate,
    attend,
    bilinear_match,
    cross_gate,
    lstm_step,
    project_query,
    zero_state,
)

CKPT_MAGIC = b"VRLC1"


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed or does not fit the model."""


@dataclass
class ModelParams:
    agg: LstmParams        # shared by query and reference
    att: AttentionParams
    gate: CrossGateParams
    bil: BilinearParams
    fwd: LstmParams        # forward matching LSTM, input l
    bwd: LstmParams        # backward matching LSTM, input l
    loc: LstmParams        # localization LSTM, input 2l
    Wl: Tensor             # (4, l)
    bl: Tensor             # (4,)

    @property
    def d(self) -> int:
        return self.agg.in_dim

    @property
    def l(self) -> int:
        return self.agg.hidden

    @property
    def k(self) -> int:
        return self.bil.k

    @classmethod
    def init(cls, d: int, l: int, k: int, seed: int = 0) -> "ModelParams":
        if not (d >= 1 and l >= 1 and 1 <= k):
            raise ContractError(f"invalid sizes d={d}, l={l}, k={k}")
        rng = np.random.default_rng(seed)
        r = 1.0 / np.sqrt(l)
        return cls(
            agg=LstmParams.init(rng, d, l),
            att=AttentionParams.init(rng, l),
            gate=CrossGateParams.init(rng, l),
            bil=BilinearParams.init(rng, l, k),
            fwd=LstmParams.init(rng, l, l),
            bwd=LstmParams.init(rng, l, l),
            loc=LstmParams.init(rng, 2 * l, l),
            Wl=Tensor(rng.uniform(-r, r, size=(4, l))),
            bl=Tensor(np.zeros(4)),
        )

    def named_blocks(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix in ("agg", "att", "gate", "bil", "fwd", "bwd", "loc"):
            out.update(getattr(self, prefix).named(prefix + "."))
        out["cls.W"] = self.Wl
        out["cls.b"] = self.bl
        return out

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.named_blocks().values())

    def copy(self) -> "ModelParams":
        clone = ModelParams.init(self.d, self.l, self.k)
        clone.assign({n: t.data for n, t in self.named_blocks().items()})
        return clone

    def assign(self, values: dict[str, np.ndarray]) -> None:
        blocks = self.named_blocks()
        if set(values) != set(blocks):
            missing = sorted(set(blocks) - set(values))
            extra = sorted(set(values) - set(blocks))
            raise CheckpointError(f"block mismatch: missing {missing}, unexpected {extra}")
        for name, t in blocks.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise CheckpointError(f"{name}: shape {v.shape}, expected {t.shape}")
            t.data = v.copy()


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass, as plain arrays (columns = steps)."""

    Hq: np.ndarray         # l x q
    Hr: np.ndarray         # l x r
    alpha: np.ndarray      # r x q
    hq_tilde: np.ndarray   # l x r
    hr_tilde: np.ndarray   # l x r
    t: np.ndarray          # l x r
    hf: np.ndarray         # l x r
    hb: np.ndarray         # l x r
    hm: np.ndarray         # 2l x r
    hl: np.ndarray         # l x r
    probs: np.ndarray      # 4 x r


def _as_input(seq) -> Tensor:
    data = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    return Tensor(np.asarray(data, dtype=np.float64))


def forward(params: ModelParams, query, ref) -> tuple[Tensor, ForwardTrace]:
    """Per-step class probabilities for one (query, reference) pair.

    ``query`` is d x q and ``ref`` is d x r.  Returns the 4 x r probability
    tensor (rows: start, end, inside, outside) and the trace.
    """
    Q, R = _as_input(query), _as_input(ref)
    for name, x in (("query", Q), ("reference", R)):
        if x.data.ndim != 2 or x.shape[1] < 1:
            raise ContractError(f"forward: {name} must be d x T with T >= 1, got {x.shape}")
        if x.shape[0] != params.d:
            raise DimensionError(f"forward: {name} has d={x.shape[0]}, model expects d={params.d}")

    hq = aggregate(params.agg, Q)
    hr = aggregate(params.agg, R)
    Hq = ad.stack_columns(hq)
    WqHq = project_query(params.att, Hq)

    # matching: attention needs h^f_{i-1}, so t and h^f are built together
    hf_state = zero_state(params.fwd)
    alphas, hqt, hrt, ts, hfs = [], [], [], [], []
    for h_r in hr:
        hq_bar, alpha = attend(params.att, Hq, h_r, hf_state[0], WqHq=WqHq)
        hq_tilde, hr_tilde = cross_gate(params.gate, hq_bar, h_r)
        t = bilinear_match(params.bil, hq_tilde, hr_tilde)
        hf_state = lstm_step(params.fwd, t, hf_state)
        alphas.append(alpha)
        hqt.append(hq_tilde)
        hrt.append(hr_tilde)
        ts.append(t)
        hfs.append(hf_state[0])

    hb_state = zero_state(params.bwd)
    hbs: list[Tensor] = [None] * len(ts)  # type: ignore[list-item]
    for i in range(len(ts) - 1, -1, -1):
        hb_state = lstm_step(params.bwd, ts[i], hb_state)
        hbs[i] = hb_state[0]

    hms = [ad.concat([f, b]) for f, b in zip(hfs, hbs)]
    loc_state = zero_state(params.loc)
    hls = []
    for hm in hms:
        loc_state = lstm_step(params.loc, hm, loc_state)
        hls.append(loc_state[0])

    Hl = ad.stack_columns(hls)
    probs = ad.softmax(ad.add_bias(ad.matmul(params.Wl, Hl), params.bl))

    def cols(xs):
        return np.stack([x.data for x in xs], axis=1)

    trace = ForwardTrace(
        Hq=Hq.data.copy(),
        Hr=cols(hr),
        alpha=np.stack([a.data for a in alphas], axis=0),
        hq_tilde=cols(hqt),
        hr_tilde=cols(hrt),
        t=cols(ts),
        hf=cols(hfs),
        hb=cols(hbs),
        hm=cols(hms),
        hl=Hl.data.copy(),
        probs=probs.data.copy(),
    )
    return probs, trace


def predict_probs(params: ModelParams, query, ref) -> np.ndarray:
    """4 x r probabilities without recording a tape."""
    with ad.no_tape():
        probs, _ = forward(params, query, ref)
    return probs.data


def export_attention(trace: ForwardTrace) -> np.ndarray:
    """Attention weights, one row per reference step (r x q)."""
    return trace.alpha.copy()


# --------------------------------------------------------------------------
# checkpoint I/O
# --------------------------------------------------------------------------
#
# magic "VRLC1", u32 block count, then per block:
#   u16 name length, utf-8 name, u32 ndim, u32 extents..., float64 payload
# all little-endian, payload row-major.


def save_blocks(path: str | Path, blocks: dict[str, np.ndarray]) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_blocks(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    pos = 5

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (n,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = take("<H")
        if pos + nlen > len(raw):
            raise CheckpointError(f"{path}: truncated block name")
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for block {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def save_params(params: ModelParams, path: str | Path) -> None:
    save_blocks(path, {n: t.data for n, t in params.named_blocks().items()})


def load_params(path: str | Path) -> ModelParams:
    blocks = load_blocks(path)
    try:
        d = blocks["agg.W"].shape[1]
        l = blocks["agg.U"].shape[1]
        k = blocks["bil.F"].shape[0] // l
    except (KeyError, IndexError) as exc:
        raise CheckpointError(f"{path}: not a model checkpoint ({exc})") from exc
    params = ModelParams.init(d, l, k)
    params.assign(blocks)
    return params
