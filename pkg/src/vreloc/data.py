"""Episodes, synthetic class-disjoint datasets, and the on-disk formats.

Feature file (``.vrlf``)::

    b"VRLF1" | u32 d | u32 T | d*T float32     (little-endian, column by column)

Manifest: UTF-8 TSV with header
``pair_id split class_id query_path ref_path gt_start gt_end``; paths are
relative to the manifest's directory, segment indices 1-based inclusive.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .inference import Segment

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"VRLF1"
FEATURE_HEADER = struct.Struct("<5sII")
MANIFEST_COLUMNS = ("pair_id", "split", "class_id", "query_path", "ref_path", "gt_start", "gt_end")
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PayloadMismatchError(FormatError):
    """Header shape disagrees with the payload (extra bytes or zero extents)."""


class ManifestError(FormatError):
    pass


class ManifestRowError(ManifestError):
    def __init__(self, row: int, msg: str):
        super().__init__(f"manifest row {row}: {msg}")
        self.row = row


class SplitOverlapError(ManifestError):
    pass


class SynthConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass(eq=False)
class EpisodeRecord:
    pair_id: str
    class_id: str
    query: np.ndarray       # d x q, float32
    reference: np.ndarray   # d x r, float32
    gt: Segment

    def __post_init__(self):
        if self.query.ndim != 2 or self.query.shape[1] < 1:
            raise ValueError(f"{self.pair_id}: query must be d x q with q >= 1")
        if self.reference.ndim != 2 or self.reference.shape[0] != self.query.shape[0]:
            raise ValueError(f"{self.pair_id}: reference shape {self.reference.shape} "
                             f"incompatible with query {self.query.shape}")
        self.gt.check_within(self.reference.shape[1])

    @property
    def r(self) -> int:
        return self.reference.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (self.pair_id == other.pair_id and self.class_id == other.class_id
                and self.gt == other.gt
                and np.array_equal(self.query, other.query)
                and np.array_equal(self.reference, other.reference))


@dataclass
class DatasetSplits:
    train: list[EpisodeRecord] = field(default_factory=list)
    val: list[EpisodeRecord] = field(default_factory=list)
    test: list[EpisodeRecord] = field(default_factory=list)

    def split(self, name: str) -> list[EpisodeRecord]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def classes(self, name: str) -> set[str]:
        return {rec.class_id for rec in self.split(name)}

    def validate(self) -> None:
        """Class sets must be pairwise disjoint across splits."""
        sets = {s: self.classes(s) for s in SPLITS}
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1:]:
                common = sets[a] & sets[b]
                if common:
                    raise SplitOverlapError(
                        f"classes shared by {a} and {b}: {sorted(common)[:5]}")

    @property
    def d(self) -> int:
        for s in SPLITS:
            if self.split(s):
                return self.split(s)[0].query.shape[0]
        raise ValueError("empty dataset")


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 40
    segments_per_class: int = 16
    d: int = 16
    seg_len_min: int = 6          # canonical per-class length, before warping
    seg_len_max: int = 16
    bg_len_min: int = 8           # total background steps around the planted parts
    bg_len_max: int = 24
    n_distractors: int = 1        # unrelated clips planted in the background
    sigma: float = 0.3
    warp_min: float = 0.8
    warp_max: float = 1.25
    jitter: float = 0.2           # amplitude scale drawn from [1 - jitter, 1 + jitter]
    smooth: float = 2.0           # gaussian low-pass width, in prototype grid steps
    background: str = "walk"      # "walk" or "orthogonal"
    nuisance: float = 4.0         # scale of the per-sequence drift in a fixed subspace
    nuisance_rank: int = 2
    seed: int = 0

    def split_counts(self) -> tuple[int, int, int]:
        """Train/val/test class counts, 80/10/10 (160/20/20 at 200 classes)."""
        held = max(1, round(self.n_classes / 10))
        return self.n_classes - 2 * held, held, held

    def validate(self) -> None:
        if self.n_classes < 3:
            raise SynthConfigError("need at least 3 classes (one per split)")
        if self.split_counts()[0] < 1:
            raise SynthConfigError(f"n_classes={self.n_classes} leaves no training classes")
        if self.segments_per_class < 1 or self.d < 1:
            raise SynthConfigError("segments_per_class and d must be positive")
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise SynthConfigError(f"bad segment length range [{self.seg_len_min}, {self.seg_len_max}]")
        if not 0 <= self.bg_len_min <= self.bg_len_max:
            raise SynthConfigError(f"bad background length range [{self.bg_len_min}, {self.bg_len_max}]")
        if not 0 < self.warp_min <= self.warp_max:
            raise SynthConfigError(f"bad warp range [{self.warp_min}, {self.warp_max}]")
        if self.sigma < 0 or not 0 <= self.jitter < 1 or self.smooth < 0 or self.n_distractors < 0:
            raise SynthConfigError("sigma, jitter, smooth and n_distractors must be non-negative "
                                   "(jitter < 1)")
        if self.nuisance < 0 or not 0 <= self.nuisance_rank <= self.d:
            raise SynthConfigError(f"need nuisance >= 0 and 0 <= nuisance_rank <= d={self.d}")
        if self.background not in ("walk", "orthogonal"):
            raise SynthConfigError(f"unknown background kind {self.background!r}")
        if self.background == "orthogonal":
            longest = self.max_instance_len() * (1 + self.n_distractors)
            if longest >= self.d:
                raise SynthConfigError(
                    f"orthogonal background needs planted content shorter than d={self.d} "
                    f"(up to {longest} columns)")

    def max_instance_len(self) -> int:
        return max(1, round(self.seg_len_max * self.warp_max))

    @property
    def grid(self) -> int:
        return self.max_instance_len()


def _smooth_track(rng: np.random.Generator, d: int, n: int, smooth: float) -> np.ndarray:
    """Low-pass filtered random walk, centred and scaled to unit std per dimension."""
    walk = np.cumsum(rng.standard_normal((d, n)), axis=1)
    if smooth > 0:
        walk = gaussian_filter1d(walk, smooth, axis=1, mode="nearest")
    walk = walk - walk.mean(axis=1, keepdims=True)
    std = walk.std(axis=1, keepdims=True)
    return walk / np.where(std > 0, std, 1.0)


def _resample(proto: np.ndarray, n: int) -> np.ndarray:
    """Nearest-neighbour resampling of the prototype grid to n columns."""
    P = proto.shape[1]
    idx = np.minimum(((np.arange(n) + 0.5) * P / n).astype(int), P - 1)
    return proto[:, idx]


class _Synth:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.basis = None
        if cfg.nuisance > 0 and cfg.nuisance_rank > 0:
            self.basis, _ = np.linalg.qr(rng.standard_normal((cfg.d, cfg.nuisance_rank)))

    def drift(self, seq: np.ndarray) -> np.ndarray:
        """Add a smooth walk confined to the shared nuisance subspace."""
        if self.basis is None:
            return seq
        walk = _smooth_track(self.rng, self.basis.shape[1], seq.shape[1], self.cfg.smooth)
        return seq + self.cfg.nuisance * (self.basis @ walk)

    def prototype(self) -> np.ndarray:
        return _smooth_track(self.rng, self.cfg.d, self.cfg.grid, self.cfg.smooth)

    def instance(self, proto: np.ndarray, canon_len: int) -> np.ndarray:
        cfg, rng = self.cfg, self.rng
        warp = rng.uniform(cfg.warp_min, cfg.warp_max)
        n = max(1, int(round(canon_len * warp)))
        amp = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        clip = amp * _resample(proto, n)
        if cfg.sigma > 0:
            clip = clip + cfg.sigma * rng.standard_normal(clip.shape)
        return clip

    def reference(self, clip: np.ndarray, others: list[tuple[np.ndarray, int]] = ()
                  ) -> tuple[np.ndarray, Segment]:
        """Plant ``clip`` plus distractors in background.

        Distractors are instances of ``others`` (prototype, canonical length)
        when given, otherwise of fresh prototypes.
        """
        cfg, rng = self.cfg, self.rng
        parts = [clip]
        for _ in range(cfg.n_distractors):
            if others:
                proto, canon = others[int(rng.integers(len(others)))]
            else:
                proto = self.prototype()
                canon = int(rng.integers(cfg.seg_len_min, cfg.seg_len_max + 1))
            parts.append(self.instance(proto, canon))
        order = rng.permutation(len(parts))
        n_bg = int(rng.integers(cfg.bg_len_min, cfg.bg_len_max + 1))
        # split background into len(parts)+1 gaps
        cuts = np.sort(rng.integers(0, n_bg + 1, size=len(parts)))
        gaps = np.diff(np.concatenate([[0], cuts, [n_bg]]))
        planted = sum(p.shape[1] for p in parts)
        bg = _smooth_track(rng, cfg.d, max(n_bg, 1), cfg.smooth)[:, :n_bg]
        if cfg.background == "orthogonal" and n_bg:
            basis, _ = np.linalg.qr(np.concatenate(parts, axis=1))
            bg = bg - basis @ (basis.T @ bg)
        elif cfg.sigma > 0:
            bg = bg + cfg.sigma * rng.standard_normal(bg.shape)

        cols, pos, gt = [], 0, None
        for k, part_idx in enumerate(order):
            cols.append(bg[:, pos:pos + gaps[k]])
            pos += gaps[k]
            start = sum(c.shape[1] for c in cols)
            cols.append(parts[part_idx])
            if part_idx == 0:
                gt = Segment(start + 1, start + clip.shape[1])
        cols.append(bg[:, pos:])
        ref = np.concatenate(cols, axis=1)
        assert ref.shape[1] == planted + n_bg
        return ref, gt


def synthesize(cfg: SynthConfig = SynthConfig()) -> DatasetSplits:
    """Generate a class-disjoint dataset; fully determined by ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gen = _Synth(cfg, rng)
    n_train, n_val, _ = cfg.split_counts()
    class_ids = [f"c{c:03d}" for c in range(cfg.n_classes)]
    order = rng.permutation(cfg.n_classes)
    split_of = {}
    for rank, c in enumerate(order):
        split_of[class_ids[c]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    classes = {}
    for cid in class_ids:
        classes[cid] = (gen.prototype(), int(rng.integers(cfg.seg_len_min, cfg.seg_len_max + 1)))

    splits = DatasetSplits()
    pair = 0
    for cid in class_ids:
        proto, canon = classes[cid]
        # distractors come from other classes of the same split, so test
        # references never contain training classes and vice versa
        others = [classes[c] for c in class_ids if c != cid and split_of[c] == split_of[cid]]
        for _ in range(cfg.segments_per_class):
            query = gen.drift(gen.instance(proto, canon))
            ref, gt = gen.reference(gen.instance(proto, canon), others)
            ref = gen.drift(ref)
            rec = EpisodeRecord(
                pair_id=f"p{pair:05d}",
                class_id=cid,
                query=query.astype(np.float32),
                reference=ref.astype(np.float32),
                gt=gt,
            )
            splits.split(split_of[cid]).append(rec)
            pair += 1
    splits.validate()
    return splits


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------


def encode_features(seq: np.ndarray) -> bytes:
    seq = np.asarray(seq)
    if seq.ndim != 2 or 0 in seq.shape:
        raise ValueError(f"feature sequence must be a non-empty d x T matrix, got {seq.shape}")
    d, T = seq.shape
    payload = np.ascontiguousarray(seq.astype("<f4").T).tobytes()
    return FEATURE_HEADER.pack(FEATURE_MAGIC, d, T) + payload


def decode_features(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 5 or raw[:5] != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:5]!r}")
    if len(raw) < FEATURE_HEADER.size:
        raise TruncatedPayloadError(f"{source}: truncated header ({len(raw)} bytes)")
    _, d, T = FEATURE_HEADER.unpack_from(raw)
    if d == 0 or T == 0:
        raise PayloadMismatchError(f"{source}: zero extent in header (d={d}, T={T})")
    expected = FEATURE_HEADER.size + 4 * d * T
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{source}: payload has {len(raw) - FEATURE_HEADER.size} bytes, "
                                    f"header promises {4 * d * T}")
    if len(raw) > expected:
        raise PayloadMismatchError(f"{source}: {len(raw) - expected} bytes beyond the {d}x{T} payload")
    vals = np.frombuffer(raw, dtype="<f4", count=d * T, offset=FEATURE_HEADER.size)
    return vals.reshape(T, d).T.astype(np.float32)


def write_features(seq: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_features(seq))


def read_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def write_dataset(splits: DatasetSplits, out_dir: str | Path) -> Path:
    """Write feature files and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        for rec in splits.split(split):
            qp = f"features/{rec.pair_id}_q.vrlf"
            rp = f"features/{rec.pair_id}_r.vrlf"
            write_features(rec.query, out / qp)
            write_features(rec.reference, out / rp)
            rows.append((rec.pair_id, split, rec.class_id, qp, rp, rec.gt.s, rec.gt.e))
    manifest = out / "manifest.tsv"
    with manifest.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


def load_manifest(path: str | Path) -> DatasetSplits:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    base = path.parent
    splits = DatasetSplits()
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {' '.join(MANIFEST_COLUMNS)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestRowError(row_no, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            pair_id, split, class_id, qp, rp, s, e = (c.strip() for c in row)
            if split not in SPLITS:
                raise ManifestRowError(row_no, f"unknown split {split!r}")
            try:
                s_i, e_i = int(s), int(e)
            except ValueError:
                raise ManifestRowError(row_no, f"non-integer segment bounds {s!r}, {e!r}") from None
            query = read_features(base / qp)
            ref = read_features(base / rp)
            if query.shape[0] != ref.shape[0]:
                raise ManifestRowError(row_no, f"query d={query.shape[0]} but reference d={ref.shape[0]}")
            if not 1 <= s_i <= e_i <= ref.shape[1]:
                raise ManifestRowError(row_no, f"segment [{s_i}, {e_i}] outside reference of length {ref.shape[1]}")
            splits.split(split).append(
                EpisodeRecord(pair_id, class_id, query, ref, Segment(s_i, e_i)))
    splits.validate()
    return splits
