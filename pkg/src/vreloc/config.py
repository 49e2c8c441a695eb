"""Flat run configuration: defaults < key=value file < command-line flags."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .baselines import VideoConfig
from .data import SynthConfig
from .inference import DecodeConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    jobs: int = 1
    data: str = "data"
    ckpt: str = ""
    out: str = "out"
    method: str = "model"
    split: str = "test"
    export_attention: bool = False
    # synthetic data
    n_classes: int = 40
    segments_per_class: int = 16
    d: int = 16
    seg_len_min: int = 6
    seg_len_max: int = 16
    bg_len_min: int = 8
    bg_len_max: int = 24
    n_distractors: int = 1
    sigma: float = 0.3
    warp_min: float = 0.8
    warp_max: float = 1.25
    jitter: float = 0.2
    smooth: float = 2.0
    background: str = "walk"
    nuisance: float = 4.0
    nuisance_rank: int = 2
    # model and training (desk scale; TrainConfig keeps the larger l=128, k=8)
    l: int = 32
    k: int = 4
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    c_w: float = 10.0
    epochs: int = 30
    clip: float = 5.0
    # decoding
    max_len: int = 32
    # video-level baseline
    video_l: int = 32
    video_margin: float = 0.2
    video_epochs: int = 10
    video_stride: int = 1

    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_classes=self.n_classes, segments_per_class=self.segments_per_class, d=self.d,
            seg_len_min=self.seg_len_min, seg_len_max=self.seg_len_max,
            bg_len_min=self.bg_len_min, bg_len_max=self.bg_len_max,
            n_distractors=self.n_distractors, sigma=self.sigma,
            warp_min=self.warp_min, warp_max=self.warp_max, jitter=self.jitter,
            smooth=self.smooth, background=self.background,
            nuisance=self.nuisance, nuisance_rank=self.nuisance_rank, seed=self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            l=self.l, k=self.k, c_w=self.c_w, epochs=self.epochs, seed=self.seed,
            max_pred_len=self.max_len, clip=self.clip, jobs=self.jobs)

    def decode(self) -> DecodeConfig:
        return DecodeConfig(max_len=self.max_len)

    def video(self) -> VideoConfig:
        return VideoConfig(l=self.video_l, margin=self.video_margin, epochs=self.video_epochs,
                           learning_rate=self.learning_rate, clip=self.clip,
                           stride=self.video_stride, seed=self.seed)

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, known[key].type, raw)
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _coerce(key: str, typ, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in ("int", int):
            return int(text)
        if typ in ("float", float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return text


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, Any] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        cfg = cfg.updated(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    return cfg.updated(dict(overrides))
