"""``vreloc`` command line: synth, train, eval, predict, baseline, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .baselines import run_baseline, video_level_train
from .config import ConfigError, RunConfig, load_config
from .data import (
    SPLITS, DatasetSplits, EpisodeRecord, FormatError, SynthConfigError, load_manifest,
    synthesize, write_dataset,
)
from .inference import Segment
from .layers import LstmParams
from .metrics import EvalResult, evaluate, evaluate_by_class
from .model import CheckpointError, ModelParams, export_attention, forward, load_blocks, \
    load_params, save_blocks, save_params
from .training import make_labels, predict_segments, train, weighted_loss

log = logging.getLogger("vreloc")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_CHECK = 0, 1, 2, 3, 4, 5
PRED_COLUMNS = ("pair_id", "pred_s", "pred_e", "log_score")


class MissingInputError(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(cfg.dump(), encoding="utf-8")
    return out


def _load_data(cfg: RunConfig) -> DatasetSplits:
    path = Path(cfg.data)
    manifest = path / "manifest.tsv" if path.is_dir() else path
    if not manifest.exists():
        raise MissingInputError(f"no manifest at {manifest}")
    return load_manifest(manifest)


def _records(cfg: RunConfig, data: DatasetSplits) -> list[EpisodeRecord]:
    if cfg.split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {cfg.split!r}")
    recs = data.split(cfg.split)
    if not recs:
        raise ConfigError(f"split {cfg.split!r} is empty")
    return recs


def _ckpt_path(cfg: RunConfig, default_name: str) -> Path:
    return Path(cfg.ckpt) if cfg.ckpt else Path(cfg.out) / default_name


def _load_model(cfg: RunConfig) -> ModelParams:
    path = _ckpt_path(cfg, "model.vrlc")
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    return load_params(path)


def _load_encoder(path: Path) -> LstmParams:
    blocks = load_blocks(path)
    try:
        return LstmParams(W=ad.Tensor(blocks["enc.W"]), U=ad.Tensor(blocks["enc.U"]),
                          b=ad.Tensor(blocks["enc.b"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: not a video encoder checkpoint") from exc


def _encoder(cfg: RunConfig, data: DatasetSplits, out: Path) -> LstmParams:
    if cfg.ckpt and Path(cfg.ckpt).exists():
        return _load_encoder(Path(cfg.ckpt))
    enc = video_level_train(data, cfg.decode(), cfg.video())
    save_blocks(out / "video_encoder.vrlc", {n: t.data for n, t in enc.named("enc.")})
    return enc


def write_predictions(path: Path, records: Sequence[EpisodeRecord],
                      preds: Sequence[tuple[Segment, float]], method: str | None = None) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PRED_COLUMNS + (("method",) if method else ()))
        for rec, (seg, score) in zip(records, preds):
            row = [rec.pair_id, seg.s, seg.e, repr(float(score))]
            w.writerow(row + ([method] if method else []))


def read_predictions(path: Path) -> dict[str, Segment]:
    if not path.exists():
        raise MissingInputError(f"predictions not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or not set(PRED_COLUMNS[:3]) <= set(reader.fieldnames):
            raise FormatError(f"{path}: prediction header must contain {PRED_COLUMNS[:3]}")
        return {row["pair_id"]: Segment(int(row["pred_s"]), int(row["pred_e"])) for row in reader}


def _predict(cfg: RunConfig, data: DatasetSplits, records, out: Path, method: str):
    if method == "model":
        return predict_segments(_load_model(cfg), records, cfg.decode(), cfg.jobs)
    encoder = _encoder(cfg, data, out) if method == "video" else None
    return run_baseline(method, records, cfg.decode(), seed=cfg.seed, encoder=encoder,
                        stride=cfg.video_stride)


def _report(out: Path, result: EvalResult, label: str, per_class: dict[str, EvalResult]) -> None:
    lines = [EvalResult.header(), result.row(label)]
    (out / "results.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cls_lines = [EvalResult.header("class_id")] + [r.row(c) for c, r in per_class.items()]
    (out / "results_by_class.tsv").write_text("\n".join(cls_lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    data = synthesize(cfg.synth())
    write_dataset(data, out)
    for split in SPLITS:
        print(f"{split}\t{len(data.split(split))} pairs\t{len(data.classes(split))} classes")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    out = _out_dir(cfg)
    metrics = out / "metrics.tsv"
    timing = out / "timing.tsv"
    metrics.write_text("epoch\tmean_train_loss\tval_mAP_avg\n", encoding="utf-8")
    timing.write_text("epoch\twall_seconds\n", encoding="utf-8")

    def on_epoch(e):
        with metrics.open("a", encoding="utf-8") as fh:
            fh.write(f"{e.epoch}\t{e.mean_train_loss:.6f}\t{100 * e.val_map_avg:.2f}\n")
        with timing.open("a", encoding="utf-8") as fh:
            fh.write(f"{e.epoch}\t{e.wall_seconds:.3f}\n")
        print(f"epoch {e.epoch}\tloss {e.mean_train_loss:.4f}\tval mAP {100 * e.val_map_avg:.1f}",
              flush=True)

    result = train(cfg.train(), data, on_epoch=on_epoch)
    ckpt = _ckpt_path(cfg, "model.vrlc")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, ckpt)
    print(f"best epoch {result.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    records = _records(cfg, data)
    out = _out_dir(cfg)
    gts = [r.gt for r in records]
    if args.preds:
        table = read_predictions(Path(args.preds))
        missing = [r.pair_id for r in records if r.pair_id not in table]
        if missing:
            raise FormatError(f"predictions missing for {len(missing)} pairs, e.g. {missing[0]}")
        preds = [table[r.pair_id] for r in records]
        label = "predictions"
    else:
        scored = _predict(cfg, data, records, out, cfg.method)
        write_predictions(out / "predictions.tsv", records, scored,
                          None if cfg.method == "model" else cfg.method)
        preds = [s for s, _ in scored]
        label = cfg.method
    result = evaluate(preds, gts)
    _report(out, result, label, evaluate_by_class(preds, gts, [r.class_id for r in records]))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    records = _records(cfg, data)
    out = _out_dir(cfg)
    params = _load_model(cfg)
    preds = predict_segments(params, records, cfg.decode(), cfg.jobs)
    write_predictions(out / "predictions.tsv", records, preds)
    if cfg.export_attention:
        att_dir = out / "attention"
        att_dir.mkdir(exist_ok=True)
        for rec in records:
            with ad.no_tape():
                _, trace = forward(params, rec.query, rec.reference)
            np.savetxt(att_dir / f"{rec.pair_id}.tsv", export_attention(trace),
                       delimiter="\t", fmt="%.8g")
    print(f"wrote {len(preds)} predictions to {out / 'predictions.tsv'}")
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    method = cfg.method
    if method not in ("chance", "frame", "video"):
        raise ConfigError(f"baseline method must be chance, frame or video, got {method!r}")
    data = _load_data(cfg)
    records = _records(cfg, data)
    out = _out_dir(cfg)
    preds = _predict(cfg, data, records, out, method)
    write_predictions(out / f"predictions_{method}.tsv", records, preds, method)
    print(f"wrote {len(preds)} {method} predictions")
    return EXIT_OK


def gradcheck_report(seed: int = 0, d: int = 5, l: int = 8, k: int = 2, q: int = 5, r: int = 7,
                     tol: float = 1e-4) -> ad.GradCheckReport:
    rng = np.random.default_rng(seed)
    params = ModelParams.init(d, l, k, seed=seed)
    Q = rng.standard_normal((d, q))
    R = rng.standard_normal((d, r))
    s = int(rng.integers(1, r + 1))
    gt = Segment(s, int(rng.integers(s, r + 1)))
    labels = make_labels(r, gt)

    def f():
        probs, _ = forward(params, Q, R)
        return weighted_loss(probs, labels, 10.0)

    return ad.grad_check(f, params.named_blocks(), eps=1e-5, tol=tol, precision="extended")


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = gradcheck_report(seed=cfg.seed)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset directory or manifest path")
    common.add_argument("--ckpt", help="checkpoint path")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=["model", "chance", "frame", "video"])
    common.add_argument("--jobs", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vreloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--preds", help="evaluate an existing prediction TSV instead")
    return parser


def _overrides(args) -> dict[str, str]:
    over: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for key in ("seed", "data", "ckpt", "out", "method", "jobs"):
        val = getattr(args, key)
        if val is not None:
            over[key] = str(val)
    return over


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FormatError, CheckpointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, SynthConfigError, ad.ContractError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
