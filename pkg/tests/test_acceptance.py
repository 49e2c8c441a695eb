"""Acceptance suite: one recorded PASS/FAIL line per criterion, at the stated tolerances."""

import math
import time

import numpy as np
import pytest

from vreloc.baselines import run_baseline
from vreloc.cli import gradcheck_report, main
from vreloc.config import RunConfig
from vreloc.data import (
    BadMagicError, SplitOverlapError, SynthConfig, TruncatedPayloadError,
    decode_features, encode_features, load_manifest, synthesize, write_dataset,
)
from vreloc.inference import DecodeConfig, Segment, brute_force_decode, decode
from vreloc.layers import BilinearParams, bilinear_expansion, bilinear_match
from vreloc.autodiff import Tensor
from vreloc.metrics import chance_expectation, evaluate
from vreloc.training import evaluate_model, loss_value, make_labels, train


def test_1_full_model_gradient_check(accept):
    t0 = time.perf_counter()
    report = gradcheck_report(seed=0, d=5, l=8, k=2, q=5, r=7, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst_block = max(report.max_rel_err, key=report.max_rel_err.get)
    ok = report.passed and elapsed < 60
    accept(1, ok, f"max rel err {report.worst:.2e} ({worst_block}) over "
                  f"{len(report.max_rel_err)} blocks, tol 1e-4; {elapsed:.1f}s < 60s")
    assert ok, report.lines()


def test_2_factorization_identity(accept):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        l, k = int(rng.integers(2, 12)), int(rng.integers(1, 6))
        p = BilinearParams.init(rng, l, k)
        p.bf.data = rng.standard_normal(p.bf.shape)
        hq, hr = rng.standard_normal(l), rng.standard_normal(l)
        t = bilinear_match(p, Tensor(hq), Tensor(hr)).data
        worst = max(worst, float(np.max(np.abs(t - bilinear_expansion(p, hq, hr)))))
    counts = all(BilinearParams.init(rng, l, k).num_scalars() == k * l * (l + 1)
                 for l, k in [(8, 2), (32, 4), (128, 8), (5, 1)])
    ok = worst <= 1e-10 and counts
    accept(2, ok, f"max |match - expansion| {worst:.1e} <= 1e-10 on 100 draws; "
                  f"scalar count k*l*(l+1): {counts}")
    assert ok


def test_3_decoder_equivalence(accept):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches, worst = 0, 0.0
    for _ in range(200):
        r = int(rng.integers(1, 21))
        cfg = DecodeConfig(int(rng.integers(1, 25)))
        P = rng.dirichlet(np.ones(4), size=r).T
        (a, sa), (b, sb) = decode(P, cfg), brute_force_decode(P, cfg)
        mismatches += a != b
        worst = max(worst, abs(sa - sb))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 1e-12 and elapsed < 10
    accept(3, ok, f"{200 - mismatches}/200 exact segment matches, max log-score diff {worst:.1e} "
                  f"<= 1e-12; {elapsed:.2f}s < 10s")
    assert ok


def test_4_label_and_loss_exactness(accept):
    g = make_labels(5, Segment(2, 4))
    single = make_labels(3, Segment(2, 2))
    labels_ok = (g[1].tolist() == [0.5, 0.0, 0.5, 0.0] and g[3].tolist() == [0.0, 0.5, 0.5, 0.0]
                 and single[1].tolist() == [1 / 3, 1 / 3, 1 / 3, 0.0])
    loss = loss_value(np.full((4, 3), 0.25), single, 10.0)
    err = abs(loss - 4 * math.log(4))
    ok = labels_ok and err < 1e-9
    accept(4, ok, f"label vectors verbatim: {labels_ok}; uniform loss {loss:.12f} vs 4 log 4, "
                  f"|diff| {err:.1e} < 1e-9")
    assert ok


def test_5_baseline_sanity(accept):
    noiseless = SynthConfig(sigma=0.0, warp_min=1.0, warp_max=1.0, background="orthogonal",
                            n_distractors=0, nuisance=0.0, d=32)
    ds = synthesize(noiseless)
    dcfg = DecodeConfig()
    frame = evaluate([s for s, _ in run_baseline("frame", ds.test, dcfg)], [r.gt for r in ds.test])

    test = synthesize(RunConfig().synth()).test
    chance = evaluate([s for s, _ in run_baseline("chance", test, dcfg, seed=0)],
                      [r.gt for r in test])
    expected = chance_expectation([(r.r, r.gt) for r in test], dcfg)
    rel = abs(chance.average - expected.average) / expected.average
    ok = round(100 * frame.average, 1) == 100.0 and rel <= 0.5
    accept(5, ok, f"noiseless frame-level avg mAP {100 * frame.average:.1f} (need 100.0); "
                  f"chance {100 * chance.average:.2f} vs enumerated {100 * expected.average:.2f} "
                  f"(rel. diff {rel:.0%} <= 50%)")
    assert ok


def test_6_end_to_end_learning(accept):
    cfg = RunConfig()
    t0 = time.perf_counter()
    ds = synthesize(cfg.synth())
    result = train(cfg.train(), ds)
    dcfg = cfg.decode()
    gts = [r.gt for r in ds.test]
    model = evaluate_model(result.params, ds.test, dcfg).average
    frame = evaluate([s for s, _ in run_baseline("frame", ds.test, dcfg)], gts).average
    chance = evaluate([s for s, _ in run_baseline("chance", ds.test, dcfg, seed=cfg.seed)], gts).average
    elapsed = time.perf_counter() - t0
    first, last = result.log[0].mean_train_loss, result.log[-1].mean_train_loss
    a = last < 0.5 * first
    b = model >= 3 * chance
    c = chance < frame < model
    ok = a and b and c and elapsed < 1800
    accept(6, ok, f"(a) loss {first:.3f} -> {last:.3f} at epoch {len(result.log)} ({a}); "
                  f"(b) model {100 * model:.1f} >= 3 x chance {100 * chance:.1f} ({b}); "
                  f"(c) chance {100 * chance:.1f} < frame {100 * frame:.1f} < model "
                  f"{100 * model:.1f} ({c}); {elapsed / 60:.1f} min < 30 min")
    assert ok


def test_7_determinism(tmp_path, accept):
    small = ["--seed", "5", "--set", "n_classes=10", "--set", "segments_per_class=3",
             "--set", "l=8", "--set", "k=2", "--set", "epochs=2"]
    files = ("metrics.tsv", "predictions.tsv", "results.tsv", "model.vrlc")
    for run in ("a", "b"):
        data, out = tmp_path / run / "data", tmp_path / run / "out"
        assert main(["synth", "--out", str(data)] + small) == 0
        assert main(["train", "--data", str(data), "--out", str(out)] + small) == 0
        assert main(["eval", "--data", str(data), "--out", str(out)] + small) == 0
    same = {f: (tmp_path / "a" / "out" / f).read_bytes() == (tmp_path / "b" / "out" / f).read_bytes()
            for f in files}
    ok = all(same.values())
    accept(7, ok, "byte-identical across two synth+train+eval runs: "
                  + ", ".join(f"{f} {v}" for f, v in same.items()))
    assert ok


def test_8_format_robustness(tmp_path, accept):
    x = np.random.default_rng(8).standard_normal((7, 11)).astype(np.float32)
    raw = encode_features(x)
    features_exact = decode_features(raw).tobytes() == x.tobytes()

    ds = synthesize(SynthConfig(n_classes=5, segments_per_class=2))
    write_dataset(ds, tmp_path / "d")
    back = load_manifest(tmp_path / "d")
    manifest_exact = all(back.split(s) == ds.split(s) for s in ("train", "val", "test"))

    def raised(fn):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - we want the concrete type
            return type(exc)
        return None

    bad_magic = raised(lambda: decode_features(b"XXXXX" + raw[5:]))
    truncated = raised(lambda: decode_features(raw[:-4]))
    manifest = tmp_path / "d" / "manifest.tsv"
    lines = manifest.read_text().splitlines()
    train_row = next(line for line in lines[1:] if line.split("\t")[1] == "train")
    test_class = next(line for line in lines[1:] if line.split("\t")[1] == "test").split("\t")[2]
    f = train_row.split("\t")
    f[0], f[1], f[2] = "dup", "test", f[2]
    manifest.write_text("\n".join(lines + ["\t".join(f)]) + "\n")
    overlap = raised(lambda: load_manifest(manifest))
    errors = (bad_magic, truncated, overlap)
    expected = (BadMagicError, TruncatedPayloadError, SplitOverlapError)
    distinct = errors == expected and len(set(errors)) == 3
    ok = features_exact and manifest_exact and distinct and test_class is not None
    accept(8, ok, f"feature round-trip exact {features_exact}, manifest round-trip exact "
                  f"{manifest_exact}; errors {[e.__name__ if e else None for e in errors]}")
    assert ok
