"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import shutil
import time

import numpy as np
import pytest

import oracles
from conftest import record_criterion
from pansharp.adaptation import AdaptationConfig, sample_loss, target_adapt, whole_image_samples
from pansharp.checks import detach_blocks_gradient, loss_reports, op_reports
from pansharp.coregistration import estimate_band_shifts, reference_correlation_field, shift_grid
from pansharp.loss import LossConfig
from pansharp.metrics import (MetricConfig, corrcoef, d_lambda_khan, d_rho, ergas, local_correlation_field, q2n,
                              uiqi)
from pansharp.model import forward, init_model
from pansharp.pipeline import quality_report
from pansharp.raster import SensorSpec, make_synthetic_scene, upsample_poly23
from pansharp.tiles import select_tiles

SPEC = SensorSpec.default(4)


def test_criterion_1_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for bands, size in ((4, 128), (8, 64), (3, 96), (1, 64)):
        x = rng.uniform(50, 2000, (bands, size, size))
        cfg = MetricConfig()
        worst = max(worst, ergas(x, x, 4), abs(1 - uiqi(x, x, cfg)), abs(1 - q2n(x, x, cfg)),
                    abs(d_lambda_khan(x, x, cfg)))
        for b in range(bands):
            a, c = rng.uniform(0.1, 10), rng.uniform(-500, 500)
            worst = max(worst, abs(1 - corrcoef(x[b], a * x[b] + c)))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-9 and seconds < 10
    assert record_criterion(1, ok, f"max identity error {worst:.2e} (< 1e-9), {seconds:.1f} s (< 10 s)")


def test_criterion_2_oracle_equivalence():
    worst = {"field": 0.0, "uiqi": 0.0, "d_rho": 0.0}
    rng = np.random.default_rng(2)
    for seed in range(50):
        gt, pan, ms, _ = make_synthetic_scene(500 + seed, 64)
        p, g = pan.values.astype(np.float64), gt.values.astype(np.float64)
        fused = g + rng.normal(0, 20, g.shape)
        field = local_correlation_field(p, fused, 4)
        vals, mask = field.valid_domain()
        ref, ok = oracles.correlation_field(p, fused, 4)
        assert np.array_equal(mask, ok)
        worst["field"] = max(worst["field"], float(np.abs(vals - ref).max()))
        cfg = MetricConfig(window=16, stride=16)
        worst["uiqi"] = max(worst["uiqi"], abs(uiqi(fused, g, cfg) - oracles.uiqi(fused, g, 16, 16)))
        rho_max = reference_correlation_field(p, ms, SPEC)
        s = 4
        crop = (slice(None), slice(s // 2, s // 2 + 64 - s + 1), slice(s // 2, s // 2 + 64 - s + 1))
        naive = oracles.d_rho(fused, p, rho_max.values[crop], rho_max.mask[crop], s)
        worst["d_rho"] = max(worst["d_rho"], abs(d_rho(fused, p, rho_max, s) - naive))
    ok = max(worst.values()) < 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record_criterion(2, ok, f"50 scenes, max |diff| {detail} (< 1e-6)")


def test_criterion_3_gradient_integrity():
    t0 = time.perf_counter()
    reports = op_reports(seed=0) + loss_reports(seed=0)
    failed = [name for name, rep in reports if not rep.passed]
    detach_ok = detach_blocks_gradient(0)
    worst = max(rep.max_relative_error for _, rep in reports)
    seconds = time.perf_counter() - t0
    ok = not failed and detach_ok and seconds < 120
    detail = (f"{len(reports)} checks, max rel. error {worst:.1e} (< 1e-3), detach {'ok' if detach_ok else 'leaks'}, "
              f"{seconds:.0f} s (< 120 s)" + (f", failed: {failed}" if failed else ""))
    assert record_criterion(3, ok, detail)


def test_criterion_4_shift_recovery():
    grid = shift_grid()
    hits = total = 0
    for k in range(100):
        rng = np.random.default_rng(4000 + k)
        shifts = [(float(rng.choice(grid)), float(rng.choice(grid))) for _ in range(4)]
        gt, pan, ms, _ = make_synthetic_scene(4000 + k, 256, band_shifts=shifts)
        prod = estimate_band_shifts(pan, ms, SPEC)
        for b in range(4):
            if not prod.rho_max.mask[b].any():
                continue
            total += 1
            hits += bool(np.array_equal(prod.alignment[b], shifts[b]))
    rate = hits / total
    assert record_criterion(4, rate >= 0.95, f"{hits}/{total} bands recovered exactly ({rate:.1%}, >= 95%)")


def _scores(weights, pan, ms, up, prod):
    return quality_report(forward(weights, pan, up), pan, ms, SPEC, prod)


def test_criterion_5_alignment_ordering():
    t0 = time.perf_counter()
    gt, pan, ms, _ = make_synthetic_scene(1, 128, band_shifts=[(0, 0), (2, 1), (-1.5, 2.5), (1, -2)])
    pan, ms = pan.values.astype(np.float64), ms.values.astype(np.float64)
    up = upsample_poly23(ms, 4)
    aligned = estimate_band_shifts(pan, ms, SPEC, ms_up=up)
    plain = estimate_band_shifts(pan, ms, SPEC, ms_up=up, align=False)
    w0 = init_model(4, seed=0, width=32)
    cfg = AdaptationConfig(iterations=100, lr=5e-4)
    finals = {}
    for align, prod in ((True, aligned), (False, plain)):
        res = target_adapt(w0, pan, ms, prod, SPEC, cfg, LossConfig(align=align), ms_up=up)
        # both runs are scored the same way, with the estimated shifts
        finals[align] = _scores(res.weights, pan, ms, up, aligned)
    seconds = time.perf_counter() - t0
    a, n = finals[True], finals[False]
    ok = a["d_lambda_align"] < n["d_lambda_align"] and a["d_rho"] <= n["d_rho"] and seconds < 600
    detail = (f"d_lambda_align aligned {a['d_lambda_align']:.4f} < unaligned {n['d_lambda_align']:.4f}; "
              f"d_rho {a['d_rho']:.4f} <= {n['d_rho']:.4f}; {seconds:.0f} s (< 600 s)")
    assert record_criterion(5, ok, detail)


def test_criterion_6_end_to_end_descent():
    gt, pan, ms, _ = make_synthetic_scene(0, 256, band_shifts=[(0, 0), (1, 0.5), (-1.5, 2), (0.5, -0.5)])
    pan, ms, gt = pan.values.astype(np.float64), ms.values.astype(np.float64), gt.values.astype(np.float64)
    up = upsample_poly23(ms, 4)
    prod = estimate_band_shifts(pan, ms, SPEC, ms_up=up)
    exp = quality_report(up, pan, ms, SPEC, prod)
    res = target_adapt(init_model(4, seed=0, width=32), pan, ms, prod, SPEC,
                       AdaptationConfig(iterations=200, lr=5e-4), ms_up=up)
    fused = forward(res.weights, pan, up)
    rep = quality_report(fused, pan, ms, SPEC, prod)
    first, last = res.trajectory[0]["total"], res.trajectory[-1]["total"]
    drop = 1 - last / first
    gain = exp["d_rho"] / rep["d_rho"]
    e_exp, e_ta = ergas(up, gt, 4), ergas(fused, gt, 4)
    ok = (drop >= 0.5 and gain >= 5 and rep["d_lambda_align"] <= 1.5 * exp["d_lambda_align"] and e_ta < e_exp)
    detail = (f"loss {first:.3f} -> {last:.3f} ({drop:.0%} drop, >= 50%); d_rho EXP/TA {gain:.1f}x (>= 5x); "
              f"d_lambda_align {rep['d_lambda_align']:.4f} vs EXP {exp['d_lambda_align']:.4f} (<= 1.5x); "
              f"ERGAS vs truth {e_ta:.2f} < EXP {e_exp:.2f}")
    assert record_criterion(6, ok, detail)


def test_criterion_7_fast_adaptation():
    gt, pan, ms, _ = make_synthetic_scene(7, 2048, band_shifts=[(0, 0), (1, -0.5), (-1, 1), (0.5, 0)])
    pan, ms = pan.values.astype(np.float64), ms.values.astype(np.float64)
    del gt
    up = upsample_poly23(ms, 4)
    prod = estimate_band_shifts(pan, ms, SPEC, ms_up=up)
    w0 = init_model(4, seed=0, width=16)
    cfg = AdaptationConfig(iterations=20, lr=5e-4, tile_size=256, n_clusters=16)
    loss_cfg = LossConfig()

    t0 = time.perf_counter()
    tiles = select_tiles(pan, up, SPEC, cfg)
    fast = target_adapt(w0, pan, ms, prod, SPEC, cfg, loss_cfg, tiles=tiles, ms_up=up)
    t_fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    whole = target_adapt(w0, pan, ms, prod, SPEC, cfg, loss_cfg, ms_up=up)
    t_whole = time.perf_counter() - t0

    # final losses are both measured on the whole image
    samples = whole_image_samples(pan, ms, prod, SPEC, loss_cfg, cfg, ms_up=up)
    l_fast = sample_loss(fast.weights, samples, cfg.dtype, with_grad=False)[0].total
    l_whole = sample_loss(whole.weights, samples, cfg.dtype, with_grad=False)[0].total
    l_init = whole.trajectory[0]["total"]
    speedup, gap = t_whole / t_fast, abs(l_fast - l_whole) / l_whole
    ok = len(tiles.anchors) == 16 and speedup >= 5 and gap <= 0.10
    detail = (f"{len(tiles.candidates)} candidate tiles, {len(tiles.anchors)} selected; fast {t_fast:.0f} s vs "
              f"whole {t_whole:.0f} s ({speedup:.1f}x, >= 5x); whole-image loss {l_init:.4f} -> fast {l_fast:.4f}, "
              f"whole {l_whole:.4f} (gap {gap:.1%}, <= 10%)")
    assert record_criterion(7, ok, detail)


def test_criterion_8_architecture():
    w = init_model(4, seed=0)
    trunk = len(w.trunk_conv_names())
    attention = len({k.split(".")[0] for k in w.params if k.startswith("att")})
    _, pan, ms, _ = make_synthetic_scene(8, 64)
    up = upsample_poly23(ms.values, 4)
    exact = all(np.array_equal(forward(w.zero_trunk(), pan.values, up, dtype=dt), up)
                for dt in (np.float32, np.float64))
    out = forward(w, pan.values, up)
    shape_ok = out.shape == (4, 4 * ms.values.shape[1], 4 * ms.values.shape[2])
    ok = trunk == 7 and attention == 2 and exact and shape_ok
    detail = (f"{trunk} trunk convs, {attention} attention modules, zero-trunk == MS_up bit-exact: {exact}, "
              f"output {out.shape} from MS {ms.values.shape}")
    assert record_criterion(8, ok, detail)


def test_criterion_9_cli_determinism(tmp_path, capsys):
    from pansharp.cli import main

    scene = tmp_path / "scene"
    assert main(["synth", "--out", str(scene), "--size", "64", "--seed", "3", "--random-shifts"]) == 0
    pair = ["--pan", str(scene / "pan.json"), "--ms", str(scene / "ms.json")]
    assert main(["init", "--bands", "4", "--out", str(tmp_path / "w"), "--model.width=8"]) == 0
    weights = ["--weights", str(tmp_path / "w.json")]
    commands = {
        "synth": ["synth", "--size", "64", "--seed", "5", "--random-shifts"],
        "init": ["init", "--bands", "4", "--model.width=8"],
        "align": ["align", *pair],
        "select-tiles": ["select-tiles", *pair, "--adaptation.tile_size=16", "--adaptation.n_clusters=4"],
        "adapt": ["adapt", *pair, *weights, "--iterations", "3"],
        "pansharpen": ["pansharpen", *pair, *weights, "--adapt", "2"],
        "metrics": ["metrics", *pair, "--fused", str(scene / "gt.json")],
        "gradcheck": ["gradcheck"],
    }
    differ = []
    for name, argv in commands.items():
        runs = []
        out = tmp_path / name
        for _ in range(2):
            # same output path both times, so printed paths compare equal too
            shutil.rmtree(out, ignore_errors=True)
            target = str(out / "weights") if name == "init" else str(out / "report.json") if name == "metrics" \
                else str(out)
            extra = [] if name == "gradcheck" else ["--out", target]
            capsys.readouterr()
            code = main([*argv, *extra, "--threads", "1", "--seed", "11"])
            stdout = capsys.readouterr().out
            files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()} \
                if out.exists() else {}
            runs.append((code, stdout, files))
        if runs[0] != runs[1] or runs[0][0] != 0:
            differ.append(name)
    ok = not differ
    detail = f"{len(commands)} commands run twice with --threads 1: " + (
        "all outputs byte-identical" if ok else f"differences in {differ}")
    assert record_criterion(9, ok, detail)
