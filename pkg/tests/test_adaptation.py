import numpy as np
import pytest

import pansharp.adaptation as A
from pansharp.adaptation import Adam, AdaptationConfig, pretrain, sample_loss, target_adapt
from pansharp.coregistration import CoregistrationProduct, estimate_band_shifts, shift_grid
from pansharp.errors import ContractViolation, NumericFailure
from pansharp.loss import LossConfig
from pansharp.metrics import CorrelationField
from pansharp.model import init_model
from pansharp.raster import SensorSpec, make_synthetic_scene, upsample_poly23
from pansharp.tiles import select_tiles

SPEC = SensorSpec.default(4)


@pytest.fixture(scope="module")
def pair():
    gt, pan, ms, _ = make_synthetic_scene(2, 64, band_shifts=[(0, 0), (1, 0), (0, -0.5), (0, 0)])
    return pan.values, ms.values, estimate_band_shifts(pan, ms, SPEC)


def _w(seed=0):
    return init_model(4, seed=seed, width=8, reduction=4)


def _same(a, b):
    return list(a.params) == list(b.params) and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_config_validation():
    with pytest.raises(ContractViolation):
        AdaptationConfig(lr=0)
    with pytest.raises(ContractViolation):
        AdaptationConfig(precision="float16")


def test_adam_matches_scalar_loop():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    params = {"x": p0.copy()}
    opt = Adam(params, lr=0.1)
    for g in grads:
        opt.step(params, {"x": g})
    for i in range(5):
        x, m, v = p0[i], 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g[i]
            v = 0.999 * v + 0.001 * g[i] ** 2
            x -= 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert params["x"][i] == pytest.approx(x, abs=1e-14)


def test_zero_iterations_returns_input(pair):
    pan, ms, prod = pair
    w = _w()
    res = target_adapt(w, pan, ms, prod, SPEC, AdaptationConfig(iterations=0))
    assert res.trajectory == [] and _same(res.weights, w)


def test_adaptation_descends_and_logs(pair, tmp_path):
    pan, ms, prod = pair
    cfg = AdaptationConfig(iterations=15, lr=5e-4, precision="float64")
    res = target_adapt(_w(), pan, ms, prod, SPEC, cfg, timing=False)
    totals = [r["total"] for r in res.trajectory]
    assert len(totals) == 15 and [r["iter"] for r in res.trajectory] == list(range(15))
    assert totals[-1] < totals[0]
    res.write_log(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 15 and '"wall_ms": null' in lines[0]
    assert set(res.trajectory[0]) == {"iter", "total", "d_lambda", "ergas", "spatial", "wall_ms"}


def test_deterministic(pair):
    pan, ms, prod = pair
    cfg = AdaptationConfig(iterations=4, lr=1e-3)
    a = target_adapt(_w(1), pan, ms, prod, SPEC, cfg, timing=False)
    b = target_adapt(_w(1), pan, ms, prod, SPEC, cfg, timing=False)
    assert _same(a.weights, b.weights) and a.trajectory == b.trajectory


def test_single_crop_pretraining_equals_target_adapt(pair):
    pan, ms, prod = pair
    cfg = AdaptationConfig(iterations=3, lr=1e-3, seed=5)
    a = pretrain(_w(), [(pan, ms)], SPEC, cfg, products=[prod], timing=False)
    b = target_adapt(_w(), pan, ms, prod, SPEC, cfg, timing=False)
    assert _same(a.weights, b.weights)
    assert a.trajectory == b.trajectory


def test_pretraining_descends_on_eight_crops():
    crops = []
    for s in range(8):
        _, pan, ms, _ = make_synthetic_scene(100 + s, 48)
        crops.append((pan.values, ms.values))
    cfg = AdaptationConfig(iterations=20, lr=1e-3, seed=0)
    res = pretrain(_w(), crops, SPEC, cfg, timing=False)
    totals = np.array([r["total"] for r in res.trajectory]).reshape(20, 8).mean(axis=1)
    assert totals[-10:].mean() < totals[:10].mean()
    with pytest.raises(ContractViolation):
        pretrain(_w(), [], SPEC, cfg)


def test_nan_aborts_with_last_good_weights(pair, monkeypatch):
    pan, ms, prod = pair
    cfg = AdaptationConfig(iterations=5, lr=1e-3)
    two = target_adapt(_w(), pan, ms, prod, SPEC, AdaptationConfig(iterations=2, lr=1e-3), timing=False)
    real = A.sample_loss
    calls = []

    def poisoned(weights, samples, dtype=np.float64, with_grad=True):
        br, grads = real(weights, samples, dtype, with_grad)
        calls.append(1)
        if len(calls) == 3:
            grads["out.b"][...] = np.nan
        return br, grads

    monkeypatch.setattr(A, "sample_loss", poisoned)
    with pytest.raises(NumericFailure) as err:
        target_adapt(_w(), pan, ms, prod, SPEC, cfg, timing=False)
    assert err.value.iteration == 2
    last = err.value.last_weights
    for k in last.params:
        assert np.array_equal(last.params[k], two.weights.params[k])


def test_tile_adaptation_uses_fixed_crops(pair):
    pan, ms, prod = pair
    cfg = AdaptationConfig(iterations=2, lr=1e-3, tile_size=32, n_clusters=2, batch_tiles=2)
    tiles = select_tiles(pan, upsample_poly23(ms, 4), SPEC, cfg)
    res = target_adapt(_w(), pan, ms, prod, SPEC, cfg, tiles=tiles, timing=False)
    assert len(res.trajectory) == 2
    samples = A.build_samples(pan, ms, prod, SPEC, LossConfig(), tiles.anchors, tiles.size)
    assert all(s.pan.shape == (1, 1, 32, 32) for s in samples)
    assert np.isfinite(sample_loss(_w(), samples, with_grad=False)[0].total)


def _fake_pair(size, seed):
    rng = np.random.default_rng(seed)
    pan = rng.uniform(100, 1000, (size, size))
    ms = rng.uniform(100, 1000, (4, size // 4, size // 4))
    rho = CorrelationField(rng.uniform(0, 1, (4, size, size)), np.ones((4, size, size), bool), 16)
    return pan, ms, CoregistrationProduct(np.zeros((4, 2)), rho, np.zeros((4, 13, 13)), shift_grid())


def test_fast_iteration_cost_independent_of_image_size():
    cfg = AdaptationConfig(iterations=6, lr=1e-3, tile_size=64, n_clusters=4, batch_tiles=4)
    per_iter = []
    for size in (256, 768):
        pan, ms, prod = _fake_pair(size, size)
        anchors = A.tile_anchors(size, size, 64)[:: max(1, (size // 64) ** 2 // 4)][:4]
        samples = A.build_samples(pan, ms, prod, SPEC, LossConfig(), anchors, 64)
        res = A.run_adaptation(_w(), samples, cfg, batch=4)
        per_iter.append(np.median([r["wall_ms"] for r in res.trajectory[1:]]))
    assert max(per_iter) / min(per_iter) < 1.5
