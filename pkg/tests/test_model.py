import numpy as np
import pytest

from pansharp import engine as E
from pansharp.engine import grad_check
from pansharp.errors import ContractViolation, MalformedHeader
from pansharp.model import ModelWeights, forward, forward_tensors, init_model, rcbam, resblock
from pansharp.raster import make_synthetic_scene, upsample_poly23


def _closed_form_count(bands, f=64, red=16, att=7, k=3):
    hidden = f // red
    conv = lambda cout, cin, kk: cout * cin * kk * kk + cout
    trunk = conv(f, bands + 1, k) + conv(f, f, k) + 4 * conv(f, f, k) + conv(bands, f, k)
    cbam = conv(hidden, f, 1) + conv(f, hidden, 1) + conv(1, 2, att)
    return trunk + 2 * cbam


def test_architecture_contract():
    w = init_model(4, seed=0)
    assert len(w.trunk_conv_names()) == 7
    assert w.trunk_conv_names() == ["conv1", "conv2", "res1.conv_a", "res1.conv_b", "res2.conv_a",
                                    "res2.conv_b", "out"]
    attention = {k.split(".")[0] for k in w.params if ".mlp" in k or ".spatial" in k}
    assert attention == {"att1", "att2"}
    assert w.n_params == _closed_form_count(4) == 191250
    assert init_model(8, seed=0).n_params == _closed_form_count(8)


def test_same_seed_same_weights():
    a, b = init_model(4, seed=3, width=16), init_model(4, seed=3, width=16)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = init_model(4, seed=4, width=16)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith(".w"))


@pytest.mark.parametrize("seed", range(3))
def test_initial_output_close_to_skip(seed):
    rng = np.random.default_rng(seed)
    pan = rng.uniform(0, 2047, (64, 64))
    up = rng.uniform(0, 2047, (4, 64, 64))
    out = forward(init_model(4, seed=seed), pan, up)
    assert out.shape == (4, 64, 64)
    assert np.mean(np.abs(out - up)) < 0.05 * 2047


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_zero_trunk_is_identity(dtype):
    gt, pan, ms, _ = make_synthetic_scene(0, 64)
    up = upsample_poly23(ms.values, 4)
    w = init_model(4, seed=1, width=16)
    assert np.array_equal(forward(w.zero_trunk(), pan.values, up, dtype=dtype), up)
    zeros = w.copy()
    for v in zeros.params.values():
        v[:] = 0.0
    assert np.array_equal(forward(zeros, pan.values, up, dtype=dtype), up)


def test_output_shape_and_size_check():
    w = init_model(4, seed=0, width=8)
    assert forward(w, np.ones((24, 20)), np.ones((4, 24, 20))).shape == (4, 24, 20)
    with pytest.raises(ContractViolation):
        forward(w, np.ones((24, 20)), np.ones((4, 20, 24)))
    with pytest.raises(ContractViolation):
        forward(w, np.ones((24, 20)), np.ones((3, 24, 20)))


def _params(w):
    return {k: E.constant(v) for k, v in w.params.items()}


def test_forward_gradients_through_inputs_and_weights():
    rng = np.random.default_rng(5)
    w = init_model(2, seed=5, width=8, reduction=4)
    for v in w.params.values():
        v += 0.05 * rng.standard_normal(v.shape)
    pan = E.constant(rng.uniform(0, 2047, (1, 1, 8, 8)))
    up = rng.uniform(0, 2047, (1, 2, 8, 8))
    proj = E.constant(rng.standard_normal((1, 2, 8, 8)))
    f = lambda x: E.sum_(forward_tensors(w, _params(w), pan, x) * proj)
    rep = grad_check(f, up, step=1e-2)
    assert rep.passed, rep.summary()

    up_t = E.constant(up)

    def through(name):
        def g(x):
            p = _params(w)
            p[name] = x
            return E.sum_(forward_tensors(w, p, pan, up_t) * proj)
        return g

    for name in ("conv1.w", "att1.mlp1.w", "att2.spatial.w", "res2.conv_b.w", "out.b"):
        rep = grad_check(through(name), w.params[name], step=1e-5)
        assert rep.passed, f"{name}: {rep.summary()}"


def test_resblock_properties():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 4, 6, 7))
    p = {"r.conv_a.w": E.constant(np.zeros((4, 4, 3, 3))), "r.conv_a.b": E.constant(np.zeros((1, 4, 1, 1))),
         "r.conv_b.w": E.constant(np.zeros((4, 4, 3, 3))), "r.conv_b.b": E.constant(np.zeros((1, 4, 1, 1)))}
    assert np.array_equal(resblock(p, "r", E.constant(x)).values, x)
    for k in p:
        p[k] = E.constant(rng.standard_normal(p[k].shape) * 0.3)
    rep = grad_check(lambda t: E.sum_(E.square(resblock(p, "r", t))), x)
    assert rep.passed, rep.summary()


def _cbam_params(rng, c=8, hidden=2, k=7, logit_bias=0.0):
    p = {"a.mlp1.w": rng.standard_normal((hidden, c, 1, 1)), "a.mlp1.b": np.zeros((1, hidden, 1, 1)),
         "a.mlp2.w": rng.standard_normal((c, hidden, 1, 1)), "a.mlp2.b": np.full((1, c, 1, 1), logit_bias),
         "a.spatial.w": rng.standard_normal((1, 2, k, k)) * 0.1, "a.spatial.b": np.full((1, 1, 1, 1), logit_bias)}
    return {k: E.constant(v) for k, v in p.items()}


def test_rcbam_saturated_gains_double_the_input():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.1, 1.0, (1, 8, 9, 9))
    p = _cbam_params(rng, logit_bias=1e3)
    p["a.mlp2.w"] = E.constant(np.zeros((8, 2, 1, 1)))
    p["a.spatial.w"] = E.constant(np.zeros((1, 2, 7, 7)))
    assert np.array_equal(rcbam(p, "a", E.constant(x)).values, 2 * x)


def test_rcbam_gains_in_unit_interval_and_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 8, 9, 9))
    p = _cbam_params(rng)
    y = rcbam(p, "a", E.constant(x), residual=False).values
    ratio = y / x
    assert np.all((ratio > 0) & (ratio < 1))
    proj = E.constant(rng.standard_normal(x.shape))
    rep = grad_check(lambda t: E.sum_(rcbam(p, "a", t) * proj), x)
    assert rep.passed, rep.summary()


def test_checkpoint_round_trip(tmp_path):
    w = init_model(4, seed=2, width=8)
    w.save(tmp_path / "w")
    back = ModelWeights.load(tmp_path / "w.json")
    assert back.bands == 4 and back.width == 8 and list(back.params) == list(w.params)
    for k in w.params:
        assert np.array_equal(back.params[k], w.params[k].astype(np.float32).astype(np.float64))
    back.save(tmp_path / "v")
    assert (tmp_path / "v.bin").read_bytes() == (tmp_path / "w.bin").read_bytes()
    with pytest.raises(MalformedHeader):
        ModelWeights.load(tmp_path / "missing")


def test_tiled_forward_matches_whole_image_without_attention():
    rng = np.random.default_rng(9)
    w = init_model(4, seed=9, width=8, variant="b")
    pan, up = rng.uniform(0, 2047, (96, 80)), rng.uniform(0, 2047, (4, 96, 80))
    whole = forward(w, pan, up)
    tiled = forward(w, pan, up, tile=32, halo=16)
    assert np.abs(whole - tiled).max() < 1e-9


def test_ablation_variants():
    rng = np.random.default_rng(10)
    pan, up = rng.uniform(0, 2047, (16, 16)), rng.uniform(0, 2047, (4, 16, 16))
    for v in ("a", "b", "c"):
        w = init_model(4, seed=0, width=8, variant=v)
        assert forward(w, pan, up).shape == (4, 16, 16)
    assert len(init_model(4, variant="a").trunk_conv_names()) == 3
    with pytest.raises(ContractViolation):
        init_model(4, variant="z")
