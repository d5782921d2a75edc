import csv

import numpy as np
import pytest

from dgms import gm_core, infer_rt, layers, packing
from dgms import train as tr
from dgms.model_zoo import QuantPolicy, build_cnn


def gm_with(mu):
    k = len(mu)
    return gm_core.LayerGM.from_values(np.full(k, 1 / k), mu, np.full(k, 0.1), 0.01)


def random_packed(shape, bits, rng, name="w"):
    k1 = 2 ** bits
    mu = np.concatenate([[0.0], rng.normal(size=k1 - 1)]).astype(np.float32).astype(np.float64)
    w = mu[rng.integers(0, k1, shape)]
    return packing.pack_layer(w, gm_with(mu), bits, name), w.astype(np.float32)


def dense_case(seed):
    rng = np.random.default_rng(seed)
    n_out, n_in, batch = (int(v) for v in rng.integers(1, 24, 3))
    layer, w = random_packed((n_out, n_in), int(rng.choice([2, 4])), rng)
    x = rng.normal(size=(batch, n_in)).astype(np.float32)
    return layer, w, x, rng.normal(size=n_out).astype(np.float32)


def conv_case(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w_ = int(rng.integers(k, 12)), int(rng.integers(k, 12))
    ci, co, n = (int(v) for v in rng.integers(1, 6, 3))
    layer, w = random_packed((co, ci, k, k), int(rng.choice([2, 4])), rng)
    x = rng.normal(size=(n, ci, h, w_)).astype(np.float32)
    return layer, w, x, rng.normal(size=co).astype(np.float32), stride, pad


@pytest.mark.parametrize("seed", range(50))
def test_dense_kernel_random_shapes(seed):
    layer, w, x, b = dense_case(seed)
    y = infer_rt.packed_dense_matmul(x, layer, b)
    assert np.array_equal(y, infer_rt.dense_reference(x, w, b))
    assert infer_rt.rel_diff(y, x.astype(np.float64) @ w.T.astype(np.float64) + b) <= 1e-5


@pytest.mark.parametrize("seed", range(50))
def test_conv_kernel_random_shapes(seed):
    layer, w, x, b, s, p = conv_case(seed)
    y = infer_rt.packed_conv2d(x, layer, s, p, b)
    assert np.array_equal(y, infer_rt.conv_reference(x, w, b, s, p))
    naive = layers.conv2d_naive(x.astype(np.float64), w.astype(np.float64), b, s, p)
    assert infer_rt.rel_diff(y, naive) <= 1e-5


def test_acc64_matches_float64_oracle():
    layer, w, x, b = dense_case(99)
    y = infer_rt.packed_dense_matmul(x, layer, b, acc64=True)
    assert y.dtype == np.float64
    assert np.array_equal(y, infer_rt.dense_reference(x, w, b, acc64=True))


def test_permutation_gathers_rows():
    perm = np.array([2, 0, 3, 1])
    w = np.zeros((4, 4))
    w[np.arange(4), perm] = 1.0
    layer = packing.pack_layer(w, gm_with([0.0, 1.0]), 4)
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    assert np.array_equal(infer_rt.packed_dense_matmul(x, layer), x[:, perm])


def test_zero_indices_give_bias():
    layer = packing.pack_layer(np.zeros((3, 5)), gm_with([0.0, 1.0]), 2)
    b = np.array([1.0, -2.0, 0.5], np.float32)
    y = infer_rt.packed_dense_matmul(np.ones((2, 5), np.float32), layer, b)
    assert np.array_equal(y, np.tile(b, (2, 1)))


def test_padding_lanes_contribute_nothing():
    # 3 x 3 weights at 2 bits -> 9 elements, 3 padded lanes in the last byte
    layer = packing.pack_layer(np.ones((3, 3)), gm_with([0.0, 1.0]), 2)
    assert layer.pad == 3
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(infer_rt.packed_dense_matmul(x, layer), np.repeat(x.sum(1)[:, None], 3, 1))


def test_pointwise_conv_sums_channels():
    layer = packing.pack_layer(np.ones((1, 4, 1, 1)), gm_with([0.0, 1.0]), 4)
    x = np.random.default_rng(1).integers(-4, 5, (2, 4, 5, 5)).astype(np.float32)
    y = infer_rt.packed_conv2d(x, layer)
    assert np.array_equal(y[:, 0], x.sum(axis=1))


def test_conv_16x16_matches_naive():
    rng = np.random.default_rng(2)
    layer, w = random_packed((8, 4, 3, 3), 4, rng)
    x = rng.normal(size=(2, 4, 16, 16)).astype(np.float32)
    y = infer_rt.packed_conv2d(x, layer, 1, 1)
    assert infer_rt.rel_diff(y, layers.conv2d_naive(x, w, None, 1, 1)) <= 1e-5


def test_conv_loop_order_keeps_outputs_outermost():
    rng = np.random.default_rng(3)
    layer, _ = random_packed((3, 2, 3, 3), 4, rng)
    x = rng.normal(size=(1, 2, 6, 10)).astype(np.float32)
    trace = np.full((100, 3), -1, np.int64)
    infer_rt.packed_conv2d(x, layer, 1, 1, ow_tile=4, trace=trace)
    oh, ow0, co = (6, [0, 4, 8], 3)
    expected = [(h, t, c) for h in range(oh) for t in ow0 for c in range(co)]
    assert [tuple(r) for r in trace[:len(expected)]] == expected
    assert np.all(trace[len(expected):] == -1)


@pytest.mark.parametrize("tile", [1, 3, 8, 64])
def test_tile_size_does_not_change_result(tile):
    layer, w, x, b, s, p = conv_case(7)
    ref = infer_rt.packed_conv2d(x, layer, s, p, b)
    assert np.array_equal(infer_rt.packed_conv2d(x, layer, s, p, b, ow_tile=tile), ref)


def test_layout_mismatch_rejected():
    rng = np.random.default_rng(4)
    conv, _ = random_packed((2, 2, 3, 3), 4, rng)
    dense, _ = random_packed((2, 3), 4, rng)
    with pytest.raises(ValueError, match="row-major"):
        infer_rt.packed_dense_matmul(np.zeros((1, 18), np.float32), conv)
    with pytest.raises(ValueError, match="output-channel-major"):
        infer_rt.packed_conv2d(np.zeros((1, 2, 4, 4), np.float32), dense)
    with pytest.raises(ValueError, match="incompatible"):
        infer_rt.packed_dense_matmul(np.zeros((1, 4), np.float32), dense)


def test_batchnorm_epilogue():
    rng = np.random.default_rng(5)
    layer, w = random_packed((4, 3, 3, 3), 4, rng)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    scale, shift = rng.uniform(0.5, 2, 4), rng.normal(size=4)
    mean, var = rng.normal(size=4), rng.uniform(0.5, 2, 4)
    y = infer_rt.packed_conv2d(x, layer, 1, 1, epilogue=infer_rt.fold_batchnorm(scale, shift, mean, var),
                               acc64=True)
    ref = layers.batchnorm_forward(layers.conv2d_naive(x.astype(float), w.astype(float), None, 1, 1),
                                   scale, shift, mean, var)
    assert infer_rt.rel_diff(y, ref) <= 1e-12


def test_packed_model_matches_hard_forward():
    spec = build_cnn((3, 16, 16), (4, 4, 8, 8), 5)
    st = tr.TrainState.fresh(spec, 0)
    pol = QuantPolicy.for_model(spec, bits=4)
    tr.init_gms(st, pol, gamma_mode="std", tau=0.01)
    rng = np.random.default_rng(6)
    for k in st.buffers:
        if k.endswith(".mean"):
            st.buffers[k] = rng.normal(size=st.buffers[k].shape) * 0.1
    x = rng.normal(size=(3, 3, 16, 16))
    hard = tr.forward_quantized(x, st, pol, "hard", training=False).logits.data
    packed = {name: packing.pack_layer(gm_core.hard_quantize(st.params[f"{name}.weight"], gm),
                                       gm, 4, name) for name, gm in st.gms.items()}
    y = infer_rt.run_packed_model(spec, st.params, st.buffers, packed, x, acc64=True)
    assert infer_rt.rel_diff(y, hard) <= 1e-5


def bench_cases(rng):
    dl, _ = random_packed((16, 32), 4, rng, "fc")
    cl, _ = random_packed((4, 3, 3, 3), 2, rng, "conv")
    return [("fc", dl, rng.normal(size=(4, 32)), 1, 0),
            ("conv", cl, rng.normal(size=(2, 3, 8, 8)), 1, 1)]


def test_bench_report(tmp_path):
    rep = infer_rt.bench("toy", bench_cases(np.random.default_rng(7)), repeats=3)
    assert not rep.low_confidence
    assert max(rep.max_rel_diff.values()) <= 1e-5
    paths = {(r.layer, r.path): r for r in rep.rows}
    assert set(paths) == {("fc", "dense"), ("fc", "packed"), ("conv", "dense"), ("conv", "packed")}
    assert paths["fc", "dense"].weight_bytes == 16 * 32 * 4
    assert paths["fc", "packed"].weight_bytes == 16 * 32 // 2
    assert paths["conv", "packed"].weight_bytes == -(-108 * 2 // 8)
    out = tmp_path / "bench.csv"
    rep.write_csv(str(out))
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["model", "layer", "path", "batch", "median_us", "iqr_us", "weight_bytes"]
    assert len(rows) == 5


def test_bench_single_repeat_low_confidence():
    rep = infer_rt.bench("toy", bench_cases(np.random.default_rng(8))[:1], repeats=1)
    assert rep.low_confidence and all(r.iqr_us == 0 for r in rep.rows)


@pytest.mark.parametrize("kw", [dict(warmup=2), dict(repeats=0)])
def test_bench_rejects_bad_settings(kw):
    with pytest.raises(ValueError):
        infer_rt.bench("toy", [], **kw)
