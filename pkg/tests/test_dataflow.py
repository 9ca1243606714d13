import numpy as np
import pytest

from cqids.cqmlp import init_model
from cqids.dataflow import (StreamlineError, bench, check_equivalence, load_pipeline,
                            real_thresholds, save_pipeline, streamline)
from cqids.traffic_sim import simulate


def unit_model(gamma=1.0, bias=0.0):
    """40 -> 1 -> 4 model whose accumulator equals byte 0 of the block.

    Weight scale 128 against input scale 1/128 makes the combined scale 1,
    batch-norm is the identity and the activation step is 1.
    """
    m = init_model((40, 1, 4), bits=2, seed=0)
    m.weights[0][:] = 0
    m.weights[0][0, 0] = 128.0
    m.weight_scales[0] = 128.0
    m.running_mean[0][:] = 0.0
    m.running_var[0][:] = 1.0 - m.eps
    m.gamma[0][:] = gamma
    m.beta[0][:] = 0.0
    m.biases[0][:] = bias
    m.act_scales[0] = 1.0
    return m


def block_with(z):
    b = np.zeros((1, 40), np.int8)
    b[0, 0] = z
    return b


def random_model(bits, seed, dims=(40, 32, 16, 4)):
    rng = np.random.default_rng(seed)
    m = init_model(dims, bits=bits, seed=seed)
    for i in range(m.n_layers - 1):
        n = dims[i + 1]
        m.gamma[i] = rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
        m.beta[i] = rng.normal(0, 0.5, n)
    for b in m.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    m.momentum = 1.0
    m.forward(rng.integers(-128, 128, (512, 40)).astype(np.int8), "fake_quant", "train")
    m.momentum = 0.1
    return m


def test_unit_thresholds():
    pipe = streamline(unit_model())
    assert pipe.hidden[0].thresholds.tolist() == [[1, 2, 3]]
    _, trace = pipe.run_int(np.concatenate([block_with(z) for z in (0, 1, 2, 9, -5)]))
    assert trace[0][:, 0].tolist() == [0, 1, 2, 3, 0]


def test_mirrored_channel():
    pipe = streamline(unit_model(gamma=-1.0))
    assert pipe.hidden[0].mirrored.tolist() == [True]
    _, trace = pipe.run_int(np.concatenate([block_with(z) for z in (-2, 0, 2, -100)]))
    assert trace[0][:, 0].tolist() == [2, 0, 0, 3]


def test_bias_shifts_thresholds():
    pipe = streamline(unit_model(bias=1.0))
    assert pipe.hidden[0].thresholds.tolist() == [[0, 1, 2]]


def test_real_thresholds_diagnostic():
    assert np.allclose(real_thresholds(unit_model(), 0), [[0.5, 1.5, 2.5]], atol=1e-9)


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_bit_exact_against_fake_quant(bits):
    rng = np.random.default_rng(bits)
    blocks = rng.integers(-128, 128, (3000, 40)).astype(np.int8)
    for seed in range(3):
        m = random_model(bits, seed)
        pipe = streamline(m)
        assert check_equivalence(pipe, m, blocks) == []
        for layer in pipe.hidden:
            assert np.all(np.diff(layer.thresholds, axis=1) >= 0)
            assert layer.weights.dtype == np.int32


def test_all_zero_block():
    m = random_model(2, 9)
    pipe = streamline(m)
    zero = np.zeros((1, 40), np.int8)
    assert check_equivalence(pipe, m, zero) == []
    assert pipe.predict(zero)[0] == m.predict(zero)[0]


def test_levels_monotone_in_accumulator():
    m = random_model(3, 4)
    layer = streamline(m).hidden[0]
    acc = np.arange(-3000, 3000)
    levels = (acc[:, None, None] >= layer.thresholds[None]).sum(axis=2)
    assert np.all(np.diff(levels, axis=0) >= 0)


def test_zero_gamma_rejected():
    m = random_model(2, 1)
    m.gamma[1][5] = 0.0
    with pytest.raises(StreamlineError, match="layer 1 channel 5"):
        streamline(m)


def test_bad_variance_rejected():
    m = random_model(2, 1)
    m.running_var[0][2] = -1.0
    with pytest.raises(StreamlineError, match="layer 0 channel 2"):
        streamline(m)


def test_save_reload(tmp_path):
    m = random_model(3, 2)
    pipe = streamline(m)
    p = tmp_path / "pipe.json"
    save_pipeline(pipe, p)
    back = load_pipeline(p)
    blocks = np.random.default_rng(0).integers(-128, 128, (500, 40)).astype(np.int8)
    a, ta = pipe.run_int(blocks)
    b, tb = back.run_int(blocks)
    assert np.array_equal(a, b)
    assert all(np.array_equal(x, y) for x, y in zip(ta, tb))
    p.write_text(p.read_text().replace('"bits', '"bitz', 1))
    with pytest.raises(ValueError):
        load_pipeline(p)


def test_bench_per_block():
    pipe = streamline(random_model(2, 0))
    blocks = np.random.default_rng(1).integers(-128, 128, (200, 40)).astype(np.int8)
    rep = bench(pipe, blocks)
    assert rep.blocks == 200 and len(rep.latencies) == 200
    assert rep.throughput == pytest.approx(200 / rep.wall_time)
    assert rep.throughput > 0
    assert rep.median_latency <= rep.p99_latency
    assert bench(pipe, blocks, workers=2).blocks == 200


def test_bench_sliding_counts():
    pipe = streamline(random_model(2, 0))
    frames = simulate("dos", 0.2, seed=1)
    rep = bench(pipe, frames, "per_message_sliding")
    assert rep.blocks == len(frames) - 3
    assert "classifications" in rep.summary()
    with pytest.raises(ValueError):
        bench(pipe, frames[:3], "per_message_sliding")
    with pytest.raises(ValueError):
        bench(pipe, np.zeros((0, 40), np.int8))


def test_blas_matmul_is_exact_integer_product():
    from cqids.dataflow import _int_matmul
    rng = np.random.default_rng(0)
    x = rng.integers(-128, 128, (300, 256)).astype(np.int32)
    w = rng.integers(-7, 8, (256, 128)).astype(np.int32)
    got = _int_matmul(x, w)
    assert got.dtype == np.int32
    assert np.array_equal(got, x @ w)
