import numpy as np
import pytest

from cqids import losses
from cqids.cqmlp import (DEFAULT_DIMS, CqmlpModel, ModelFileError, count_params, dumps_model,
                         init_model, linear_param_count, load_model, loads_model, save_model)
from cqids.qtensor import fake_quant, weight_spec


def rand_blocks(n, seed=0, width=40):
    return np.random.default_rng(seed).integers(-128, 128, (n, width)).astype(np.int8)


def zero_model(dims=(40, 8, 4)):
    m = init_model(dims, bits=2)
    for w in m.weights:
        w[:] = 0
    m.running_var[0][:] = 1.0 - m.eps  # exact identity batch-norm
    return m


def test_parameter_count_default():
    assert count_params(init_model()) == 54_824
    assert linear_param_count(DEFAULT_DIMS) == 53_860
    assert count_params(DEFAULT_DIMS) - linear_param_count(DEFAULT_DIMS) == 960 + 4


def test_parameter_count_toy():
    assert count_params((2, 3, 4)) == 6 + 3 + 12 + 4 + 6 + 1
    m = init_model((2, 3, 4))
    assert sum(p.size for p in m.params().values()) == count_params(m) == 32


def test_params_match_count_formula():
    for dims in [(40, 8, 4), (40, 16, 8, 4), DEFAULT_DIMS]:
        m = init_model(dims)
        assert sum(p.size for p in m.params().values()) == count_params(dims)


def test_all_zero_model_uniform_output():
    m = zero_model()
    for mode in ("real", "fake_quant"):
        logits, probs = m.forward(np.zeros((1, 40), np.int8), mode, "infer")
        assert logits.tolist() == [[0.0, 0.0, 0.0, 0.0]]
        assert probs.tolist() == [[0.25, 0.25, 0.25, 0.25]]


def test_softmax_closed_form():
    p = losses.softmax(np.array([[np.log(2), 0, 0, 0]]))
    assert np.allclose(p, [[0.4, 0.2, 0.2, 0.2]], atol=1e-15)


def test_softmax_simplex_and_determinism():
    m = init_model(seed=3)
    x = rand_blocks(300)
    for mode in ("real", "fake_quant"):
        _, p1 = m.forward(x, mode, "infer")
        _, p2 = m.forward(x, mode, "infer")
        assert np.array_equal(p1, p2)
        assert np.all(p1 > 0)
        assert np.allclose(p1.sum(axis=1), 1.0, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        init_model().forward(np.zeros((2, 39), np.int8))


def test_bn_infer_is_explicit_affine():
    m = init_model((40, 8, 4), seed=1)
    rng = np.random.default_rng(2)
    m.running_mean[0] = rng.normal(size=8)
    m.running_var[0] = rng.uniform(0.5, 2, 8)
    m.gamma[0] = rng.normal(size=8)
    m.beta[0] = rng.normal(size=8)
    x = rand_blocks(20, 5)
    _, _, cache = m.forward(x, "real", "infer", cache=True)
    z = x.astype(float) / 128 @ m.weights[0] + m.biases[0]
    expected = (z - m.running_mean[0]) / np.sqrt(m.running_var[0] + 1e-5) * m.gamma[0] + m.beta[0]
    got = cache["steps"][0]["xhat"] * m.gamma[0] + m.beta[0]
    assert np.allclose(got, expected, rtol=1e-12, atol=1e-12)


def flat_loss(model, x, y, name, idx, value, phase):
    arr = model.params()[name]
    old = arr[idx]
    arr[idx] = value
    _, probs = model.forward(x, "real", phase)
    arr[idx] = old
    return losses.loss_value(probs, y, "bce")


def finite_difference_grads(model, x, y, phase, h=1e-5):
    out = {}
    for name, arr in model.params().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            v = arr[idx]
            g[idx] = (flat_loss(model, x, y, name, idx, v + h, phase)
                      - flat_loss(model, x, y, name, idx, v - h, phase)) / (2 * h)
        out[name] = g
    return out


def rel_err(a: dict, b: dict) -> float:
    keys = [k for k in a if k != "act_scales"]
    va = np.concatenate([a[k].ravel() for k in keys])
    vb = np.concatenate([b[k].ravel() for k in keys])
    return np.linalg.norm(va - vb) / max(np.linalg.norm(va) + np.linalg.norm(vb), 1e-300)


@pytest.mark.parametrize("phase", ["train", "infer"])
def test_backward_matches_finite_differences(phase):
    rng = np.random.default_rng(11)
    m = init_model((40, 8, 4), seed=4)
    m.gamma[0] = rng.uniform(0.5, 1.5, 8)
    m.beta[0] = rng.normal(0, 0.3, 8)
    m.biases[1] = rng.normal(0, 0.1, 4)
    x = rand_blocks(6, 9)
    y = rng.integers(0, 4, 6)
    _, grads = m.loss_and_grads(x, y, "real", phase)
    fd = finite_difference_grads(m, x, y, phase)
    assert rel_err(grads, fd) < 1e-6
    assert np.all(grads["act_scales"] == 0)


def test_zero_loss_gives_zero_gradients():
    m = zero_model()
    m.biases[1][:] = [1000.0, 0, 0, 0]
    x = rand_blocks(4)
    value, grads = m.loss_and_grads(x, [0, 0, 0, 0], "real", "train")
    _, probs = m.forward(x, "real", "infer")
    assert probs[:, 0].tolist() == [1.0] * 4
    assert value == pytest.approx(-0.75 * np.log(1 - 1e-7) - 0.25 * np.log(1 - 1e-7), abs=1e-6)
    assert all(np.all(g == 0) for g in grads.values())


def test_fake_quant_weight_grad_zero_when_clamped():
    m = init_model((40, 8, 4), bits=2, seed=2)
    s = 0.05
    m.weight_scales[0] = s
    x = rand_blocks(16, 1)
    _, grads = m.loss_and_grads(x, np.arange(16) % 4, "fake_quant", "train")
    clamped = np.abs(m.weights[0] / s) >= 1.5
    assert clamped.any() and (~clamped).any()
    assert np.all(grads["W0"][clamped] == 0)
    assert np.any(grads["W0"][~clamped] != 0)


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        init_model().backward(None, np.zeros((1, 4)))


def test_fake_quant_8bit_tracks_real_within_propagated_bound():
    dims = (40, 16, 8, 4)
    m = init_model(dims, bits=8, seed=7)
    rng = np.random.default_rng(3)
    x = rand_blocks(200, 4)
    for i in range(2):
        m.gamma[i] = rng.uniform(0.5, 1.5, dims[i + 1])
        m.beta[i] = rng.normal(0, 0.2, dims[i + 1])
    # generous activation scales so nothing saturates
    _, _, cache = m.forward(x, "real", "infer", cache=True)
    for i in range(2):
        y = cache["steps"][i]["xhat"] * m.gamma[i] + m.beta[i]
        m.act_scales[i] = 3 * np.max(y) / 255
    real_logits, _, rc = m.forward(x, "real", "infer", cache=True)
    fq_logits, _, fc = m.forward(x, "fake_quant", "infer", cache=True)
    x_real = x.astype(float) / 128
    err = np.zeros_like(x_real)
    for i in range(3):
        s_w = m.weight_scale(i)
        w_fq = fake_quant(m.weights[i], weight_spec(8, s_w))
        dz = err @ np.abs(w_fq) + (s_w / 2) * np.abs(x_real).sum(axis=1, keepdims=True)
        if i == 2:
            bound = dz
            break
        dy = dz * np.abs(m.gamma[i]) / np.sqrt(m.running_var[i] + m.eps)
        assert np.all(fc["steps"][i]["q"] < 255)  # unsaturated
        err = dy + m.act_scales[i] / 2
        x_real = rc["steps"][i + 1]["h_in"]
    assert np.all(np.abs(fq_logits - real_logits) <= bound * (1 + 1e-9))
    assert np.max(np.abs(fq_logits - real_logits)) > 0


def test_save_load_round_trip(tmp_path):
    m = init_model(bits=3, seed=5)
    rng = np.random.default_rng(0)
    m.running_mean[1] = rng.normal(size=128)
    m.act_scales[:] = rng.uniform(0.1, 1, 4)
    m.meta["seed"] = 5
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_model(m, p1)
    back = load_model(p1)
    save_model(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.bits == 3
    for a, b in zip(m.params().values(), back.params().values()):
        assert np.array_equal(a, b)
    for a, b in zip(m.running_var + m.running_mean, back.running_var + back.running_mean):
        assert np.array_equal(a, b)
    x = rand_blocks(50)
    assert np.array_equal(m.forward(x, "fake_quant")[0], back.forward(x, "fake_quant")[0])


def test_corrupt_and_truncated_files(tmp_path):
    text = dumps_model(init_model((40, 8, 4)))
    tampered = text.replace('"bits\\":2', '"bits\\":3')
    assert tampered != text
    with pytest.raises(ModelFileError, match="checksum"):
        loads_model(tampered)
    with pytest.raises(ModelFileError):
        loads_model(text[: len(text) // 2])
    with pytest.raises(ModelFileError, match="version"):
        loads_model(text.replace('"version": 1', '"version": 99'))


def test_model_rejects_bad_shapes():
    m = init_model((40, 8, 4))
    with pytest.raises(ValueError):
        CqmlpModel((40, 9, 4), 2, m.weights, m.biases, m.gamma, m.beta, m.running_mean,
                   m.running_var, m.act_scales)
