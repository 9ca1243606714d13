"""The quantised MLP classifier: forward/backward passes, parameter accounting, persistence.

Layout for the default 40-256-128-64-32-4 network::

    x --Linear--BN--QReLU--Linear--BN--QReLU-- ... --Linear--softmax

In ``fake_quant`` mode weights are quantised to signed narrow-range b-bit
integers with a per-tensor max-abs scale, and every hidden ReLU output to
unsigned b-bit integers with a trainable per-layer scale. The input is the
raw signed byte with fixed scale 1/128.

The fake-quant linear layer is evaluated as ``(Wq @ q_in) * (s_in * s_w)``
where ``Wq @ q_in`` is an exact integer sum. This is the same value as
``fake_quant(W) @ fake_quant(x)`` and is what makes the integer pipeline in
:mod:`cqids.dataflow` reproducible bit for bit.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .qtensor import INPUT_SPEC, act_spec, calibrate_scale, quantize_values, round_half_away, \
    scale_grad, ste_mask, weight_spec

DEFAULT_DIMS = (40, 256, 128, 64, 32, 4)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("real", "fake_quant")
PHASES = ("train", "infer")
FORMAT = "cqmlp-model"
VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass
class CqmlpModel:
    dims: tuple[int, ...]
    bits: int
    weights: list  # weights[l] has shape (dims[l], dims[l+1])
    biases: list
    gamma: list
    beta: list
    running_mean: list
    running_var: list
    act_scales: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    # fixed weight scales; None means max-abs recomputed on every forward
    weight_scales: list = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        n = self.n_layers
        if self.weight_scales is None:
            self.weight_scales = [None] * n
        shapes_ok = (
            len(self.weights) == n and len(self.biases) == n
            and all(w.shape == (self.dims[i], self.dims[i + 1]) for i, w in enumerate(self.weights))
            and all(b.shape == (self.dims[i + 1],) for i, b in enumerate(self.biases))
            and len(self.gamma) == n - 1 and len(self.beta) == n - 1
            and len(self.running_mean) == n - 1 and len(self.running_var) == n - 1
            and np.shape(self.act_scales) == (n - 1,)
        )
        if not shapes_ok:
            raise ValueError(f"parameter shapes do not match dims {self.dims}")
        self.act_scales = np.asarray(self.act_scales, dtype=np.float64)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    # parameters ---------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters by name; the arrays are the live model storage."""
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
            if i < self.n_layers - 1:
                out[f"gamma{i}"] = self.gamma[i]
                out[f"beta{i}"] = self.beta[i]
        out["act_scales"] = self.act_scales
        return out

    def copy(self) -> "CqmlpModel":
        cp = lambda xs: [np.array(x, dtype=np.float64, copy=True) for x in xs]  # noqa: E731
        return CqmlpModel(self.dims, self.bits, cp(self.weights), cp(self.biases), cp(self.gamma),
                          cp(self.beta), cp(self.running_mean), cp(self.running_var),
                          self.act_scales.copy(), self.eps, self.momentum,
                          list(self.weight_scales), dict(self.meta))

    def weight_scale(self, layer: int) -> float:
        fixed = self.weight_scales[layer]
        if fixed is not None:
            return float(fixed)
        return calibrate_scale(self.weights[layer], weight_spec(self.bits))

    def weight_spec(self, layer: int):
        return weight_spec(self.bits, self.weight_scale(layer))

    def act_spec(self, layer: int):
        return act_spec(self.bits, float(self.act_scales[layer]))

    # forward ------------------------------------------------------------

    def forward(self, blocks, mode: str = "real", phase: str = "infer", cache: bool = False):
        """Logits and softmax probabilities for a batch of signed-byte blocks.

        ``blocks`` is ``(N, dims[0])`` int8 (or a single row). With
        ``cache=True`` the intermediate values needed by :meth:`backward`
        are returned as a third element.
        """
        if mode not in MODES or phase not in PHASES:
            raise ValueError(f"bad mode/phase {mode!r}/{phase!r}")
        x = np.asarray(blocks)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dims[0]:
            raise ValueError(f"expected blocks of width {self.dims[0]}, got {x.shape[1]}")
        fq = mode == "fake_quant"
        train = phase == "train"
        steps = []
        if fq:
            h_int = x.astype(np.int64).astype(np.float64)
            s_in = INPUT_SPEC.scale
            h = h_int * s_in
        else:
            h = x.astype(np.float64) / 128.0
        for i in range(self.n_layers):
            st = {"h_in": h}
            if fq:
                spec_w = self.weight_spec(i)
                wq = quantize_values(self.weights[i], spec_w).astype(np.float64)
                st["w_mask"] = ste_mask(self.weights[i], spec_w)
                st["w_eff"] = wq * spec_w.scale
                z = (h_int @ wq) * (s_in * spec_w.scale) + self.biases[i]
            else:
                st["w_eff"] = self.weights[i]
                z = h @ self.weights[i] + self.biases[i]
            if i == self.n_layers - 1:
                steps.append(st)
                logits = z
                break
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                n = z.shape[0]
                m = self.momentum
                self.running_mean[i] = (1 - m) * self.running_mean[i] + m * mu
                unbiased = var * n / (n - 1) if n > 1 else var
                self.running_var[i] = (1 - m) * self.running_var[i] + m * unbiased
            else:
                mu, var = self.running_mean[i], self.running_var[i]
            std = np.sqrt(var + self.eps)
            y = (z - mu) / std * self.gamma[i] + self.beta[i]
            st.update(xhat=(z - mu) / std, inv_std=1.0 / std, batch_stats=train)
            if fq:
                spec_a = self.act_spec(i)
                r = np.maximum(y, 0.0)
                q = np.clip(round_half_away(r / spec_a.scale), 0, spec_a.hi)
                st["relu_ste"] = (y > 0) * ste_mask(r, spec_a)
                st["a_sgrad"] = scale_grad(r, spec_a)
                st["q"] = q
                h_int = q
                s_in = spec_a.scale
                h = q * s_in
            else:
                st["relu_ste"] = (y > 0).astype(np.float64)
                h = np.maximum(y, 0.0)
            steps.append(st)
        probs = losses.softmax(logits)
        if cache:
            return logits, probs, {"steps": steps, "mode": mode, "probs": probs}
        return logits, probs

    def predict(self, blocks, mode: str = "fake_quant") -> np.ndarray:
        logits, _ = self.forward(blocks, mode, "infer")
        return np.argmax(logits, axis=1)

    def hidden_levels(self, blocks) -> list[np.ndarray]:
        """Integer activation levels of every hidden layer in fake-quant inference."""
        _, _, cache = self.forward(blocks, "fake_quant", "infer", cache=True)
        return [st["q"].astype(np.int64) for st in cache["steps"][:-1]]

    # backward -----------------------------------------------------------

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of all trainable parameters given d(loss)/d(logits)."""
        if cache is None or "steps" not in cache:
            raise RuntimeError("backward needs the cache from a forward(..., cache=True) call")
        steps = cache["steps"]
        fq = cache["mode"] == "fake_quant"
        grads: dict[str, np.ndarray] = {}
        g_act = np.zeros(self.n_layers - 1)
        dz = np.asarray(dlogits, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            st = steps[i]
            dw = st["h_in"].T @ dz
            if fq:
                dw = dw * st["w_mask"]
            grads[f"W{i}"] = dw
            grads[f"b{i}"] = dz.sum(axis=0)
            if i == 0:
                break
            dh = dz @ st["w_eff"].T
            prev = steps[i - 1]
            if fq:
                g_act[i - 1] = float(np.sum(dh * prev["a_sgrad"]))
            dy = dh * prev["relu_ste"]
            grads[f"gamma{i - 1}"] = np.sum(dy * prev["xhat"], axis=0)
            grads[f"beta{i - 1}"] = dy.sum(axis=0)
            dxhat = dy * self.gamma[i - 1]
            if prev["batch_stats"]:
                n = dxhat.shape[0]
                xhat = prev["xhat"]
                dz = prev["inv_std"] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            else:
                dz = dxhat * prev["inv_std"]
        grads["act_scales"] = g_act
        return grads

    def loss_and_grads(self, blocks, targets, mode: str = "real", phase: str = "train",
                       loss_kind: str = "bce") -> tuple[float, dict[str, np.ndarray]]:
        _, probs, cache = self.forward(blocks, mode, phase, cache=True)
        value = losses.loss_value(probs, targets, loss_kind)
        return value, self.backward(cache, losses.loss_grad_logits(probs, targets, loss_kind))


def init_model(dims: Sequence[int] = DEFAULT_DIMS, bits: int = 2, seed: int = 0,
               act_scale: float | None = None) -> CqmlpModel:
    """Kaiming-uniform (fan-in) weights, zero biases, identity batch-norm.

    Activation scales start so that the top level sits at 2.0 unless
    ``act_scale`` is given.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    hidden = dims[1:-1]
    spec = act_spec(bits)
    scale = act_scale if act_scale is not None else 2.0 / spec.hi
    return CqmlpModel(
        dims, bits, weights, biases,
        gamma=[np.ones(h) for h in hidden], beta=[np.zeros(h) for h in hidden],
        running_mean=[np.zeros(h) for h in hidden], running_var=[np.ones(h) for h in hidden],
        act_scales=np.full(len(hidden), float(scale)),
    )


def count_params(model_or_dims) -> int:
    """Weights + biases + BN gamma/beta + one activation scale per hidden layer.

    Running statistics are buffers, not parameters, and are excluded.
    """
    dims = model_or_dims.dims if isinstance(model_or_dims, CqmlpModel) else tuple(model_or_dims)
    linear = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    hidden = dims[1:-1]
    return linear + 2 * sum(hidden) + len(hidden)


def linear_param_count(dims: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


# persistence --------------------------------------------------------------

def _hex(a) -> str:
    return np.ascontiguousarray(a, dtype="<f8").tobytes().hex()


def _unhex(text: str, shape) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(text), dtype="<f8").reshape(shape).astype(np.float64)


def _hex_scalar(x: float) -> str:
    return _hex(np.array([x]))


def _payload(model: CqmlpModel) -> dict:
    layers = []
    for i in range(model.n_layers):
        layer = {"weight": _hex(model.weights[i]), "bias": _hex(model.biases[i]),
                 "weight_scale": None if model.weight_scales[i] is None
                 else _hex_scalar(model.weight_scales[i])}
        if i < model.n_layers - 1:
            layer["bn"] = {"gamma": _hex(model.gamma[i]), "beta": _hex(model.beta[i]),
                           "running_mean": _hex(model.running_mean[i]),
                           "running_var": _hex(model.running_var[i])}
            layer["act_scale"] = _hex_scalar(model.act_scales[i])
        layers.append(layer)
    return {"bits": model.bits, "dims": list(model.dims), "eps": _hex_scalar(model.eps),
            "momentum": _hex_scalar(model.momentum), "layers": layers, "meta": model.meta}


def dumps_model(model: CqmlpModel) -> str:
    payload = json.dumps(_payload(model), sort_keys=True, separators=(",", ":"))
    doc = {"format": FORMAT, "version": VERSION,
           "checksum": f"{zlib.crc32(payload.encode()) & 0xFFFFFFFF:08x}", "payload": payload}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_model(model: CqmlpModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def loads_model(text: str) -> CqmlpModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file is not valid JSON (truncated?): {exc}") from None
    if doc.get("format") != FORMAT:
        raise ModelFileError("not a CQMLP model file")
    if doc.get("version") != VERSION:
        raise ModelFileError(f"unsupported model file version {doc.get('version')}")
    payload = doc.get("payload", "")
    if f"{zlib.crc32(payload.encode()) & 0xFFFFFFFF:08x}" != doc.get("checksum"):
        raise ModelFileError("model file checksum mismatch")
    p = json.loads(payload)
    dims = tuple(p["dims"])
    n = len(dims) - 1
    layers = p["layers"]
    w = [_unhex(layers[i]["weight"], (dims[i], dims[i + 1])) for i in range(n)]
    b = [_unhex(layers[i]["bias"], (dims[i + 1],)) for i in range(n)]
    bn = [layers[i]["bn"] for i in range(n - 1)]
    hid = dims[1:-1]
    return CqmlpModel(
        dims, int(p["bits"]), w, b,
        gamma=[_unhex(bn[i]["gamma"], (hid[i],)) for i in range(n - 1)],
        beta=[_unhex(bn[i]["beta"], (hid[i],)) for i in range(n - 1)],
        running_mean=[_unhex(bn[i]["running_mean"], (hid[i],)) for i in range(n - 1)],
        running_var=[_unhex(bn[i]["running_var"], (hid[i],)) for i in range(n - 1)],
        act_scales=np.array([_unhex(layers[i]["act_scale"], (1,))[0] for i in range(n - 1)]),
        eps=float(_unhex(p["eps"], (1,))[0]),
        momentum=float(_unhex(p["momentum"], (1,))[0]),
        weight_scales=[None if layers[i]["weight_scale"] is None
                       else float(_unhex(layers[i]["weight_scale"], (1,))[0]) for i in range(n)],
        meta=p.get("meta", {}),
    )


def load_model(path) -> CqmlpModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))
