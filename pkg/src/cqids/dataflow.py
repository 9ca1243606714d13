"""Integer-only threshold pipeline built from a trained model, plus a latency harness.

Each hidden layer becomes an integer matrix-vector product followed by a
multi-threshold unit: the output level is the number of per-channel
thresholds the 32-bit accumulator reaches. Input scale, weight scale, bias,
batch-norm and the activation quantiser are all folded into those
thresholds. The final layer keeps a per-channel affine read-out that feeds
argmax.

Thresholds are located against the exact float evaluation used by the
fake-quant forward pass, so the integer pipeline reproduces it bit for bit.
"""

from __future__ import annotations

import json
import time
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .can_core import CanFrame
from .cqmlp import CqmlpModel
from .features import encode_frame
from .qtensor import INPUT_SPEC, quantize_values, round_half_away

PIPELINE_FORMAT = "cqmlp-threshold-pipeline"
PIPELINE_VERSION = 1
INT32_MAX = 2 ** 31 - 1


class StreamlineError(ValueError):
    pass


@dataclass
class ThresholdLayer:
    weights: np.ndarray  # (in, out) int32, columns of mirrored channels already negated
    thresholds: np.ndarray  # (out, levels-1) int64, non-decreasing along axis 1
    mirrored: np.ndarray  # (out,) bool

    @property
    def n_levels(self) -> int:
        return self.thresholds.shape[1] + 1


@dataclass
class ReadoutLayer:
    weights: np.ndarray  # (in, out) int32
    scale: np.ndarray  # (out,) float64
    offset: np.ndarray  # (out,) float64


@dataclass
class ThresholdPipeline:
    bits: int
    dims: tuple
    hidden: list = field(default_factory=list)
    readout: ReadoutLayer | None = None

    def run_int(self, blocks) -> tuple[np.ndarray, list[np.ndarray]]:
        """Predicted classes and the integer activation trace of every hidden layer."""
        x = np.atleast_2d(np.asarray(blocks, dtype=np.int8)).astype(np.int32)
        if x.shape[1] != self.dims[0]:
            raise ValueError(f"expected blocks of width {self.dims[0]}, got {x.shape[1]}")
        trace = []
        for layer in self.hidden:
            acc = _int_matmul(x, layer.weights)
            x = (acc[:, :, None] >= layer.thresholds[None, :, :]).sum(axis=2, dtype=np.int32)
            trace.append(x.astype(np.int64))
        acc = _int_matmul(x, self.readout.weights)
        logits = acc.astype(np.float64) * self.readout.scale + self.readout.offset
        return np.argmax(logits, axis=1), trace

    def predict(self, blocks) -> np.ndarray:
        return self.run_int(blocks)[0]


def _int_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Integer matrix product routed through BLAS.

    Every operand and partial sum is an integer far below 2**53 (streamline
    checks the accumulator fits in 32 bits), so the float64 product is exact
    and the result equals ``x @ w`` in int32 arithmetic.
    """
    return (x.astype(np.float64) @ w.astype(np.float64)).astype(np.int32)


def _input_range(layer: int, bits: int) -> tuple[int, int]:
    if layer == 0:
        return INPUT_SPEC.lo, INPUT_SPEC.hi
    return 0, 2 ** bits - 1


def _acc_bounds(wq: np.ndarray, x_lo: int, x_hi: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.minimum(wq * x_lo, wq * x_hi).sum(axis=0)
    hi = np.maximum(wq * x_lo, wq * x_hi).sum(axis=0)
    return lo, hi


def _threshold_search(level_fn, k: int, lo: np.ndarray, hi: np.ndarray, guess: np.ndarray) -> np.ndarray:
    """Smallest accumulator in ``[lo, hi]`` whose level is at least ``k``; ``hi + 1`` if none.

    ``level_fn`` must be non-decreasing. Starts from ``guess`` and walks
    to the exact boundary, which repairs float ceiling errors.
    """
    t = np.clip(guess, lo, hi + 1).astype(np.int64)
    while True:
        step_down = (t > lo) & (level_fn(t - 1) >= k)
        if not step_down.any():
            break
        t = t - step_down
    while True:
        step_up = (t <= hi) & (level_fn(np.minimum(t, hi)) < k)
        if not step_up.any():
            break
        t = t + step_up
    return t


def streamline(model: CqmlpModel) -> ThresholdPipeline:
    """Fold a trained model's scales, biases and batch-norm into integer thresholds."""
    pipe = ThresholdPipeline(model.bits, tuple(model.dims))
    s_in = INPUT_SPEC.scale
    for i in range(model.n_layers - 1):
        spec_w = model.weight_spec(i)
        wq = quantize_values(model.weights[i], spec_w)
        comb = s_in * spec_w.scale
        gamma = np.asarray(model.gamma[i], dtype=np.float64)
        var = np.asarray(model.running_var[i], dtype=np.float64)
        for c in np.flatnonzero(gamma == 0):
            raise StreamlineError(f"layer {i} channel {c}: batch-norm gamma is zero")
        for c in np.flatnonzero(~(var > 0)):
            raise StreamlineError(f"layer {i} channel {c}: running variance {var[c]} is not positive")
        bias, mu, beta = model.biases[i], model.running_mean[i], model.beta[i]
        std = np.sqrt(var + model.eps)
        spec_a = model.act_spec(i)
        s_a = spec_a.scale
        mirrored = gamma < 0
        sign = np.where(mirrored, -1, 1)

        def level(acc_signed, sign=sign, comb=comb, bias=bias, mu=mu, std=std, gamma=gamma,
                  beta=beta, s_a=s_a, hi=spec_a.hi):
            # same float expression, same evaluation order as the fake-quant forward
            z = (sign * acc_signed).astype(np.float64) * comb + bias
            y = (z - mu) / std * gamma + beta
            return np.clip(round_half_away(np.maximum(y, 0.0) / s_a), 0, hi)

        x_lo, x_hi = _input_range(i, model.bits)
        w_signed = wq * sign[None, :]
        lo, hi = _acc_bounds(w_signed, x_lo, x_hi)
        if max(np.abs(lo).max(), np.abs(hi).max()) > INT32_MAX:
            raise StreamlineError(f"layer {i}: accumulator range exceeds 32 bits")
        thresholds = np.empty((len(gamma), spec_a.hi), dtype=np.int64)
        for k in range(1, spec_a.hi + 1):
            # real-valued boundary of round(y / s_a) >= k, in mirrored coordinates
            target = ((k - 0.5) * s_a - beta) * std / gamma + mu - bias
            with np.errstate(over="ignore", invalid="ignore"):
                guess = np.ceil(sign * target / comb)
            guess = np.where(np.isfinite(guess), guess, hi + 1)
            guess = np.clip(guess, lo - 1, hi + 1)
            thresholds[:, k - 1] = _threshold_search(level, k, lo, hi, guess)
        pipe.hidden.append(ThresholdLayer(w_signed.astype(np.int32), thresholds, mirrored))
        s_in = s_a
    last = model.n_layers - 1
    spec_w = model.weight_spec(last)
    wq = quantize_values(model.weights[last], spec_w)
    comb = s_in * spec_w.scale
    pipe.readout = ReadoutLayer(wq.astype(np.int32), np.full(wq.shape[1], comb),
                                np.asarray(model.biases[last], dtype=np.float64).copy())
    return pipe


def real_thresholds(model: CqmlpModel, layer: int) -> np.ndarray:
    """Un-rounded accumulator boundaries ``(channels, levels-1)`` in the channel's own
    (possibly mirrored) coordinates. Diagnostic only."""
    spec_w = model.weight_spec(layer)
    s_in = INPUT_SPEC.scale if layer == 0 else float(model.act_scales[layer - 1])
    comb = s_in * spec_w.scale
    gamma = model.gamma[layer]
    std = np.sqrt(model.running_var[layer] + model.eps)
    s_a = float(model.act_scales[layer])
    sign = np.where(gamma < 0, -1.0, 1.0)
    ks = np.arange(1, 2 ** model.bits)
    target = ((ks[None, :] - 0.5) * s_a - model.beta[layer][:, None]) * std[:, None] / gamma[:, None] \
        + model.running_mean[layer][:, None] - model.biases[layer][:, None]
    return sign[:, None] * target / comb


@dataclass
class Mismatch:
    index: int
    block: np.ndarray
    layer: int  # -1 for the predicted class
    expected: np.ndarray
    got: np.ndarray


def check_equivalence(pipe: ThresholdPipeline, model: CqmlpModel, blocks,
                      chunk: int = 4096) -> list[Mismatch]:
    """Compare integer activations and predictions with the fake-quant forward."""
    blocks = np.atleast_2d(np.asarray(blocks, dtype=np.int8))
    out = []
    for start in range(0, len(blocks), chunk):
        part = blocks[start:start + chunk]
        pred, trace = pipe.run_int(part)
        logits, _, cache = model.forward(part, "fake_quant", "infer", cache=True)
        ref_levels = [st["q"].astype(np.int64) for st in cache["steps"][:-1]]
        ref_pred = np.argmax(logits, axis=1)
        for li, (got, ref) in enumerate(zip(trace, ref_levels)):
            for r in np.flatnonzero(np.any(got != ref, axis=1)):
                out.append(Mismatch(start + int(r), part[r].copy(), li, ref[r], got[r]))
        for r in np.flatnonzero(pred != ref_pred):
            out.append(Mismatch(start + int(r), part[r].copy(), -1, ref_pred[r:r + 1], pred[r:r + 1]))
    return out


# persistence --------------------------------------------------------------

def _hexf(a) -> str:
    return np.ascontiguousarray(a, dtype="<f8").tobytes().hex()


def dumps_pipeline(pipe: ThresholdPipeline) -> str:
    payload = {
        "bits": pipe.bits,
        "dims": list(pipe.dims),
        "hidden": [{"weights": layer.weights.tolist(), "thresholds": layer.thresholds.tolist(),
                    "mirrored": layer.mirrored.astype(int).tolist()} for layer in pipe.hidden],
        "readout": {"weights": pipe.readout.weights.tolist(), "scale": _hexf(pipe.readout.scale),
                    "offset": _hexf(pipe.readout.offset)},
    }
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    doc = {"format": PIPELINE_FORMAT, "version": PIPELINE_VERSION,
           "checksum": f"{zlib.crc32(body.encode()) & 0xFFFFFFFF:08x}", "payload": body}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_pipeline(pipe: ThresholdPipeline, path) -> None:
    Path(path).write_text(dumps_pipeline(pipe), encoding="utf-8")


def load_pipeline(path) -> ThresholdPipeline:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PIPELINE_FORMAT or doc.get("version") != PIPELINE_VERSION:
        raise ValueError(f"{path}: not a version-{PIPELINE_VERSION} threshold pipeline")
    body = doc["payload"]
    if f"{zlib.crc32(body.encode()) & 0xFFFFFFFF:08x}" != doc.get("checksum"):
        raise ValueError(f"{path}: pipeline checksum mismatch")
    p = json.loads(body)
    pipe = ThresholdPipeline(int(p["bits"]), tuple(p["dims"]))
    for layer in p["hidden"]:
        pipe.hidden.append(ThresholdLayer(np.array(layer["weights"], dtype=np.int32),
                                          np.array(layer["thresholds"], dtype=np.int64),
                                          np.array(layer["mirrored"], dtype=bool)))
    ro = p["readout"]
    pipe.readout = ReadoutLayer(np.array(ro["weights"], dtype=np.int32),
                                np.frombuffer(bytes.fromhex(ro["scale"]), "<f8").astype(np.float64),
                                np.frombuffer(bytes.fromhex(ro["offset"]), "<f8").astype(np.float64))
    return pipe


# benchmark ----------------------------------------------------------------

@dataclass
class BenchReport:
    mode: str
    blocks: int
    wall_time: float
    latencies: np.ndarray = field(repr=False)

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies))

    @property
    def median_latency(self) -> float:
        return float(np.median(self.latencies))

    @property
    def p99_latency(self) -> float:
        return float(np.percentile(self.latencies, 99))

    @property
    def throughput(self) -> float:
        return self.blocks / self.wall_time

    def as_row(self) -> dict:
        return {"mode": self.mode, "blocks": self.blocks, "wall_time_s": self.wall_time,
                "mean_latency_us": self.mean_latency * 1e6,
                "median_latency_us": self.median_latency * 1e6,
                "p99_latency_us": self.p99_latency * 1e6, "throughput_per_s": self.throughput}

    def summary(self) -> str:
        return (f"{self.mode}: {self.blocks} classifications in {self.wall_time:.3f} s "
                f"({self.throughput:,.0f}/s); latency mean {self.mean_latency * 1e6:.1f} us, "
                f"median {self.median_latency * 1e6:.1f} us, p99 {self.p99_latency * 1e6:.1f} us")


def _time_blocks(pipe: ThresholdPipeline, blocks: np.ndarray) -> np.ndarray:
    lat = np.empty(len(blocks))
    clock = time.perf_counter
    for i in range(len(blocks)):
        t0 = clock()
        pipe.run_int(blocks[i:i + 1])
        lat[i] = clock() - t0
    return lat


def bench(pipe: ThresholdPipeline, stream, mode: str = "per_block", workers: int = 1) -> BenchReport:
    """Time one classification at a time.

    ``per_block`` takes an ``(N, 40)`` block array; ``per_message_sliding``
    takes a frame sequence, pushes each frame into a 4-message ring buffer
    and classifies once the buffer is full (N - 3 classifications).
    """
    if mode == "per_block":
        blocks = np.atleast_2d(np.asarray(stream, dtype=np.int8))
        if blocks.size == 0:
            raise ValueError("cannot benchmark an empty stream")
        t0 = time.perf_counter()
        if workers > 1:
            shards = np.array_split(blocks, workers)
            with ThreadPoolExecutor(workers) as pool:
                lat = np.concatenate(list(pool.map(lambda s: _time_blocks(pipe, s), shards)))
        else:
            lat = _time_blocks(pipe, blocks)
        return BenchReport(mode, len(blocks), time.perf_counter() - t0, lat)
    if mode == "per_message_sliding":
        frames: Sequence[CanFrame] = list(stream)
        if not frames:
            raise ValueError("cannot benchmark an empty stream")
        window = pipe.dims[0] // 10
        ring: deque = deque(maxlen=window)
        lat = []
        clock = time.perf_counter
        t0 = clock()
        for frame in frames:
            ts = clock()
            ring.append(encode_frame(frame))
            if len(ring) == window:
                block = np.frombuffer(b"".join(ring), dtype=np.int8)
                pipe.run_int(block)
                lat.append(clock() - ts)
        wall = clock() - t0
        if not lat:
            raise ValueError(f"stream shorter than one {window}-message window")
        return BenchReport(mode, len(lat), wall, np.array(lat))
    raise ValueError(f"unknown bench mode {mode!r}")
