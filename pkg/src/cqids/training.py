"""Quantisation-aware training: Adam, BCE loss, best-validation checkpointing, loss curves."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .cqmlp import DEFAULT_DIMS, CqmlpModel, init_model, save_model
from .features import DatasetSplit
from .qtensor import act_spec, calibrate_scale

log = logging.getLogger(__name__)

MIN_ACT_SCALE = 1e-6


def loss(probs, target: int, kind: str = "bce") -> float:
    """Loss of one probability vector against a class index."""
    return losses.loss_value(np.atleast_2d(probs), [target], kind)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    bits: int = 2
    seed: int = 0
    loss_kind: str = "bce"
    mode: str = "fake_quant"
    dims: tuple = DEFAULT_DIMS
    checkpoint: str | None = None
    eval_batch: int = 8192

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.loss_kind not in losses.LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        self.dims = tuple(self.dims)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class LossCurve:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train)

    def append(self, train_loss: float, val_loss: float) -> None:
        self.train.append(float(train_loss))
        self.val.append(float(val_loss))

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch with the lowest validation loss (first one on ties)."""
        if not self.val:
            return None
        return int(np.argmin(self.val)) + 1


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam; updates ``params`` arrays in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def calibrate_activations(model: CqmlpModel, blocks) -> None:
    """One-off activation-scale initialisation from a calibration batch, layer by layer.

    Uses batch statistics, as training will, on a scratch copy so the
    model's running statistics are left alone.
    """
    scratch = model.copy()
    for i in range(model.n_layers - 1):
        _, _, cache = scratch.forward(blocks, "fake_quant", "train", cache=True)
        st = cache["steps"][i]
        y = st["xhat"] * scratch.gamma[i] + scratch.beta[i]
        scratch.act_scales[i] = calibrate_scale(np.maximum(y, 0.0), act_spec(model.bits),
                                                mode="learned_init")
    model.act_scales[:] = scratch.act_scales


def evaluate_loss(model: CqmlpModel, data, labels, mode: str, kind: str, batch: int = 8192) -> float:
    if len(labels) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(labels), batch):
        _, probs = model.forward(data[start:start + batch], mode, "infer")
        total += float(np.sum(losses.bce(probs, labels[start:start + batch]) if kind == "bce"
                              else losses.cross_entropy(probs, labels[start:start + batch])))
    return total / len(labels)


def train_qat(config: TrainConfig, split: DatasetSplit, model: CqmlpModel | None = None,
              progress=None) -> tuple[CqmlpModel, LossCurve]:
    """Train and return the parameters with the lowest validation loss.

    Each epoch reshuffles the training set with a generator seeded by
    ``(seed, epoch)``, so runs are reproducible from the config alone.
    """
    model = model if model is not None else init_model(config.dims, config.bits, config.seed)
    curve = LossCurve()
    model.meta.update({"seed": config.seed, "epochs": 0, "best_val_loss": None,
                       "best_epoch": None, "loss_kind": config.loss_kind, "lr": config.lr,
                       "batch_size": config.batch_size, "split_seed": split.seed})
    if config.epochs == 0:
        if config.checkpoint:
            save_model(model, config.checkpoint)
        return model, curve
    train, val = split.train, split.validation
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if config.mode == "fake_quant":
        calib = np.random.default_rng([config.seed, 2 ** 31]).permutation(len(train))[:1024]
        calibrate_activations(model, train.data[calib])
    state = AdamState()
    params = model.params()
    best = model.copy()
    best_val = np.inf
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = model.loss_and_grads(train.data[idx], train.labels[idx], config.mode,
                                                "train", config.loss_kind)
            adam_step(params, grads, state, config.lr)
            np.maximum(model.act_scales, MIN_ACT_SCALE, out=model.act_scales)
            batch_losses.append(value)
        val_loss = evaluate_loss(model, val.data, val.labels, config.mode, config.loss_kind,
                                 config.eval_batch)
        curve.append(float(np.mean(batch_losses)), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            best.meta.update({"best_val_loss": val_loss, "best_epoch": epoch})
            if config.checkpoint:
                save_model(best, config.checkpoint)
        if progress is not None:
            progress(epoch, curve.train[-1], val_loss)
        log.info("epoch %d train %.6f val %.6f", epoch, curve.train[-1], val_loss)
    best.meta["epochs"] = config.epochs
    if config.checkpoint:
        save_model(best, config.checkpoint)
    return best, curve


def export_loss_csv(curve: LossCurve, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(zip(curve.train, curve.val), start=1):
            w.writerow([i, repr(tr), repr(va)])


def read_loss_csv(path) -> LossCurve:
    curve = LossCurve()
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            curve.append(float(row["train_loss"]), float(row["val_loss"]))
    return curve
