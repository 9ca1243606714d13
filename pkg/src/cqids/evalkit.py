"""Confusion matrices, per-class detection metrics and the inference-cost model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .can_core import Label
from .cqmlp import DEFAULT_DIMS
from .qtensor import quantize_values

CLASSES = tuple(Label)


@dataclass
class ConfusionMatrix:
    """Rows are the true class, columns the predicted class."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(CLASSES), len(CLASSES)):
            raise ValueError("confusion matrix must be 4x4")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    def add(self, true: int, pred: int) -> None:
        self.counts[int(true), int(pred)] += 1

    def update(self, true, pred) -> None:
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        np.add.at(self.counts, (true, pred), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_rows(self) -> list[list]:
        rows = [["true\\predicted", *[c.display for c in CLASSES]]]
        for c in CLASSES:
            rows.append([c.display, *self.counts[c].tolist()])
        return rows


def confusion(pairs: Iterable[tuple[int, int]]) -> ConfusionMatrix:
    """Tally ``(true, predicted)`` pairs."""
    cm = ConfusionMatrix()
    n = 0
    for true, pred in pairs:
        true, pred = int(Label(true)), int(Label(pred))
        cm.add(true, pred)
        n += 1
    if n == 0:
        raise ValueError("no (true, predicted) pairs to tally")
    return cm


def confusion_from_arrays(true, pred) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.size == 0:
        raise ValueError("no (true, predicted) pairs to tally")
    if true.shape != pred.shape:
        raise ValueError("true and predicted label arrays differ in shape")
    if ((true < 0) | (true >= 4) | (pred < 0) | (pred >= 4)).any():
        raise ValueError("labels must be class indices 0..3")
    cm = ConfusionMatrix()
    cm.update(true, pred)
    return cm


@dataclass
class ClassMetrics:
    label: Label
    precision: float
    recall: float
    f1: float
    fnr: float
    support: int
    undefined: tuple[str, ...] = ()


@dataclass
class MetricsReport:
    per_class: dict
    accuracy: float
    fpr: float
    misclassifications: int
    total: int
    benign_false_alarms: int

    @property
    def macro_f1(self) -> float:
        return float(np.mean([m.f1 for m in self.per_class.values()]))

    @property
    def undefined(self) -> list[str]:
        return [f"{m.label.display}.{name}" for m in self.per_class.values() for name in m.undefined]


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest precision/recall/F1/FNR, accuracy, and attack-vs-benign FPR.

    Zero denominators give 0 and are listed in ``undefined``.
    """
    c = cm.counts.astype(np.float64)
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    per = {}
    for lab in CLASSES:
        tp = c[lab, lab]
        fp = c[:, lab].sum() - tp
        fn = c[lab, :].sum() - tp
        undefined = []
        precision, bad = _ratio(tp, tp + fp)
        if bad:
            undefined.append("precision")
        recall, bad = _ratio(tp, tp + fn)
        if bad:
            undefined.append("recall")
        fnr, bad = _ratio(fn, tp + fn)
        if bad:
            undefined.append("fnr")
        f1, bad = _ratio(2 * precision * recall, precision + recall)
        if bad:
            undefined.append("f1")
        per[lab] = ClassMetrics(lab, precision, recall, f1, fnr, int(tp + fn), tuple(undefined))
    benign_row = c[Label.BENIGN].sum()
    false_alarms = int(benign_row - c[Label.BENIGN, Label.BENIGN])
    fpr, _ = _ratio(false_alarms, benign_row)
    trace = int(np.trace(cm.counts))
    return MetricsReport(per, trace / total, fpr, total - trace, total, false_alarms)


# Table-like output ----------------------------------------------------------

def metrics_rows(rep: MetricsReport) -> list[list]:
    rows = [["class", "precision_pct", "recall_pct", "f1_pct", "fnr_pct", "support"]]
    for m in rep.per_class.values():
        rows.append([m.label.display, f"{100 * m.precision:.4f}", f"{100 * m.recall:.4f}",
                     f"{100 * m.f1:.4f}", f"{100 * m.fnr:.4f}", m.support])
    rows.append(["overall_accuracy", f"{100 * rep.accuracy:.4f}", "", "", "", rep.total])
    rows.append(["fpr_attack_vs_benign", f"{100 * rep.fpr:.4f}", "", "", "", rep.benign_false_alarms])
    rows.append(["misclassifications", rep.misclassifications, "", "", "", ""])
    return rows


def format_table(rows: Sequence[Sequence]) -> str:
    cells = [[str(x) for x in r] for r in rows]
    widths = [max(len(r[i]) for r in cells if i < len(r)) for i in range(len(cells[0]))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(x.rjust(w) if j else x.ljust(w) for j, (x, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_csv(rows: Sequence[Sequence], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_confusion_csv(path) -> ConfusionMatrix:
    """Read a 4x4 matrix; a header row and a leading label column are optional."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(x.strip() for x in r)]
    numeric = []
    for r in rows:
        vals = []
        for x in r:
            try:
                vals.append(int(x.strip()))
            except ValueError:
                continue
        if len(vals) == 4:
            numeric.append(vals)
    if len(numeric) != 4:
        raise ValueError(f"{path}: expected four rows of four integer counts")
    return ConfusionMatrix(np.array(numeric))


# inference cost ---------------------------------------------------------------

@dataclass
class LayerCost:
    macs: int
    weight_bits: int
    input_bits: int
    bops: int
    memory_bits: int


@dataclass
class CostReport:
    bits: int
    layers: list
    bops: int
    memory_bits: int
    baseline_bops: int
    baseline_memory_bits: int
    normalized: float
    sparsity_normalized: float | None = None

    @property
    def bops_ratio(self) -> float:
        return self.bops / self.baseline_bops

    @property
    def memory_ratio(self) -> float:
        return self.memory_bits / self.baseline_memory_bits

    def rows(self) -> list[list]:
        rows = [["layer", "macs", "weight_bits", "input_bits", "bops", "memory_bits"]]
        for i, lc in enumerate(self.layers):
            rows.append([i, lc.macs, lc.weight_bits, lc.input_bits, lc.bops, lc.memory_bits])
        rows.append(["total", sum(lc.macs for lc in self.layers), self.bits, "", self.bops,
                     self.memory_bits])
        rows.append(["normalised_cost", f"{self.normalized:.6f}", "", "", "", ""])
        if self.sparsity_normalized is not None:
            rows.append(["normalised_cost_sparse", f"{self.sparsity_normalized:.6f}", "", "", "", ""])
        return rows


def _layer_costs(dims: Sequence[int], bits: int, input_bits: int,
                 density: Sequence[float] | None = None) -> list[LayerCost]:
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        macs = fan_in * fan_out
        if density is not None:
            macs = int(round(macs * density[i]))
        b_in = input_bits if i == 0 else bits
        out.append(LayerCost(macs, bits, b_in, macs * bits * b_in, macs * bits))
    return out


def inference_cost(dims: Sequence[int] = DEFAULT_DIMS, bits: int = 2, input_bits: int = 8,
                   baseline_bits: int = 4, density: Sequence[float] | None = None) -> CostReport:
    """Bit-operation and weight-memory cost normalised against a baseline bitwidth.

    ``0.5 * bops / bops_base + 0.5 * mem / mem_base``. When ``density``
    (fraction of non-zero weights per layer) is given, a second,
    sparsity-discounted figure counts only non-zero weights of this model
    against the dense baseline.
    """
    dims = tuple(dims)
    layers = _layer_costs(dims, bits, input_bits)
    base = _layer_costs(dims, baseline_bits, input_bits)
    bops, mem = sum(lc.bops for lc in layers), sum(lc.memory_bits for lc in layers)
    b_bops, b_mem = sum(lc.bops for lc in base), sum(lc.memory_bits for lc in base)
    norm = 0.5 * bops / b_bops + 0.5 * mem / b_mem
    sparse = None
    if density is not None:
        if len(density) != len(dims) - 1:
            raise ValueError("need one density value per layer")
        sl = _layer_costs(dims, bits, input_bits, density)
        sparse = 0.5 * sum(lc.bops for lc in sl) / b_bops + 0.5 * sum(lc.memory_bits for lc in sl) / b_mem
    return CostReport(bits, layers, bops, mem, b_bops, b_mem, norm, sparse)


def weight_density(model) -> list[float]:
    """Fraction of non-zero quantised weights per layer."""
    return [float(np.count_nonzero(quantize_values(model.weights[i], model.weight_spec(i))))
            / model.weights[i].size for i in range(model.n_layers)]
