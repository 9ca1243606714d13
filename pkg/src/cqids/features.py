"""Frame encoding, 4-message blocks, dataset splits and the block file format."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .can_core import CanFrame, Label

log = logging.getLogger(__name__)

WINDOW = 4
MSG_BYTES = 10
BLOCK_MAGIC = b"CQBLK\x00\x01\x00"
_RECORD = np.dtype([("data", "i1", WINDOW * MSG_BYTES), ("label", "u1"), ("index", "<i8")])


def encode_frame(frame: CanFrame) -> bytes:
    """10 bytes: big-endian 11-bit id in two bytes, then the zero-padded payload."""
    return bytes((frame.can_id >> 8, frame.can_id & 0xFF)) + frame.payload


def encode_frames(frames: Sequence[CanFrame]) -> np.ndarray:
    """Vectorised :func:`encode_frame`; returns an ``(N, 10)`` uint8 array."""
    out = np.empty((len(frames), MSG_BYTES), dtype=np.uint8)
    for i, f in enumerate(frames):
        out[i, 0] = f.can_id >> 8
        out[i, 1] = f.can_id & 0xFF
        out[i, 2:] = np.frombuffer(f.payload, dtype=np.uint8)
    return out


def label_block(labels: Sequence[Label]) -> Label:
    """Benign only if every frame is benign, else the earliest attack's class."""
    for lab in labels:
        if lab != Label.BENIGN:
            return Label(lab)
    return Label.BENIGN


@dataclass(frozen=True)
class FeatureBlock:
    data: np.ndarray  # (40,) int8
    label: Label
    start: int = 0


@dataclass
class BlockSet:
    """A batch of blocks held column-wise; what training and evaluation consume."""

    data: np.ndarray  # (N, 40) int8
    labels: np.ndarray  # (N,) uint8
    index: np.ndarray  # (N,) int64 window start positions

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if self.data.ndim != 2:
            raise ValueError("block data must be 2-D (blocks x bytes)")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.index = np.asarray(self.index, dtype=np.int64)
        if not len(self.data) == len(self.labels) == len(self.index):
            raise ValueError("block arrays differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> FeatureBlock:
        return FeatureBlock(self.data[i], Label(int(self.labels[i])), int(self.index[i]))

    def take(self, idx) -> "BlockSet":
        return BlockSet(self.data[idx], self.labels[idx], self.index[idx])

    @classmethod
    def empty(cls, width: int = WINDOW * MSG_BYTES) -> "BlockSet":
        return cls(np.zeros((0, width), np.int8), np.zeros(0, np.uint8), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["BlockSet"]) -> "BlockSet":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.data for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.index for p in parts]))

    def class_counts(self) -> dict[Label, int]:
        counts = np.bincount(self.labels, minlength=len(Label))
        return {lab: int(counts[lab]) for lab in Label}


def build_blocks(frames: Sequence[CanFrame], n: int = WINDOW, stride: int | None = None) -> BlockSet:
    """Windows of ``n`` consecutive frames taken every ``stride`` frames.

    ``stride=n`` (the default) gives the non-overlapping dataset layout,
    ``stride=1`` the online sliding layout.
    """
    stride = n if stride is None else stride
    if n < 1 or stride < 1:
        raise ValueError("window size and stride must be positive")
    if len(frames) < n:
        log.warning("only %d frames; need at least %d for one block", len(frames), n)
        return BlockSet.empty(n * MSG_BYTES)
    enc = encode_frames(frames).view(np.int8)
    labels = np.fromiter((int(f.label) for f in frames), dtype=np.uint8, count=len(frames))
    starts = np.arange(0, len(frames) - n + 1, stride, dtype=np.int64)
    windows = starts[:, None] + np.arange(n)[None, :]
    data = enc[windows].reshape(len(starts), n * MSG_BYTES)
    win_labels = labels[windows]
    # earliest non-benign frame decides the class
    attack = win_labels != Label.BENIGN
    first = np.argmax(attack, axis=1)
    block_labels = np.where(attack.any(axis=1), win_labels[np.arange(len(starts)), first], 0)
    return BlockSet(data, block_labels, starts)


def to_model_input(data: np.ndarray) -> np.ndarray:
    """Real-valued view used in training: signed byte ``b`` maps to ``b / 128``."""
    return np.asarray(data, dtype=np.int8).astype(np.float64) / 128.0


@dataclass
class DatasetSplit:
    train: BlockSet
    validation: BlockSet
    test: BlockSet
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def split_sizes(total: int, ratios: Sequence[int] = (85, 10, 5)) -> tuple[int, int, int]:
    if len(ratios) != 3 or sum(ratios) != 100 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative parts summing to 100, got {ratios}")
    n_val = total * ratios[1] // 100
    n_test = total * ratios[2] // 100
    return total - n_val - n_test, n_val, n_test


def split_dataset(blocks: BlockSet, ratios: Sequence[int] = (85, 10, 5), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/validation/test cuts."""
    if len(blocks) == 0:
        raise ValueError("cannot split an empty block set")
    n_train, n_val, _ = split_sizes(len(blocks), ratios)
    order = np.random.default_rng(seed).permutation(len(blocks))
    return DatasetSplit(
        blocks.take(order[:n_train]),
        blocks.take(order[n_train:n_train + n_val]),
        blocks.take(order[n_train + n_val:]),
        seed,
    )


def write_blocks(blocks: BlockSet, path) -> None:
    """Binary layout: 8-byte magic/version, then packed little-endian
    records of 40 data bytes, 1 label byte and an 8-byte window index."""
    if blocks.data.shape[1] != WINDOW * MSG_BYTES:
        raise ValueError("block files hold 40-byte blocks only")
    rec = np.empty(len(blocks), dtype=_RECORD)
    rec["data"] = blocks.data
    rec["label"] = blocks.labels
    rec["index"] = blocks.index
    with open(Path(path), "wb") as fh:
        fh.write(BLOCK_MAGIC)
        fh.write(rec.tobytes())


def read_blocks(path) -> BlockSet:
    raw = Path(path).read_bytes()
    if raw[:len(BLOCK_MAGIC)] != BLOCK_MAGIC:
        raise ValueError(f"{path}: not a block file (bad magic/version)")
    body = raw[len(BLOCK_MAGIC):]
    if len(body) % _RECORD.itemsize:
        raise ValueError(f"{path}: truncated block record")
    rec = np.frombuffer(body, dtype=_RECORD)
    if np.any(rec["label"] >= len(Label)):
        raise ValueError(f"{path}: invalid class label in block file")
    return BlockSet(rec["data"].copy(), rec["label"].copy(), rec["index"].copy())


def is_block_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(BLOCK_MAGIC)) == BLOCK_MAGIC
