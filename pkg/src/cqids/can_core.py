"""CAN frames and Car-Hacking capture files.

A capture record looks like::

    1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R

The trailing flag only says whether a frame was injected (``T``) or not
(``R``); which attack it belongs to is a property of the file, so the
caller supplies it.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

MAX_STD_ID = 0x800
PAYLOAD_LEN = 8


class Label(enum.IntEnum):
    BENIGN = 0
    DOS = 1
    FUZZING = 2
    SPOOF_RPM = 3

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, text: str | "Label") -> "Label":
        if isinstance(text, Label):
            return text
        key = str(text).strip().lower().replace("-", "").replace("_", "")
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown class label {text!r}") from None


_DISPLAY = {
    Label.BENIGN: "Benign",
    Label.DOS: "DoS",
    Label.FUZZING: "Fuzzing",
    Label.SPOOF_RPM: "SpoofRPM",
}
_ALIASES = {
    "benign": Label.BENIGN, "normal": Label.BENIGN, "b": Label.BENIGN,
    "dos": Label.DOS,
    "fuzzing": Label.FUZZING, "fuzzy": Label.FUZZING, "fuzz": Label.FUZZING,
    "spoofrpm": Label.SPOOF_RPM, "rpm": Label.SPOOF_RPM,
    "rpmspoof": Label.SPOOF_RPM, "spoof": Label.SPOOF_RPM,
}
ATTACK_LABELS = (Label.DOS, Label.FUZZING, Label.SPOOF_RPM)


class CaptureParseError(ValueError):
    """A capture record could not be parsed."""

    def __init__(self, message: str, lineno: int | None = None, path: str | None = None):
        self.reason = message
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    label: Label = Label.BENIGN

    def __post_init__(self):
        if not 0 <= self.can_id < MAX_STD_ID:
            raise ValueError(f"CAN id {self.can_id:#x} is not an 11-bit identifier")
        if not 0 <= self.dlc <= PAYLOAD_LEN:
            raise ValueError(f"DLC {self.dlc} outside 0..8")
        payload = bytes(self.payload)
        if len(payload) < PAYLOAD_LEN:
            payload = payload + bytes(PAYLOAD_LEN - len(payload))
        if len(payload) != PAYLOAD_LEN:
            raise ValueError("payload longer than 8 bytes")
        if any(payload[self.dlc:]):
            raise ValueError("payload bytes beyond DLC must be zero")
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "label", Label(self.label))

    @property
    def is_attack(self) -> bool:
        return self.label != Label.BENIGN


@dataclass
class CaptureStats:
    total: int = 0
    per_label: dict = field(default_factory=lambda: {lab: 0 for lab in Label})
    first_ts: float | None = None
    last_ts: float | None = None
    skipped: int = 0

    def add(self, frame: CanFrame) -> None:
        self.total += 1
        self.per_label[frame.label] += 1
        if self.first_ts is None:
            self.first_ts = frame.timestamp
        self.last_ts = frame.timestamp

    @property
    def duration(self) -> float:
        if self.first_ts is None:
            return 0.0
        return self.last_ts - self.first_ts

    @property
    def frame_rate(self) -> float:
        return self.total / self.duration if self.duration > 0 else 0.0

    @classmethod
    def of(cls, frames: Iterable[CanFrame]) -> "CaptureStats":
        stats = cls()
        for f in frames:
            stats.add(f)
        return stats

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "per_label": {lab.display: n for lab, n in self.per_label.items()},
            "duration_s": self.duration,
            "frame_rate_hz": self.frame_rate,
            "skipped": self.skipped,
        }


def _format_ts(ts: float) -> str:
    text = f"{ts:.6f}"
    if float(text) == ts:
        return text
    return repr(float(ts))


def format_frame(frame: CanFrame) -> str:
    """Render a frame as one capture record (no newline)."""
    fields = [_format_ts(frame.timestamp), f"{frame.can_id:04x}", str(frame.dlc)]
    fields.extend(f"{b:02x}" for b in frame.payload[: frame.dlc])
    fields.append("T" if frame.is_attack else "R")
    return ",".join(fields)


def parse_capture_line(line: str, attack_class: Label | str = Label.BENIGN,
                       lineno: int | None = None) -> CanFrame:
    attack_class = Label.parse(attack_class)
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) < 4:
        raise CaptureParseError(f"expected at least 4 fields, got {len(parts)}", lineno)
    try:
        ts = float(parts[0])
    except ValueError:
        raise CaptureParseError(f"bad timestamp {parts[0]!r}", lineno) from None
    id_text = parts[1]
    if not 3 <= len(id_text) <= 4:
        raise CaptureParseError(f"bad CAN id {id_text!r}", lineno)
    try:
        can_id = int(id_text, 16)
    except ValueError:
        raise CaptureParseError(f"non-hex CAN id {id_text!r}", lineno) from None
    if can_id >= MAX_STD_ID:
        raise CaptureParseError(f"CAN id {can_id:#x} >= 0x800 (extended ids unsupported)", lineno)
    try:
        dlc = int(parts[2])
    except ValueError:
        raise CaptureParseError(f"bad DLC {parts[2]!r}", lineno) from None
    if not 0 <= dlc <= PAYLOAD_LEN:
        raise CaptureParseError(f"DLC {dlc} outside 0..8", lineno)
    if len(parts) != dlc + 4:
        raise CaptureParseError(
            f"DLC {dlc} needs {dlc + 4} fields, got {len(parts)}", lineno)
    data = bytearray()
    for text in parts[3:3 + dlc]:
        if len(text) not in (1, 2):
            raise CaptureParseError(f"bad data byte {text!r}", lineno)
        try:
            data.append(int(text, 16))
        except ValueError:
            raise CaptureParseError(f"non-hex data byte {text!r}", lineno) from None
    flag = parts[-1].upper()
    if flag == "R":
        label = Label.BENIGN
    elif flag == "T":
        if attack_class == Label.BENIGN:
            raise CaptureParseError("injected frame (flag T) in a benign-only capture", lineno)
        label = attack_class
    else:
        raise CaptureParseError(f"unknown flag {parts[-1]!r}", lineno)
    return CanFrame(ts, can_id, dlc, bytes(data), label)


def iter_capture(path, attack_class: Label | str = Label.BENIGN, strict: bool = True,
                 stats: CaptureStats | None = None) -> Iterator[CanFrame]:
    """Stream frames from a capture file.

    In lenient mode (``strict=False``) unparseable lines are skipped and
    counted in ``stats.skipped``. Timestamps must not go backwards.
    """
    attack_class = Label.parse(attack_class)
    stats = stats if stats is not None else CaptureStats()
    last_ts = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frame = parse_capture_line(line, attack_class, lineno)
                if last_ts is not None and frame.timestamp < last_ts:
                    raise CaptureParseError("timestamp goes backwards", lineno)
            except CaptureParseError as exc:
                if strict:
                    raise CaptureParseError(exc.reason, lineno, str(path)) from None
                stats.skipped += 1
                continue
            last_ts = frame.timestamp
            stats.add(frame)
            yield frame


def read_capture(path, attack_class: Label | str = Label.BENIGN,
                 strict: bool = True) -> tuple[list[CanFrame], CaptureStats]:
    stats = CaptureStats()
    frames = list(iter_capture(path, attack_class, strict=strict, stats=stats))
    if not frames:
        log.warning("capture %s contains no frames", path)
    if stats.skipped:
        log.warning("skipped %d malformed lines in %s", stats.skipped, path)
    return frames, stats


def write_capture(frames: Iterable[CanFrame], path) -> int:
    n = 0
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        for frame in frames:
            fh.write(format_frame(frame))
            fh.write("\n")
            n += 1
    return n


def label_counts(frames: Iterable[CanFrame]) -> Counter:
    return Counter(f.label for f in frames)
