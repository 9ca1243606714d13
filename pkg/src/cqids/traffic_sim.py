"""Deterministic synthetic CAN traffic with DoS, fuzzing and RPM-spoof injection.

All times are kept on an integer microsecond grid internally so that the
text captures written by :func:`cqids.can_core.write_capture` round-trip
exactly. Every random draw comes from a generator seeded from the profile
or schedule seed; nothing touches global RNG state.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .can_core import MAX_STD_ID, CanFrame, Label

log = logging.getLogger(__name__)

US = 1_000_000
RPM_ID = 0x316


def _to_us(seconds: float) -> int:
    return int(round(seconds * US))


def _ts(us: int) -> float:
    return us / US


@dataclass(frozen=True)
class PeriodicMessage:
    """One periodically transmitted benign message.

    ``base`` is the resting payload; bytes listed in ``counters`` increment
    by one each transmission and bytes in ``sensors`` follow a bounded
    random walk of at most ``step`` per frame within ``[lo, hi]``.
    """

    can_id: int
    period: float
    base: bytes
    dlc: int = 8
    counters: tuple[int, ...] = ()
    sensors: tuple[int, ...] = ()
    step: int = 2
    lo: int = 0
    hi: int = 255
    phase: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"period for id {self.can_id:#x} must be positive")
        if not 0 <= self.can_id < MAX_STD_ID:
            raise ValueError(f"id {self.can_id:#x} is not an 11-bit identifier")
        base = bytes(self.base)[: self.dlc]
        object.__setattr__(self, "base", base + bytes(8 - len(base)))
        for pos in self.counters + self.sensors:
            if not 0 <= pos < self.dlc:
                raise ValueError(f"byte position {pos} outside DLC {self.dlc}")


@dataclass(frozen=True)
class BenignProfile:
    messages: tuple[PeriodicMessage, ...]
    seed: int = 0

    def __post_init__(self):
        ids = [m.can_id for m in self.messages]
        if len(set(ids)) != len(ids):
            raise ValueError("benign profile ids must be distinct")

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(m.can_id for m in self.messages)


@dataclass(frozen=True)
class AttackSchedule:
    attack: Label
    start: float
    stop: float
    rate: float
    flood_id: int = 0x000
    target_id: int = RPM_ID
    spoof_payload: bytes = bytes([0x05, 0x21, 0xFF, 0x1F, 0x21, 0x21, 0x00, 0x6F])
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attack", Label.parse(self.attack))
        if self.attack == Label.BENIGN:
            raise ValueError("an attack schedule needs an attack class")
        if not self.start < self.stop:
            raise ValueError("schedule start must precede stop")
        if not self.rate > 0:
            raise ValueError("attack intensity must be positive")


def default_profile(seed: int = 0) -> BenignProfile:
    """A 16-id profile loosely shaped like a passenger-car powertrain bus."""
    rng = np.random.default_rng(seed)
    layout = [
        # id, period s, dlc, counters, sensors
        (0x018F, 0.010, 8, (), (1, 2)),
        (0x0260, 0.010, 8, (7,), (2, 3)),
        (0x02A0, 0.010, 8, (7,), (0, 1)),
        (0x0329, 0.010, 8, (6,), (1, 2, 3)),
        (0x0545, 0.010, 8, (), (1, 3)),
        (0x0002, 0.010, 8, (6,), (0, 1, 2)),
        (0x0153, 0.010, 8, (7,), (4,)),
        (0x0164, 0.010, 8, (), (2, 5)),
        (0x01F1, 0.020, 8, (), (3,)),
        (0x0220, 0.010, 8, (6,), (0, 4)),
        (RPM_ID, 0.010, 8, (), (2, 3)),
        (0x043F, 0.010, 8, (), (1, 4)),
        (0x0440, 0.020, 8, (), (0,)),
        (0x04F0, 0.020, 8, (7,), (2,)),
        (0x0350, 0.020, 8, (), (1, 5)),
        (0x05A0, 0.100, 2, (), (1,)),
    ]
    messages = []
    for can_id, period, dlc, counters, sensors in layout:
        base = bytearray(rng.integers(0, 256, size=8, dtype=np.int64).astype(np.uint8).tobytes())
        if can_id == RPM_ID:
            base[:] = bytes([0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F])
            lo, hi = 0x40, 0x90
        else:
            lo, hi = 0x10, 0xE0
        for pos in sensors:
            base[pos] = min(max(base[pos], lo), hi)
        phase = float(rng.integers(0, int(period * US))) / US
        messages.append(PeriodicMessage(can_id, period, bytes(base), dlc, counters, sensors,
                                        step=2, lo=lo, hi=hi, phase=phase))
    return BenignProfile(tuple(messages), seed)


def _benign_for(msg: PeriodicMessage, seed: int, start_us: int, end_us: int) -> list[CanFrame]:
    rng = np.random.default_rng([seed, msg.can_id])
    period_us = max(1, _to_us(msg.period))
    first = start_us + _to_us(msg.phase)
    times = np.arange(first, end_us, period_us, dtype=np.int64)
    n = len(times)
    if n == 0:
        return []
    payload = np.tile(np.frombuffer(msg.base, dtype=np.uint8).astype(np.int64), (n, 1))
    for pos in msg.counters:
        payload[:, pos] = (payload[0, pos] + np.arange(n)) % 256
    for pos in msg.sensors:
        steps = rng.integers(-msg.step, msg.step + 1, size=n)
        level = int(payload[0, pos])
        col = np.empty(n, dtype=np.int64)
        for i in range(n):
            col[i] = level
            level = min(max(level + int(steps[i]), msg.lo), msg.hi)
        payload[:, pos] = col
    payload[:, msg.dlc:] = 0
    rows = payload.astype(np.uint8)
    return [CanFrame(_ts(int(t)), msg.can_id, msg.dlc, rows[i].tobytes(), Label.BENIGN)
            for i, t in enumerate(times)]


def gen_benign(profile: BenignProfile, duration: float, start: float = 0.0) -> list[CanFrame]:
    """Benign traffic for ``duration`` seconds beginning at ``start``."""
    if not profile.messages:
        raise ValueError("benign profile has no messages")
    if duration < 0:
        raise ValueError("duration must be non-negative")
    start_us = _to_us(start)
    end_us = start_us + _to_us(duration)
    per_id = [_benign_for(m, profile.seed, start_us, end_us) for m in profile.messages]
    return list(heapq.merge(*per_id, key=lambda f: (f.timestamp, f.can_id)))


def merge_streams(base: Iterable[CanFrame], injected: Iterable[CanFrame]) -> list[CanFrame]:
    """Merge two time-sorted streams; on equal timestamps ``base`` frames come first."""
    return list(heapq.merge(base, injected, key=lambda f: f.timestamp))


def _window(stream: Sequence[CanFrame], schedule: AttackSchedule) -> tuple[int, int] | None:
    start_us, stop_us = _to_us(schedule.start), _to_us(schedule.stop)
    if stream:
        lo, hi = _to_us(stream[0].timestamp), _to_us(stream[-1].timestamp)
        clipped = max(start_us, lo), min(stop_us, hi)
        if clipped != (start_us, stop_us):
            log.warning("%s schedule [%g, %g) exceeds stream span; injecting partially",
                        schedule.attack.display, schedule.start, schedule.stop)
        start_us, stop_us = clipped
    if stop_us <= start_us:
        return None
    return start_us, stop_us


def _periodic_times(start_us: int, stop_us: int, rate: float) -> list[int]:
    n = int(round((stop_us - start_us) / US * rate))
    times = [start_us + int(round(k * US / rate)) for k in range(n)]
    return [t for t in times if t < stop_us]


def _check(schedule: AttackSchedule, expected: Label) -> None:
    if schedule.attack != expected:
        raise ValueError(f"schedule is for {schedule.attack.display}, not {expected.display}")


def inject_dos(stream: Sequence[CanFrame], schedule: AttackSchedule) -> list[CanFrame]:
    """Flood with dominant-id, all-zero frames at a fixed rate."""
    _check(schedule, Label.DOS)
    stream = list(stream)
    win = _window(stream, schedule)
    if win is None:
        return stream
    zero = bytes(8)
    injected = [CanFrame(_ts(t), schedule.flood_id, 8, zero, Label.DOS)
                for t in _periodic_times(*win, schedule.rate)]
    return merge_streams(stream, injected)


def inject_fuzzing(stream: Sequence[CanFrame], schedule: AttackSchedule) -> list[CanFrame]:
    """Random ids and payloads at exponentially distributed intervals."""
    _check(schedule, Label.FUZZING)
    stream = list(stream)
    win = _window(stream, schedule)
    if win is None:
        return stream
    start_us, stop_us = win
    rng = np.random.default_rng([schedule.seed, int(Label.FUZZING)])
    injected = []
    t = start_us
    mean_gap_us = US / schedule.rate
    while True:
        t += max(1, int(round(rng.exponential(mean_gap_us))))
        if t >= stop_us:
            break
        can_id = int(rng.integers(0, MAX_STD_ID))
        payload = rng.integers(0, 256, size=8, dtype=np.int64).astype(np.uint8).tobytes()
        injected.append(CanFrame(_ts(t), can_id, 8, payload, Label.FUZZING))
    return merge_streams(stream, injected)


def inject_spoof(stream: Sequence[CanFrame], schedule: AttackSchedule,
                 known_ids: Iterable[int] | None = None) -> list[CanFrame]:
    """Impersonate ``schedule.target_id`` with a forged payload at a fixed period.

    ``known_ids`` defaults to the ids seen in ``stream``; the target must be
    one of them.
    """
    _check(schedule, Label.SPOOF_RPM)
    stream = list(stream)
    ids = set(known_ids) if known_ids is not None else {f.can_id for f in stream}
    if schedule.target_id not in ids:
        raise ValueError(f"spoof target id {schedule.target_id:#x} is not part of the benign traffic")
    win = _window(stream, schedule)
    if win is None:
        return stream
    payload = bytes(schedule.spoof_payload)
    dlc = len(payload)
    injected = [CanFrame(_ts(t), schedule.target_id, dlc, payload, Label.SPOOF_RPM)
                for t in _periodic_times(*win, schedule.rate)]
    return merge_streams(stream, injected)


INJECTORS = {
    Label.DOS: inject_dos,
    Label.FUZZING: inject_fuzzing,
    Label.SPOOF_RPM: inject_spoof,
}

DEFAULT_RATES = {Label.DOS: 3000.0, Label.FUZZING: 1000.0, Label.SPOOF_RPM: 1000.0}


def burst_schedules(attack: Label | str, duration: float, *, on: float = 2.0, off: float = 3.0,
                    first: float = 1.0, rate: float | None = None, seed: int = 0,
                    start: float = 0.0) -> list[AttackSchedule]:
    """On/off bursts covering ``[start + first, start + duration)``."""
    attack = Label.parse(attack)
    rate = DEFAULT_RATES[attack] if rate is None else rate
    out = []
    t = start + first
    k = 0
    while t < start + duration:
        stop = min(t + on, start + duration)
        out.append(AttackSchedule(attack, t, stop, rate, seed=seed + k))
        t += on + off
        k += 1
    return out


@dataclass
class Scenario:
    """Everything needed to regenerate one capture byte-for-byte."""

    attack: Label | None
    duration: float
    seed: int = 0
    start: float = 0.0
    schedules: list = field(default_factory=list)

    def frames(self, profile: BenignProfile | None = None) -> list[CanFrame]:
        profile = profile or default_profile(self.seed)
        stream = gen_benign(profile, self.duration, self.start)
        for sched in self.schedules:
            if sched.attack == Label.SPOOF_RPM:
                stream = inject_spoof(stream, sched, known_ids=profile.ids)
            else:
                stream = INJECTORS[sched.attack](stream, sched)
        return stream


def simulate(attack: Label | str | None, duration: float, seed: int = 0, *,
             rate: float | None = None, on: float = 2.0, off: float = 3.0,
             start: float = 0.0) -> list[CanFrame]:
    """Benign traffic plus bursts of one attack class (or none)."""
    if attack is None or Label.parse(attack) == Label.BENIGN:
        return gen_benign(default_profile(seed), duration, start)
    schedules = burst_schedules(attack, duration, on=on, off=off, rate=rate,
                                seed=seed, start=start)
    return Scenario(Label.parse(attack), duration, seed, start, schedules).frames()
