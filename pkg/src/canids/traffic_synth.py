"""Synthetic CAN traffic with attack injection.

Normal traffic is a merge of per-ID periodic emitters with uniform jitter.
Injectors add ``Injected`` records at a fixed rate inside optional burst
windows and merge them by timestamp, leaving the original records and their
order untouched.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .can_log import MAX_CAN_ID, CanRecord, Flag

BASE_TIME = 1_500_000_000.0


@dataclass(frozen=True)
class TrafficProfile:
    """``id_table`` rows are ``(can_id, period_ms, jitter_fraction)``."""

    id_table: Sequence[tuple[int, float, float]]
    duration: float
    seed: int = 0
    start_time: float = BASE_TIME

    def __post_init__(self):
        for can_id, period, jitter in self.id_table:
            if not 0 <= can_id <= MAX_CAN_ID:
                raise ValueError(f"CAN ID {can_id:#x} outside 29-bit range")
            if period <= 0:
                raise ValueError(f"period for {can_id:#x} must be positive")
            if not 0 <= jitter < 0.5:
                raise ValueError(f"jitter for {can_id:#x} must lie in [0, 0.5)")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def distinct_ids(self) -> int:
        return len({row[0] for row in self.id_table})


class AttackKind(str, enum.Enum):
    DOS = "DoS"
    FUZZY = "Fuzzy"
    TARGETED = "TargetedId"
    MALFUNCTION = "Malfunction"


@dataclass(frozen=True)
class InjectionSpec:
    kind: AttackKind
    rate: float
    target_id: int | None = None
    id_pool: str = "random29"
    payload: bytes | None = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("injection rate must be positive")
        if self.kind in (AttackKind.TARGETED, AttackKind.MALFUNCTION) and self.target_id is None:
            raise ValueError(f"{self.kind.value} injection needs a target_id")

    def apply(self, stream: Sequence[CanRecord], seed: int, windows=None) -> list[CanRecord]:
        if self.kind is AttackKind.DOS:
            return inject_dos(stream, self.rate, seed, windows=windows)
        if self.kind is AttackKind.FUZZY:
            return inject_fuzzy(stream, self.rate, seed, id_pool=self.id_pool, windows=windows)
        return inject_targeted(stream, self.target_id, self.payload, self.rate, seed, windows=windows)


def gen_normal_traffic(profile: TrafficProfile) -> list[CanRecord]:
    if not profile.id_table:
        raise ValueError("id_table is empty")
    rng = np.random.default_rng(profile.seed)
    times, ids, payloads = [], [], []
    for can_id, period_ms, jitter in profile.id_table:
        period = period_ms / 1000.0
        n = int(np.floor(profile.duration / period + 1e-9))
        if n == 0:
            continue
        # Phase kept inside [j*P, (1-j)P) so jittered times stay in [0, duration).
        phase = rng.uniform(jitter * period, (1 - jitter) * period) if jitter else rng.uniform(0, period)
        t = phase + np.arange(n) * period
        if jitter:
            t = t + rng.uniform(-jitter, jitter, n) * period
        base = rng.integers(0, 256, 8, dtype=np.uint8)
        data = np.tile(base, (n, 1))
        data[:, 7] = np.arange(n) % 256  # rolling counter byte
        times.append(t)
        ids.append(np.full(n, can_id, dtype=np.int64))
        payloads.append(data)
    t = np.concatenate(times)
    order = np.argsort(t, kind="stable")
    t = profile.start_time + t[order]
    ids = np.concatenate(ids)[order]
    payloads = np.concatenate(payloads)[order]
    return [CanRecord(float(ts), int(i), 8, p.tobytes(), Flag.NORMAL)
            for ts, i, p in zip(t, ids, payloads)]


def _span(stream: Sequence[CanRecord]) -> tuple[float, float]:
    if not stream:
        raise ValueError("cannot infer an injection window from an empty stream")
    return stream[0].timestamp, stream[-1].timestamp


def _injection_times(stream, rate: float, rng: np.random.Generator, windows) -> np.ndarray:
    if rate <= 0:
        raise ValueError("injection rate must be positive")
    if windows is None:
        windows = [_span(stream)]
    out = []
    for start, stop in windows:
        n = int(round(rate * (stop - start)))
        out.append(start + (np.arange(n) + rng.uniform()) / rate)
    return np.concatenate(out) if out else np.zeros(0)


def _merge(stream: Sequence[CanRecord], injected: list[CanRecord]) -> list[CanRecord]:
    # heapq.merge is stable: on equal timestamps the original record stays first.
    return list(heapq.merge(stream, injected, key=lambda r: r.timestamp))


def _random_payloads(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, (n, 8), dtype=np.uint8)


def inject_dos(stream: Sequence[CanRecord], rate: float, seed: int,
               windows: Sequence[tuple[float, float]] | None = None) -> list[CanRecord]:
    """Flood with the highest-priority ID 0x000 at ``rate`` messages/s."""
    rng = np.random.default_rng(seed)
    times = _injection_times(stream, rate, rng, windows)
    data = _random_payloads(rng, len(times))
    injected = [CanRecord(float(t), 0, 8, d.tobytes(), Flag.INJECTED) for t, d in zip(times, data)]
    return _merge(stream, injected)


def inject_fuzzy(stream: Sequence[CanRecord], rate: float, seed: int, id_pool: str = "random29",
                 windows: Sequence[tuple[float, float]] | None = None) -> list[CanRecord]:
    """Inject arbitrary IDs with random payloads.

    ``id_pool="random29"`` draws IDs uniformly from [0, 2^29);
    ``"observed"`` draws from IDs already present in ``stream``.
    """
    rng = np.random.default_rng(seed)
    times = _injection_times(stream, rate, rng, windows)
    if id_pool == "random29":
        ids = rng.integers(0, MAX_CAN_ID + 1, len(times))
    elif id_pool == "observed":
        observed = sorted({r.can_id for r in stream})
        if not observed:
            raise ValueError("observed-ID fuzzing needs a non-empty stream")
        ids = rng.choice(observed, len(times))
    else:
        raise ValueError(f"unknown id_pool {id_pool!r}")
    data = _random_payloads(rng, len(times))
    injected = [CanRecord(float(t), int(i), 8, d.tobytes(), Flag.INJECTED)
                for t, i, d in zip(times, ids, data)]
    return _merge(stream, injected)


def inject_targeted(stream: Sequence[CanRecord], target_id: int, payload_pattern: bytes | None,
                    rate: float, seed: int,
                    windows: Sequence[tuple[float, float]] | None = None) -> list[CanRecord]:
    """Spoof ``target_id`` with a fixed manipulated payload (random if ``None``)."""
    if not 0 <= target_id <= MAX_CAN_ID:
        raise ValueError("target_id outside 29-bit range")
    rng = np.random.default_rng(seed)
    times = _injection_times(stream, rate, rng, windows)
    if payload_pattern is None:
        payload_pattern = _random_payloads(rng, 1)[0].tobytes()
    payload_pattern = bytes(payload_pattern)
    injected = [CanRecord(float(t), target_id, len(payload_pattern), payload_pattern, Flag.INJECTED)
                for t in times]
    return _merge(stream, injected)


def burst_windows(start: float, stop: float, on: float, off: float) -> list[tuple[float, float]]:
    """Alternating attack-on/attack-off intervals, starting with an off period."""
    out = []
    t = start + off
    while t < stop:
        out.append((t, min(t + on, stop)))
        t += on + off
    return out


# -- scenario presets -----------------------------------------------------------

@dataclass(frozen=True)
class CaptureSpec:
    name: str
    class_name: str
    injection: InjectionSpec | None = None


@dataclass(frozen=True)
class Scenario:
    labels: tuple[str, ...]
    id_table: tuple[tuple[int, float, float], ...]
    captures: tuple[CaptureSpec, ...]
    duration: float
    burst_on: float
    burst_off: float


@dataclass
class Capture:
    name: str
    class_name: str
    records: list[CanRecord] = field(repr=False)


def _id_table(ids, periods, jitter=0.15):
    return tuple((i, float(p), jitter) for i, p in zip(ids, periods))


# Source car: 26 IDs, ~1.7k messages/s. Burst rates give injected:normal
# ratios near those of the car-hacking captures (DoS ~0.19, fuzzy ~0.15,
# gear ~0.13, RPM ~0.14) at a ~50% attack duty cycle.
_SOURCE_IDS = (0x0002, 0x0018, 0x0080, 0x0081, 0x00A0, 0x00A1, 0x0120, 0x0153, 0x0164, 0x01F1,
               0x0220, 0x02A0, 0x02B0, 0x0316, 0x0329, 0x0350, 0x0370, 0x043F, 0x0440, 0x04B0,
               0x04F0, 0x0545, 0x05A0, 0x05F0, 0x0690, 0x04F1)
_SOURCE_PERIODS = (10, 10, 10, 10, 20, 20, 10, 10, 20, 20, 10, 20, 10, 10, 10, 20, 20, 10, 50, 20,
                   50, 10, 100, 100, 50, 100)

# Target car: mostly different IDs and cycle mix, ~1.5k messages/s. Ratios
# follow the survival captures (DoS ~0.18, fuzzy ~0.16, malfunction ~0.04).
_TARGET_IDS = (0x0042, 0x0043, 0x0044, 0x0050, 0x0080, 0x0110, 0x0120, 0x0130, 0x0140, 0x0164,
               0x01A0, 0x0260, 0x0280, 0x02C0, 0x0316, 0x0381, 0x0394, 0x04F0, 0x0510, 0x0545,
               0x05F0, 0x0690)
_TARGET_PERIODS = (10, 10, 20, 10, 10, 20, 10, 20, 20, 10, 50, 10, 10, 20, 10, 20, 50, 10, 100, 10,
                   100, 20)

SCENARIOS = {
    "source": Scenario(
        labels=("normal", "DoS", "fuzzy", "gear", "RPM"),
        id_table=_id_table(_SOURCE_IDS, _SOURCE_PERIODS),
        captures=(
            CaptureSpec("normal", "normal"),
            CaptureSpec("dos", "DoS", InjectionSpec(AttackKind.DOS, 640.0)),
            CaptureSpec("fuzzy", "fuzzy", InjectionSpec(AttackKind.FUZZY, 500.0, id_pool="random29")),
            CaptureSpec("gear", "gear", InjectionSpec(AttackKind.TARGETED, 450.0, target_id=0x043F,
                                                     payload=bytes.fromhex("014560ff6b000000"))),
            CaptureSpec("rpm", "RPM", InjectionSpec(AttackKind.TARGETED, 480.0, target_id=0x0316,
                                                   payload=bytes.fromhex("0521680921210066"))),
        ),
        duration=32.0, burst_on=3.0, burst_off=3.0),
    "target": Scenario(
        labels=("normal", "DoS", "fuzzy", "malfunction"),
        id_table=_id_table(_TARGET_IDS, _TARGET_PERIODS),
        captures=(
            CaptureSpec("normal", "normal"),
            CaptureSpec("dos", "DoS", InjectionSpec(AttackKind.DOS, 550.0)),
            CaptureSpec("fuzzy", "fuzzy", InjectionSpec(AttackKind.FUZZY, 480.0, id_pool="random29")),
            CaptureSpec("malfunction", "malfunction",
                        InjectionSpec(AttackKind.MALFUNCTION, 130.0, target_id=0x0316,
                                      payload=bytes.fromhex("00000000ffff0000"))),
        ),
        duration=3.2, burst_on=0.8, burst_off=0.8),
}


def generate_scenario(name: str, seed: int = 0, duration: float | None = None) -> list[Capture]:
    """Render every capture of a preset; file ``k`` uses seed ``seed*1000 + k``."""
    try:
        scenario = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    duration = duration if duration is not None else scenario.duration
    captures = []
    for k, spec in enumerate(scenario.captures):
        file_seed = seed * 1000 + k
        profile = TrafficProfile(scenario.id_table, duration, seed=file_seed,
                                 start_time=BASE_TIME + 3600.0 * k)
        records = gen_normal_traffic(profile)
        if spec.injection is not None:
            windows = burst_windows(profile.start_time, profile.start_time + duration,
                                    scenario.burst_on, scenario.burst_off)
            records = spec.injection.apply(records, file_seed + 500, windows=windows)
        captures.append(Capture(spec.name, spec.class_name, records))
    return captures
