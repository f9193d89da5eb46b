"""Serialized timestamps and timer calibration.

Every backend orders the read after all previously issued memory
operations: ``DSB SY; ISB; MRS CNTVCT_EL0`` on aarch64, ``MFENCE; LFENCE;
RDTSC`` on x86-64, and a sequentially-consistent fence before
``CLOCK_MONOTONIC`` for the OS fallback.
"""

import enum
import threading
import time
from dataclasses import dataclass
from fractions import Fraction

from . import native
from .errors import BackendUnavailable, CalibrationError

MAX_READ_OVERHEAD_TICKS = 10_000


class TimerSource(str, enum.Enum):
    HARDWARE_COUNTER = "hardware_counter"
    OS_MONOTONIC = "os_monotonic"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class TimerCalibration:
    tick_frequency_hz: int
    read_overhead_ticks: Fraction
    source: TimerSource

    def __post_init__(self):
        if self.tick_frequency_hz <= 0:
            raise CalibrationError("tick frequency must be positive")
        if not 0 <= self.read_overhead_ticks < MAX_READ_OVERHEAD_TICKS:
            raise CalibrationError(
                f"read overhead {float(self.read_overhead_ticks):.1f} ticks outside "
                f"[0, {MAX_READ_OVERHEAD_TICKS})")

    def as_dict(self):
        return {
            "tick_frequency_hz": self.tick_frequency_hz,
            "read_overhead_ticks": float(self.read_overhead_ticks),
            "source": self.source.value,
        }


class HardwareCounterTimer:
    source = TimerSource.HARDWARE_COUNTER

    def __init__(self):
        lib = native.common_library()
        if lib is None or not lib.mb_has_hw_counter():
            raise BackendUnavailable("no readable hardware counter on this host")
        self._read = lib.mb_hw_counter
        self._freq = lib.mb_hw_counter_freq

    def read(self):
        return self._read()

    def declared_frequency_hz(self):
        # CNTFRQ on aarch64; x86 TSC rate is not architecturally exposed
        return self._freq() or None


class MonotonicTimer:
    source = TimerSource.OS_MONOTONIC

    def __init__(self):
        lib = native.common_library()
        self._read = lib.mb_fenced_monotonic_ns if lib is not None else time.monotonic_ns

    def read(self):
        return self._read()

    def declared_frequency_hz(self):
        return 1_000_000_000


class VirtualTimer:
    """Deterministic clock that only moves when told to.

    Each ``read`` returns the current value and then advances the clock by
    ``ticks_per_read``, which models the cost of the read itself.
    Values are exact rationals so programmed schedules are reproduced
    without rounding.
    """

    source = TimerSource.VIRTUAL

    def __init__(self, tick_frequency_hz, ticks_per_read=0, start=0):
        self.tick_frequency_hz = int(tick_frequency_hz)
        self.ticks_per_read = Fraction(ticks_per_read)
        self._now = Fraction(start)
        self._lock = threading.Lock()

    def read(self):
        with self._lock:
            value = self._now
            self._now += self.ticks_per_read
        return int(value) if value.denominator == 1 else value

    def advance(self, ticks):
        if ticks < 0:
            raise ValueError("virtual time cannot run backwards")
        with self._lock:
            self._now += Fraction(ticks)

    def declared_frequency_hz(self):
        return self.tick_frequency_hz


def default_timer():
    """Best available real timer: the hardware counter, else the OS clock."""
    try:
        return HardwareCounterTimer()
    except BackendUnavailable:
        return MonotonicTimer()


def read_serialized_timestamp(timer):
    return timer.read()


def _measure_frequency(timer, window_s, sleep, clock_ns):
    os0 = clock_ns()
    c0 = timer.read()
    sleep(window_s)
    c1 = timer.read()
    os1 = clock_ns()
    if os1 <= os0:
        raise CalibrationError("reference clock did not advance")
    return (c1 - c0) * 1e9 / (os1 - os0)


def calibrate(timer, *, window_s=0.1, pairs=1000, sleep=time.sleep,
              clock_ns=time.perf_counter_ns):
    """Determine tick frequency and mean cost of one serialized read.

    When the backend does not declare its frequency it is measured twice
    against the OS clock over ``window_s`` each; the two estimates must
    agree within 1%.
    """
    if window_s < 0.1:
        raise ValueError("frequency measurement window must be at least 100 ms")
    if pairs < 1000:
        raise ValueError("need at least 1000 read pairs for the overhead estimate")
    freq = timer.declared_frequency_hz()
    if freq is None:
        first = _measure_frequency(timer, window_s, sleep, clock_ns)
        second = _measure_frequency(timer, window_s, sleep, clock_ns)
        if abs(first - second) > 0.01 * max(first, second):
            raise CalibrationError(
                f"unstable calibration: {first:.6g} Hz vs {second:.6g} Hz")
        freq = round((first + second) / 2)

    total = 0
    for _ in range(pairs):
        t1 = timer.read()
        t2 = timer.read()
        total += t2 - t1
    overhead = Fraction(total) / pairs
    return TimerCalibration(int(freq), overhead, timer.source)


def ticks_to_seconds(delta, cal):
    if delta < 0:
        raise ValueError("negative tick delta")
    return Fraction(delta) / cal.tick_frequency_hz
