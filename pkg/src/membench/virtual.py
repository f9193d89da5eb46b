"""Deterministic simulated hardware for tests and dry runs.

A :class:`VirtualSchedule` maps working-set size to a cost in ticks per
byte.  Executing a kernel on a :class:`VirtualPlatform` advances the
calling worker's virtual clock by exactly that cost, so everything
downstream can be checked against hand-computed numbers.
"""

import threading
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kvfile
from .errors import ConfigError, SpecParseError
from .kernels import (AddressingMode, IsaExtension, KernelHandle, RunContext, check_layout,
                      kernel_metadata)
from .memory import allocate
from .timer import TimerCalibration, TimerSource, VirtualTimer

_JITTER_DOMAIN = 0x6A69747465720000  # distinguishes jitter draws from other Philox users


@dataclass(frozen=True)
class Plateau:
    max_working_set_bytes: int  # None: unbounded
    ticks_per_byte: Fraction
    # applied to every worker when more than one worker is active
    multicore_ticks_scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "ticks_per_byte", Fraction(self.ticks_per_byte))
        object.__setattr__(self, "multicore_ticks_scale", Fraction(self.multicore_ticks_scale))
        if self.ticks_per_byte <= 0:
            raise ConfigError("ticks_per_byte must be positive")
        if self.multicore_ticks_scale <= 0:
            raise ConfigError("multicore_ticks_scale must be positive")


def plateau_for_gbps(max_bytes, gbps, tick_frequency_hz, multicore_ticks_scale=1):
    """Plateau whose single-worker bandwidth is exactly ``gbps`` decimal GB/s."""
    tpb = Fraction(tick_frequency_hz) / (Fraction(gbps) * 10**9)
    return Plateau(max_bytes, tpb, Fraction(multicore_ticks_scale))


@dataclass(frozen=True)
class VirtualSchedule:
    plateaus: tuple
    tick_frequency_hz: int = 1_000_000_000
    per_worker_jitter: Fraction = Fraction(0)
    seed: int = 0
    read_overhead_ticks: Fraction = Fraction(0)
    vector_bytes: int = 64
    # optional per-worker slowdown factors, indexed by worker number
    worker_ticks_scale: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "plateaus", tuple(self.plateaus))
        object.__setattr__(self, "per_worker_jitter", Fraction(self.per_worker_jitter))
        object.__setattr__(self, "read_overhead_ticks", Fraction(self.read_overhead_ticks))
        object.__setattr__(self, "worker_ticks_scale",
                           tuple(Fraction(s) for s in self.worker_ticks_scale))
        if not self.plateaus:
            raise ConfigError("a virtual schedule needs at least one plateau")
        if self.tick_frequency_hz <= 0:
            raise ConfigError("tick_frequency_hz must be positive")
        if not 0 <= self.per_worker_jitter < 1:
            raise ConfigError("per_worker_jitter must be in [0, 1)")
        prev_max, prev_tpb = 0, Fraction(0)
        for i, p in enumerate(self.plateaus):
            if p.max_working_set_bytes is None:
                if i != len(self.plateaus) - 1:
                    raise ConfigError("only the last plateau may be unbounded")
            elif p.max_working_set_bytes <= prev_max:
                raise ConfigError("plateaus must be ordered by working-set size")
            else:
                prev_max = p.max_working_set_bytes
            if p.ticks_per_byte < prev_tpb:
                raise ConfigError("ticks_per_byte must not decrease across plateaus")
            prev_tpb = p.ticks_per_byte
        if any(s <= 0 for s in self.worker_ticks_scale):
            raise ConfigError("worker_ticks_scale entries must be positive")

    def plateau_for(self, size):
        for p in self.plateaus:
            if p.max_working_set_bytes is None or size <= p.max_working_set_bytes:
                return p
        raise ConfigError(f"working set {size} B beyond the last plateau "
                          f"({self.plateaus[-1].max_working_set_bytes} B)")

    def worker_scale(self, worker):
        if worker < len(self.worker_ticks_scale):
            return self.worker_ticks_scale[worker]
        return Fraction(1)

    def calibration(self):
        return TimerCalibration(self.tick_frequency_hz, self.read_overhead_ticks,
                                TimerSource.VIRTUAL)


def jitter_draw(seed, worker, repetition, size):
    """Uniform draw in [-1, 1) from a counter-based stream keyed by the arguments."""
    bitgen = np.random.Philox(key=[seed & (2**64 - 1), _JITTER_DOMAIN],
                              counter=[worker, repetition & (2**64 - 1), size, 0])
    return float(np.random.Generator(bitgen).uniform(-1.0, 1.0))


def virtual_execute(schedule, size, nbytes, context=None):
    """Ticks the simulated hardware needs to stream ``nbytes`` at working set ``size``."""
    ctx = context or RunContext()
    plateau = schedule.plateau_for(size)
    ticks = nbytes * plateau.ticks_per_byte * schedule.worker_scale(ctx.worker)
    if ctx.core_count > 1:
        ticks *= plateau.multicore_ticks_scale
    if schedule.per_worker_jitter and not ctx.warmup:
        u = Fraction(jitter_draw(schedule.seed, ctx.worker, ctx.repetition, size))
        ticks *= 1 + schedule.per_worker_jitter * u
    return ticks


def address_trace(handle, buffer, passes=1, size=None):
    """Simulated (offset, length) accesses of ``passes`` traversals.

    Follows the kernel's cursor scheme literally: manual increment rotates
    over ``cursor_count`` pointers, each advancing by ``cursor_advance_bytes``
    after its load; post-increment and offset addressing use one pointer.
    """
    meta = handle.metadata
    size = buffer.size_bytes if size is None else size
    check_layout(handle, buffer, size)
    lb = meta.load_bytes
    mode = handle.spec.addressing_mode
    trace = []
    for _ in range(passes):
        if mode is AddressingMode.MANUAL_INCREMENT:
            cursors = [c * lb for c in range(meta.cursor_count)]
            load_no = 0
            while cursors[load_no % meta.cursor_count] < size:
                c = load_no % meta.cursor_count
                trace.append((cursors[c], lb))
                cursors[c] += meta.cursor_advance_bytes
                load_no += 1
        elif mode is AddressingMode.POST_INCREMENT:
            pos = 0
            while pos < size:
                trace.append((pos, lb))
                pos += meta.cursor_advance_bytes
        else:
            base = 0
            while base < size:
                for j in range(meta.loads_per_iteration):
                    trace.append((base + j * lb, lb))
                base += meta.cursor_advance_bytes
    return trace


class VirtualPlatform:
    """Kernels and clocks backed by a :class:`VirtualSchedule`.

    Every worker has its own clock; all are independent and start at 0.
    """

    authoritative = False

    def __init__(self, schedule):
        self.schedule = schedule
        self._timers = {}
        self._lock = threading.Lock()
        self.bytes_touched = {}

    def timer(self, worker=0):
        with self._lock:
            if worker not in self._timers:
                self._timers[worker] = VirtualTimer(self.schedule.tick_frequency_hz,
                                                    self.schedule.read_overhead_ticks)
            return self._timers[worker]

    def calibration(self):
        return self.schedule.calibration()

    def allocate(self, req, worker=0):
        return allocate(req, phantom=True)

    def vector_bytes(self, ext):
        ext = IsaExtension(ext)
        if ext is IsaExtension.NEON:
            return 16
        if ext is IsaExtension.SCALAR_PORTABLE:
            return 8
        return self.schedule.vector_bytes

    def resolve(self, spec):
        meta = kernel_metadata(spec, self.vector_bytes(spec.isa_extension))
        return KernelHandle(spec, meta, self._runner, authoritative=False)

    def _runner(self, buffer, size, passes, context):
        ticks = virtual_execute(self.schedule, size, size * passes, context)
        self.timer(context.worker).advance(ticks)
        with self._lock:
            self.bytes_touched[context.worker] = \
                self.bytes_touched.get(context.worker, 0) + size * passes
        # the accumulators of a virtual pass are the quadruple sums: exactly zero
        return 0.0


# -- schedule files (vplat.* keys) ------------------------------------------

def schedule_from_kv(kv):
    freq = kv.int("vplat.tick_frequency_hz", 1_000_000_000)
    plateaus = []
    for i in kv.indices("vplat.plateau"):
        p = f"vplat.plateau.{i}"
        raw_max = kv.str(f"{p}.max_bytes")
        if raw_max is None:
            raise SpecParseError("missing required key", field=f"{p}.max_bytes")
        max_bytes = None if raw_max.lower() in ("inf", "none") else kv.int(f"{p}.max_bytes")
        scale = kv.fraction(f"{p}.multicore_scale", Fraction(1))
        if f"{p}.gbps" in kv:
            plateaus.append(plateau_for_gbps(max_bytes, kv.fraction(f"{p}.gbps"), freq, scale))
        elif f"{p}.ticks_per_byte" in kv:
            plateaus.append(Plateau(max_bytes, kv.fraction(f"{p}.ticks_per_byte"), scale))
        else:
            raise SpecParseError("needs gbps or ticks_per_byte", field=p)
    schedule = VirtualSchedule(
        plateaus=tuple(plateaus),
        tick_frequency_hz=freq,
        per_worker_jitter=kv.fraction("vplat.jitter", Fraction(0)),
        seed=kv.int("vplat.seed", 0),
        read_overhead_ticks=kv.fraction("vplat.read_overhead_ticks", Fraction(0)),
        vector_bytes=kv.int("vplat.vector_bytes", 64),
        worker_ticks_scale=tuple(kv.raw("vplat.worker_scale", "").split(",")
                                 if kv.raw("vplat.worker_scale") else ()),
    )
    unknown = kv.unused("vplat.")
    if unknown:
        raise SpecParseError("unknown key", line=kv.line_of(unknown[0]), field=unknown[0])
    return schedule


def parse_schedule(text):
    return schedule_from_kv(kvfile.parse(text))


def load_schedule(path):
    return schedule_from_kv(kvfile.read(path))


def dump_schedule(schedule):
    pairs = [
        ("vplat.tick_frequency_hz", schedule.tick_frequency_hz),
        ("vplat.seed", schedule.seed),
        ("vplat.jitter", schedule.per_worker_jitter),
        ("vplat.read_overhead_ticks", schedule.read_overhead_ticks),
        ("vplat.vector_bytes", schedule.vector_bytes),
    ]
    if schedule.worker_ticks_scale:
        pairs.append(("vplat.worker_scale", list(schedule.worker_ticks_scale)))
    for i, p in enumerate(schedule.plateaus):
        pairs += [
            (f"vplat.plateau.{i}.max_bytes",
             "inf" if p.max_working_set_bytes is None else p.max_working_set_bytes),
            (f"vplat.plateau.{i}.ticks_per_byte", p.ticks_per_byte),
            (f"vplat.plateau.{i}.multicore_scale", p.multicore_ticks_scale),
        ]
    return kvfile.dump(pairs)


def a64fx_like_schedule(l1_gbps=Fraction("230.4") * Fraction("0.69"), l2_gbps=Fraction(58),
                        hbm_gbps=Fraction(227, 6), **kwargs):
    """Three plateaus shaped like one A64FX core: L1d 64 KiB, L2 8 MiB, HBM2."""
    freq = 1_800_000_000
    return VirtualSchedule(
        plateaus=(
            plateau_for_gbps(64 * 1024, l1_gbps, freq),
            plateau_for_gbps(8 * 1024 * 1024, l2_gbps, freq),
            plateau_for_gbps(None, hbm_gbps, freq),
        ),
        tick_frequency_hz=freq,
        **kwargs,
    )
