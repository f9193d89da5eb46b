"""Working-set sweeps on one core or many."""

import dataclasses
import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from . import analysis, kernels, memory
from .errors import ConfigError, MeasurementError
from .kernels import KernelSpec, RunContext, check_layout, execute_kernel
from .memory import BufferRequest, HugepagePolicy
from .timer import calibrate, default_timer

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
DEFAULT_REPETITIONS = 100
DEFAULT_MIN_BYTES_PER_SAMPLE = 256 * MiB
DEFAULT_ISSUE_WIDTH = 4
GRID_START = 8 * KiB
GRID_POINTS_PER_OCTAVE = 4


class HostPlatform:
    """Real kernels on real memory, timed with the best available counter."""

    authoritative = True
    pins_threads = True

    def __init__(self, timer=None, calibration=None):
        self._timer = timer or default_timer()
        self._calibration = calibration

    @property
    def name(self):
        return f"host:{self._timer.source.value}"

    def timer(self, worker=0):
        return self._timer

    def calibration(self):
        if self._calibration is None:
            self._calibration = calibrate(self._timer)
        return self._calibration

    def allocate(self, req, worker=0):
        return memory.allocate(req)

    def resolve(self, spec):
        return kernels.resolve_kernel(spec)


def platform_name(platform):
    return getattr(platform, "name", None) or "virtual"


@dataclass(frozen=True)
class SweepConfig:
    kernel: KernelSpec
    sizes_bytes: tuple = None  # None: default grid
    repetitions: int = DEFAULT_REPETITIONS
    min_bytes_per_sample: int = DEFAULT_MIN_BYTES_PER_SAMPLE
    cores: tuple = (0,)
    alignment_bytes: int = 64
    hugepage_policy: HugepagePolicy = HugepagePolicy.TRANSPARENT
    subtract_loop_overhead: bool = False
    subtract_timer_overhead: bool = False
    pattern_x: float = memory.DEFAULT_PATTERN_X
    issue_width: int = None

    def __post_init__(self):
        if isinstance(self.kernel, str):
            object.__setattr__(self, "kernel", kernels.parse_kernel_id(self.kernel))
        if self.sizes_bytes is not None:
            object.__setattr__(self, "sizes_bytes", tuple(int(s) for s in self.sizes_bytes))
        object.__setattr__(self, "cores", tuple(int(c) for c in self.cores))
        object.__setattr__(self, "hugepage_policy", HugepagePolicy(self.hugepage_policy))

    def validate(self, metadata, sizes=None):
        sizes = self.sizes_bytes if sizes is None else sizes
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.min_bytes_per_sample < 1:
            raise ConfigError("min_bytes_per_sample must be positive")
        if not self.cores:
            raise ConfigError("at least one core is required")
        if len(set(self.cores)) != len(self.cores):
            raise ConfigError("duplicate core ids")
        if not sizes:
            raise ConfigError("size grid is empty")
        for a, b in zip(sizes, sizes[1:]):
            if b <= a:
                raise ConfigError(f"sizes must be strictly increasing ({a} then {b})")
        gran = math.lcm(metadata.size_granularity, self.alignment_bytes)
        for s in sizes:
            if s <= 0 or s % gran:
                raise ConfigError(
                    f"size {s} B is not a positive multiple of {gran} B "
                    f"(kernel stride and pattern granularity)")
        memory.check_pattern_value(self.pattern_x)
        BufferRequest(sizes[-1], self.alignment_bytes, None, self.hugepage_policy)

    def echo(self):
        data = dataclasses.asdict(self)
        data["kernel"] = self.kernel.kernel_id
        data["hugepage_policy"] = self.hugepage_policy.value
        data["sizes_bytes"] = list(self.sizes_bytes) if self.sizes_bytes is not None else None
        data["cores"] = list(self.cores)
        return data

    def config_hash(self):
        blob = json.dumps(self.echo(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SamplePoint:
    size_bytes: int
    core_count: int
    repetition_index: int
    elapsed_ticks: Fraction
    bytes_read: int
    warnings: tuple = ()


@dataclass
class SizeStats:
    size_bytes: int
    core_count: int
    sample_count: int
    mean_gbps: float
    stddev_gbps: float
    bytes_per_cycle: float = None
    cumulative_gbps: list = field(default_factory=list, repr=False)
    warnings: tuple = ()


@dataclass
class SeriesResult:
    kernel_id: str
    points: list
    samples: dict = field(repr=False)
    metadata: dict = field(default_factory=dict)

    def gbps_series(self):
        return [(p.size_bytes, p.mean_gbps) for p in self.points]


def default_size_grid(granularity, machine=None, start=GRID_START,
                      per_octave=GRID_POINTS_PER_OCTAVE):
    """Geometric grid from 8 KiB to max(4 x largest cache, 1 GiB).

    Points are rounded to the kernel granularity; duplicates collapse.
    """
    largest = 0
    if machine is not None and machine.cache_levels:
        largest = max(lvl.capacity_bytes for lvl in machine.cache_levels)
    stop = max(4 * largest, GiB)
    sizes = []
    k = 0
    while True:
        raw = start * 2 ** (k / per_octave)
        if raw > stop * (1 + 1e-9):
            break
        s = max(granularity, round(raw / granularity) * granularity)
        if not sizes or s > sizes[-1]:
            sizes.append(s)
        k += 1
    return tuple(sizes)


def passes_for(size, min_bytes_per_sample):
    return max(1, -(-min_bytes_per_sample // size))


def loop_overhead_ticks(kernel, iterations, calibration, nominal_frequency_hz,
                        issue_width=DEFAULT_ISSUE_WIDTH):
    """Ticks spent on loop control for ``iterations`` loop iterations.

    Loop-control instructions issue at ``issue_width`` per cycle and
    cycles convert to ticks through the nominal core frequency.  Returns
    None when that frequency is unknown.
    """
    meta = getattr(kernel, "metadata", kernel)
    if iterations == 0:
        return Fraction(0)
    if not nominal_frequency_hz:
        return None
    cycles = Fraction(iterations) * meta.loop_control_per_iteration / issue_width
    return cycles * calibration.tick_frequency_hz / nominal_frequency_hz


def aggregate_repetition(worker_bytes, worker_ticks):
    """Total bytes of all workers over the time of the slowest one."""
    if len(worker_bytes) != len(worker_ticks) or not worker_ticks:
        raise ValueError("need one (bytes, ticks) pair per worker")
    return sum(worker_bytes), max(worker_ticks)


def pin_current_thread(core):
    """Bind the calling thread to ``core``; returns a warning string on failure."""
    try:
        os.sched_setaffinity(0, {core})
        return None
    except (AttributeError, OSError, ValueError) as exc:
        return f"pinning_failure: core {core}: {exc}"


class Engine:
    def __init__(self, platform=None, machine=None, *, subtract_loop_overhead=False,
                 subtract_timer_overhead=False, issue_width=None):
        self.platform = platform or HostPlatform()
        self.machine = machine
        self.subtract_loop_overhead = subtract_loop_overhead
        self.subtract_timer_overhead = subtract_timer_overhead
        self.issue_width = issue_width
        self.sink = 0.0
        self._warned = set()

    @property
    def nominal_frequency_hz(self):
        return self.machine.nominal_frequency_hz if self.machine is not None else None

    def _issue_width(self):
        if self.issue_width:
            return self.issue_width
        if self.machine is not None and self.machine.decoder_width:
            return self.machine.decoder_width
        return DEFAULT_ISSUE_WIDTH

    def _adjust(self, handle, elapsed, size, passes, cal):
        warnings = []
        adjusted = elapsed
        if self.subtract_timer_overhead:
            adjusted -= cal.read_overhead_ticks
        if self.subtract_loop_overhead:
            iterations = size * passes // handle.metadata.bytes_per_iteration
            loop = loop_overhead_ticks(handle, iterations, cal, self.nominal_frequency_hz,
                                       self._issue_width())
            if loop is None:
                warnings.append("loop_overhead_unavailable: nominal frequency unknown")
            else:
                adjusted -= loop
        if adjusted <= 0 < elapsed:
            warnings.append("overhead_exceeds_elapsed: raw elapsed kept")
            adjusted = elapsed
        if adjusted <= 0:
            raise MeasurementError("timer did not advance across a measured region")
        if isinstance(adjusted, Fraction) and adjusted.denominator == 1:
            adjusted = adjusted.numerator
        return adjusted, tuple(warnings)

    def _measure(self, handle, buffer, size, passes, context):
        timer = self.platform.timer(context.worker)
        t0 = timer.read()
        token = execute_kernel(handle, buffer, passes, size=size, context=context)
        t1 = timer.read()
        self.sink += token.value
        return t1 - t0

    def run_single(self, handle, buffer, size, repetitions, *,
                   min_bytes_per_sample=DEFAULT_MIN_BYTES_PER_SAMPLE, worker=0):
        """Time ``repetitions`` runs of ``passes`` traversals of ``size`` bytes."""
        if repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        check_layout(handle, buffer, size)
        cal = self.platform.calibration()
        passes = passes_for(size, min_bytes_per_sample)
        execute_kernel(handle, buffer, 1, size=size,
                       context=RunContext(worker=worker, warmup=True))
        samples = []
        for rep in range(repetitions):
            elapsed = self._measure(handle, buffer, size, passes,
                                    RunContext(worker=worker, repetition=rep))
            elapsed, warns = self._adjust(handle, elapsed, size, passes, cal)
            samples.append(SamplePoint(size, 1, rep, elapsed, size * passes, warns))
        return samples

    def run_multi(self, handle, cores, sizes, repetitions, *,
                  min_bytes_per_sample=DEFAULT_MIN_BYTES_PER_SAMPLE, request=None,
                  pattern_x=memory.DEFAULT_PATTERN_X):
        """One pinned worker per core, each streaming its private buffer.

        Workers meet at a barrier before every repetition.  Per repetition
        the aggregate is the sum of bytes over the maximum elapsed time.
        Returns ``{size: [SamplePoint, ...]}``.
        """
        if isinstance(sizes, int):
            sizes = (sizes,)
        sizes = tuple(sizes)
        if repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        n = len(cores)
        cal = self.platform.calibration()
        max_size = max(sizes)
        request = request or BufferRequest(max_size)
        barrier = threading.Barrier(n)
        # raw[w][size_index][rep] = (ticks, bytes, warnings)
        raw = [[[None] * repetitions for _ in sizes] for _ in range(n)]
        worker_warnings = [[] for _ in range(n)]
        errors = []

        def work(w, core):
            buffer = None
            try:
                if getattr(self.platform, "pins_threads", False):
                    msg = pin_current_thread(core)
                    if msg:
                        worker_warnings[w].append(msg)
                node = self._numa_node(core)
                buffer = self.platform.allocate(
                    BufferRequest(max_size, request.alignment_bytes, node,
                                  request.hugepage_policy), worker=w)
                worker_warnings[w].extend(buffer.warnings)
                memory.initialize_denormal_safe(buffer, pattern_x)
                for si, size in enumerate(sizes):
                    check_layout(handle, buffer, size)
                    passes = passes_for(size, min_bytes_per_sample)
                    execute_kernel(handle, buffer, 1, size=size,
                                   context=RunContext(w, 0, n, warmup=True))
                    for rep in range(repetitions):
                        barrier.wait()
                        elapsed = self._measure(handle, buffer, size, passes,
                                                RunContext(w, rep, n))
                        elapsed, warns = self._adjust(handle, elapsed, size, passes, cal)
                        raw[w][si][rep] = (elapsed, size * passes, warns)
            except threading.BrokenBarrierError:
                pass
            except BaseException as exc:
                errors.append((w, exc))
                barrier.abort()
            finally:
                if buffer is not None:
                    buffer.close()

        threads = [threading.Thread(target=work, args=(w, c), name=f"membench-worker-{c}")
                   for w, c in enumerate(cores)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            w, exc = errors[0]
            raise MeasurementError(f"worker on core {cores[w]} failed: {exc}") from exc

        run_warnings = tuple(dict.fromkeys(m for ws in worker_warnings for m in ws))
        out = {}
        for si, size in enumerate(sizes):
            points = []
            for rep in range(repetitions):
                cells = [raw[w][si][rep] for w in range(n)]
                total, slowest = aggregate_repetition([c[1] for c in cells],
                                                      [c[0] for c in cells])
                warns = run_warnings + tuple(dict.fromkeys(m for c in cells for m in c[2]))
                points.append(SamplePoint(size, n, rep, slowest, total, warns))
            out[size] = points
        return out

    def _numa_node(self, core):
        if not getattr(self.platform, "pins_threads", False):
            return None
        if self.machine is not None and self.machine.cores:
            return self.machine.numa_node_of(core)
        from .memory import _numa_cpus
        node = 0
        while True:
            cpus = _numa_cpus(node)
            if cpus is None:
                return None
            if core in cpus:
                return node
            node += 1

    def summarize(self, samples_by_size, cal):
        points = []
        for size, samples in samples_by_size.items():
            gbps = [analysis.bandwidth_gbps(s.bytes_read, s.elapsed_ticks, cal) for s in samples]
            cum = analysis.cumulative_mean(gbps)
            mean = cum[-1]
            bpc = None
            if self.nominal_frequency_hz:
                bpc = analysis.gbps_to_bytes_per_cycle(mean, self.nominal_frequency_hz)
            warns = tuple(dict.fromkeys(w for s in samples for w in s.warnings))
            points.append(SizeStats(size, samples[0].core_count, len(samples), mean,
                                    analysis.window_stddev(gbps), bpc, cum, warns))
        return points

    def sweep(self, config):
        """Measure every working-set size of ``config`` in ascending order."""
        self.subtract_loop_overhead = config.subtract_loop_overhead
        self.subtract_timer_overhead = config.subtract_timer_overhead
        if config.issue_width:
            self.issue_width = config.issue_width
        handle = self.platform.resolve(config.kernel)
        meta = handle.metadata
        gran = math.lcm(meta.size_granularity, config.alignment_bytes)
        sizes = config.sizes_bytes or default_size_grid(gran, self.machine)
        config.validate(meta, sizes)
        cal = self.platform.calibration()
        run_warnings = []
        if config.subtract_loop_overhead and not self.nominal_frequency_hz:
            run_warnings.append("loop_overhead_unavailable: nominal frequency unknown")

        request = BufferRequest(sizes[-1], config.alignment_bytes, None, config.hugepage_policy)
        if len(config.cores) == 1:
            samples = self._sweep_single(handle, config, sizes, request, run_warnings)
        else:
            samples = self.run_multi(handle, config.cores, sizes, config.repetitions,
                                     min_bytes_per_sample=config.min_bytes_per_sample,
                                     request=request, pattern_x=config.pattern_x)
        points = self.summarize(samples, cal)
        for p in points:
            run_warnings.extend(p.warnings)
        metadata = {
            "kernel_id": handle.kernel_id,
            "authoritative": bool(handle.authoritative and self.platform.authoritative),
            "backend": platform_name(self.platform),
            "calibration": cal.as_dict(),
            "machine": None if self.machine is None else {
                "name": self.machine.name, "provenance": self.machine.provenance},
            "frequency_basis": "nominal",
            "nominal_frequency_hz": self.nominal_frequency_hz,
            "kernel_metadata": dataclasses.asdict(meta),
            "config": config.echo() | {"sizes_bytes": list(sizes)},
            "config_hash": config.config_hash(),
            "warnings": list(dict.fromkeys(run_warnings)),
        }
        return SeriesResult(handle.kernel_id, points, samples, metadata)

    def _sweep_single(self, handle, config, sizes, request, run_warnings):
        core = config.cores[0]
        restore = None
        if getattr(self.platform, "pins_threads", False):
            try:
                restore = os.sched_getaffinity(0)
            except (AttributeError, OSError):
                restore = None
            msg = pin_current_thread(core)
            if msg:
                run_warnings.append(msg)
        try:
            node = self._numa_node(core)
            buffer = self.platform.allocate(
                BufferRequest(request.size_bytes, request.alignment_bytes, node,
                              request.hugepage_policy))
            run_warnings.extend(buffer.warnings)
            try:
                memory.initialize_denormal_safe(buffer, config.pattern_x)
                return {size: self.run_single(handle, buffer, size, config.repetitions,
                                              min_bytes_per_sample=config.min_bytes_per_sample)
                        for size in sizes}
            finally:
                buffer.close()
        finally:
            if restore is not None:
                os.sched_setaffinity(0, restore)


def sweep(config, platform=None, machine=None):
    return Engine(platform, machine).sweep(config)
