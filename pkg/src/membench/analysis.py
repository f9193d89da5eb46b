"""Turn raw (bytes, ticks) samples into reported quantities.

GB/s is decimal (10^9 bytes/s).  B/cycle always uses the nominal
frequency of the machine spec; no attempt is made to track DVFS.
"""

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import AnalysisError

KNEE_THRESHOLD = 1.3
KNEE_WINDOW = 3
# ratios computed in floating point may land an ulp under an exact 1.3
KNEE_RATIO_SLACK = 1e-9
STDDEV_WINDOW = 50
DRAM = "DRAM"


def bandwidth_gbps(nbytes, elapsed_ticks, cal):
    if elapsed_ticks <= 0:
        raise AnalysisError("zero_elapsed: bandwidth needs a positive elapsed time")
    seconds = float(elapsed_ticks) / cal.tick_frequency_hz
    return nbytes / seconds / 1e9


def bytes_per_cycle(nbytes, elapsed_ticks, cal, nominal_frequency_hz):
    if not nominal_frequency_hz:
        raise AnalysisError("missing_frequency: B/cycle needs the nominal core frequency")
    if elapsed_ticks <= 0:
        raise AnalysisError("zero_elapsed: bandwidth needs a positive elapsed time")
    seconds = float(elapsed_ticks) / cal.tick_frequency_hz
    return nbytes / (seconds * nominal_frequency_hz)


def gbps_to_bytes_per_cycle(gbps, nominal_frequency_hz):
    if not nominal_frequency_hz:
        raise AnalysisError("missing_frequency: B/cycle needs the nominal core frequency")
    return gbps * 1e9 / nominal_frequency_hz


def cumulative_mean(samples):
    """Running means; element k is the mean of ``samples[:k+1]``, correctly rounded."""
    if len(samples) == 0:
        raise AnalysisError("empty_input: cumulative mean of nothing")
    out = []
    total = Fraction(0)
    for k, s in enumerate(samples, start=1):
        total += Fraction(s)
        out.append(float(total / k))
    return out


def population_stddev(values):
    if len(values) == 0:
        raise AnalysisError("empty_input")
    # statistics works in exact rationals: a constant series gives exactly 0
    return statistics.pstdev(values)


def window_stddev(values, window=STDDEV_WINDOW):
    """Population stddev over the trailing ``window`` repetitions."""
    return population_stddev(list(values)[-window:])


@dataclass
class QuadAggregate:
    means: list
    stddevs: list
    dropped: int = 0
    warnings: list = field(default_factory=list)


def aggregate_quad(values):
    """Mean and population stddev of non-overlapping groups of four."""
    values = list(values)
    full = len(values) // 4 * 4
    agg = QuadAggregate([], [], dropped=len(values) - full)
    if agg.dropped:
        agg.warnings.append(f"dropped_tail: {agg.dropped} trailing value(s) do not fill a group")
    for i in range(0, full, 4):
        group = values[i:i + 4]
        agg.means.append(math.fsum(group) / 4)
        agg.stddevs.append(population_stddev(group))
    return agg


def efficiency(measured_gbps, peak_gbps):
    """Fraction of peak, or None when the peak is unknown."""
    if peak_gbps is None:
        return None
    if peak_gbps <= 0:
        raise AnalysisError("peak bandwidth must be positive")
    return float(measured_gbps) / float(peak_gbps)


def scaling_factor(multi, single):
    """Per-level ratio of multi-core to single-core bandwidth.

    Both arguments map level name -> GB/s and must cover the same levels.
    """
    if set(multi) != set(single):
        raise AnalysisError(
            f"level_mismatch: {sorted(set(multi) ^ set(single))} present in only one series")
    return {level: float(multi[level]) / float(single[level]) for level in multi}


# -- level geometry ----------------------------------------------------------

@dataclass(frozen=True)
class LevelRange:
    name: str
    capacity_bytes: int  # per-worker effective capacity; None for DRAM
    indistinct: bool = False


def effective_levels(spec, core_count=1):
    """Per-worker working-set limits of each cache level, then DRAM.

    A shared level is split among the workers using it.  A level whose
    per-worker share does not exceed the combined private capacity below
    it cannot show its own plateau and is marked indistinct.
    """
    out = []
    below = 0
    for lvl in spec.cache_levels:
        eff = lvl.capacity_bytes // lvl.sharers(core_count)
        out.append(LevelRange(lvl.level_name, eff, indistinct=eff <= below))
        below += eff
    out.append(LevelRange(DRAM, None))
    return out


def classify_size(size, levels):
    for lvl in levels:
        if lvl.indistinct:
            continue
        if lvl.capacity_bytes is None or size <= lvl.capacity_bytes:
            return lvl.name
    return DRAM


def level_peak_gbps(spec, level_name, core_count=1):
    """Peak for ``core_count`` workers; DRAM counts the sockets they span."""
    if level_name == DRAM:
        per_socket = spec.dram_peak_gbps_per_socket
        if per_socket is None:
            return None
        cores_per_socket = max(1, len(spec.cores) // spec.sockets) if spec.cores else core_count
        sockets = min(spec.sockets, max(1, math.ceil(core_count / cores_per_socket)))
        return per_socket * sockets
    lvl = spec.level(level_name)
    if lvl is None:
        return None
    peak = lvl.peak_gbps(spec.nominal_frequency_hz)
    return None if peak is None else peak * core_count


def plateau_points(points, levels):
    """Group ``(size, gbps)`` points by level, keeping those clear of boundaries."""
    groups = {}
    distinct = [lvl for lvl in levels if not lvl.indistinct]
    prev_cap = 0
    for lvl in distinct:
        if lvl.capacity_bytes is None:
            core = [(s, g) for s, g in points if s > 4 * prev_cap]
            loose = [(s, g) for s, g in points if s > prev_cap]
        else:
            core = [(s, g) for s, g in points
                    if 2 * prev_cap < s <= 0.75 * lvl.capacity_bytes]
            loose = [(s, g) for s, g in points if prev_cap < s <= lvl.capacity_bytes]
            prev_cap = lvl.capacity_bytes
        groups[lvl.name] = core or loose
    return groups


@dataclass(frozen=True)
class LevelEfficiency:
    level: str
    measured_gbps: float
    peak_gbps: float = None
    efficiency_fraction: float = None
    scaling_factor_vs_single_core: float = None
    flags: tuple = ()


def efficiency_report(points, spec, core_count=1, single_core_points=None):
    """Plateau bandwidth per level, with efficiency against the peak.

    ``points`` is a list of ``(size_bytes, gbps)``.
    """
    levels = effective_levels(spec, core_count)
    groups = plateau_points(points, levels)
    single = None
    if single_core_points is not None:
        single = plateau_points(single_core_points, effective_levels(spec, 1))
    report = []
    for lvl in levels:
        if lvl.indistinct:
            report.append(LevelEfficiency(lvl.name, None, flags=("indistinct",)))
            continue
        pts = groups.get(lvl.name) or []
        if not pts:
            continue
        measured = math.fsum(g for _, g in pts) / len(pts)
        peak = level_peak_gbps(spec, lvl.name, core_count)
        eff = efficiency(measured, peak)
        flags = []
        if eff is not None and eff > 1:
            flags.append("above_peak" if eff < 1.5 else "implausible")
        scale = None
        if single is not None and single.get(lvl.name):
            base = math.fsum(g for _, g in single[lvl.name]) / len(single[lvl.name])
            scale = measured / base
        report.append(LevelEfficiency(lvl.name, measured, None if peak is None else float(peak),
                                      eff, scale, tuple(flags)))
    return report


# -- knee detection ----------------------------------------------------------

@dataclass(frozen=True)
class KneeEstimate:
    boundary_bytes: int
    upstream_level_gbps: float
    downstream_level_gbps: float
    confidence: str  # "clear" | "weak"
    ratio: float
    level_name: str = None
    nearest_capacity_bytes: int = None


def _mean(values):
    return math.fsum(values) / len(values)


def _run_peaks(run, window):
    """Local maxima of a run of candidate boundaries, at least ``window`` apart.

    On sparse grids two drops can sit close enough that their scoring
    windows overlap and the candidates form one run; each drop still shows
    up as its own local maximum.
    """
    peaks = [item for k, item in enumerate(run)
             if (k == 0 or item[1] >= run[k - 1][1])
             and (k == len(run) - 1 or item[1] > run[k + 1][1])]
    chosen = []
    for item in sorted(peaks, key=lambda it: -it[1]):
        if all(abs(item[0] - c[0]) >= window for c in chosen):
            chosen.append(item)
    return sorted(chosen)


def detect_knees(series, spec=None, core_count=1, threshold=KNEE_THRESHOLD, window=KNEE_WINDOW):
    """Sizes after which bandwidth drops to a lower plateau.

    ``series`` is a list of ``(size_bytes, gbps)``.  Each boundary between
    adjacent points is scored by the ratio of the mean of up to ``window``
    points before it to the mean of up to ``window`` points after it;
    runs of boundaries scoring at least ``threshold`` collapse to their
    local maxima.  The reported boundary is the last size of the
    upstream plateau.
    """
    series = sorted(series)
    if len(series) < 8:
        raise AnalysisError(f"insufficient_points: need at least 8, got {len(series)}")
    sizes = [s for s, _ in series]
    bw = [float(g) for _, g in series]
    scored = []
    for i in range(2, len(series) - 1):
        left, right = bw[max(0, i - window):i], bw[i:i + window]
        if len(right) < 2 or _mean(right) <= 0:
            continue
        scored.append((i, _mean(left) / _mean(right), left, right))

    knees = []
    run = []
    for item in scored + [None]:
        if item is not None and item[1] >= threshold * (1 - KNEE_RATIO_SLACK):
            run.append(item)
            continue
        for i, ratio, left, right in _run_peaks(run, window):
            spread = max(max(left) / min(left), max(right) / min(right)) - 1
            knees.append(KneeEstimate(
                boundary_bytes=sizes[i - 1],
                upstream_level_gbps=_mean(left),
                downstream_level_gbps=_mean(right),
                confidence="clear" if spread < 0.1 else "weak",
                ratio=ratio,
            ))
        run = []

    if spec is not None:
        caps = [lvl for lvl in effective_levels(spec, core_count)
                if lvl.capacity_bytes is not None and not lvl.indistinct]
        if caps:
            annotated = []
            for k in knees:
                best = min(caps, key=lambda lvl: abs(math.log2(k.boundary_bytes / lvl.capacity_bytes)))
                annotated.append(KneeEstimate(k.boundary_bytes, k.upstream_level_gbps,
                                              k.downstream_level_gbps, k.confidence, k.ratio,
                                              best.name, best.capacity_bytes))
            knees = annotated
    return knees


def segment_labels(sizes, knees):
    """Label each size by the plateau segment it falls in (``seg0``, ``seg1``...)."""
    bounds = sorted(k.boundary_bytes for k in knees)
    return [f"seg{sum(1 for b in bounds if s > b)}" for s in sizes]
