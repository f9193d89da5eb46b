"""Machine descriptions, either detected from the host or loaded from a file.

All bandwidths are decimal GB/s.  Rational quantities are kept as
``Fraction`` so peak arithmetic (B/cycle x frequency) is exact.
"""

import enum
import glob
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction

from . import kvfile
from .errors import InvariantViolation, SpecParseError
from .memory import parse_cpu_list

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
PEAK_TOLERANCE = Fraction(1, 1000)


class CacheScope(str, enum.Enum):
    PER_CORE = "per_core"
    PER_GROUP = "per_group"
    SHARED = "shared"


@dataclass(frozen=True)
class CacheLevel:
    level_name: str
    capacity_bytes: int
    scope: CacheScope = CacheScope.PER_CORE
    group_size_cores: int = None
    peak_bytes_per_cycle_per_core: Fraction = None
    peak_gbps_per_core: Fraction = None

    def __post_init__(self):
        if self.scope is not None:
            object.__setattr__(self, "scope", CacheScope(self.scope))
        for name in ("peak_bytes_per_cycle_per_core", "peak_gbps_per_core"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, Fraction(value))

    def peak_gbps(self, nominal_frequency_hz=None):
        if self.peak_gbps_per_core is not None:
            return self.peak_gbps_per_core
        if self.peak_bytes_per_cycle_per_core is not None and nominal_frequency_hz:
            return self.peak_bytes_per_cycle_per_core * nominal_frequency_hz / 10**9
        return None

    def sharers(self, core_count):
        """How many of ``core_count`` active workers compete for one instance."""
        if self.scope is CacheScope.PER_CORE:
            return 1
        if self.scope is CacheScope.PER_GROUP:
            return min(core_count, self.group_size_cores or core_count)
        return core_count


@dataclass(frozen=True)
class MachineSpec:
    name: str
    nominal_frequency_hz: int = None
    cores: tuple = ()  # (core_id, numa_node) pairs
    cache_levels: tuple = ()
    dram_peak_gbps_per_socket: Fraction = None
    sockets: int = 1
    decoder_width: int = None
    dram_type: str = None
    dram_channels: int = None
    provenance: str = "user"
    flags: tuple = ()

    @property
    def core_count(self):
        return len(self.cores)

    def numa_node_of(self, core):
        for cid, node in self.cores:
            if cid == core:
                return node
        return None

    @property
    def dram_peak_gbps(self):
        if self.dram_peak_gbps_per_socket is None:
            return None
        return self.dram_peak_gbps_per_socket * self.sockets

    def level(self, name):
        for lvl in self.cache_levels:
            if lvl.level_name == name:
                return lvl
        return None

    @property
    def has_peaks(self):
        return any(lvl.peak_gbps(self.nominal_frequency_hz) is not None
                   for lvl in self.cache_levels) or self.dram_peak_gbps_per_socket is not None

    def validate(self):
        if not self.name:
            raise InvariantViolation("name", "must not be empty")
        if self.nominal_frequency_hz is not None and self.nominal_frequency_hz <= 0:
            raise InvariantViolation("frequency_hz", "must be positive")
        if self.sockets < 1:
            raise InvariantViolation("sockets", "must be at least 1")
        prev = 0
        for i, lvl in enumerate(self.cache_levels):
            key = f"cache.{i}"
            if lvl.capacity_bytes <= 0:
                raise InvariantViolation(f"{key}.capacity_bytes", "must be positive")
            if lvl.capacity_bytes <= prev:
                raise InvariantViolation(f"{key}.capacity_bytes",
                                         "levels must be ordered by increasing capacity")
            prev = lvl.capacity_bytes
            if lvl.scope is CacheScope.PER_GROUP and not lvl.group_size_cores:
                raise InvariantViolation(f"{key}.group_size", "required for per_group scope")
            bpc, gbps = lvl.peak_bytes_per_cycle_per_core, lvl.peak_gbps_per_core
            if bpc is not None and gbps is not None and self.nominal_frequency_hz:
                expected = bpc * self.nominal_frequency_hz / 10**9
                if abs(gbps - expected) > PEAK_TOLERANCE * expected:
                    raise InvariantViolation(
                        f"{key}.peak_gbps",
                        f"{float(gbps)} GB/s disagrees with {float(bpc)} B/cycle at "
                        f"{self.nominal_frequency_hz} Hz ({float(expected)} GB/s)")
        if self.dram_peak_gbps_per_socket is not None and self.dram_peak_gbps_per_socket <= 0:
            raise InvariantViolation("dram.peak_gbps_per_socket", "must be positive")
        return self


# -- built-in specs ---------------------------------------------------------

def ddr_channel_gbps(transfer_rate_mts, bus_bytes=8):
    """Peak of one DDR channel: transfers/s x bus width, in decimal GB/s."""
    return Fraction(transfer_rate_mts) * 10**6 * bus_bytes / 10**9


def _cores(count, per_node):
    return tuple((c, c // per_node) for c in range(count))


def _a64fx():
    freq = 1_800_000_000
    return MachineSpec(
        name="a64fx",
        nominal_frequency_hz=freq,
        cores=_cores(48, 12),  # four CMGs, one NUMA node each
        cache_levels=(
            CacheLevel("L1d", 64 * KiB, CacheScope.PER_CORE, None, 128, Fraction("230.4")),
            CacheLevel("L2", 8 * MiB, CacheScope.PER_GROUP, 12, 64, Fraction("115.2")),
        ),
        # one HBM2 stack per CMG at 128 B/cycle
        dram_peak_gbps_per_socket=Fraction("921.6"),
        sockets=1,
        decoder_width=4,
        dram_type="HBM2",
        dram_channels=4,
        provenance="published",
    )


def _altra():
    return MachineSpec(
        name="altra_q80_30",
        nominal_frequency_hz=3_000_000_000,
        cores=_cores(80, 80),
        cache_levels=(
            CacheLevel("L1d", 64 * KiB, CacheScope.PER_CORE, None, 32, 96),
            CacheLevel("L2", 1 * MiB, CacheScope.PER_CORE),
            CacheLevel("L3", 32 * MiB, CacheScope.SHARED),
        ),
        dram_peak_gbps_per_socket=Fraction("204.8"),
        sockets=1,
        decoder_width=4,
        dram_type="DDR4-3200",
        dram_channels=8,
        provenance="published",
    )


def _thunderx2():
    return MachineSpec(
        name="thunderx2_cn9975",
        nominal_frequency_hz=2_000_000_000,
        cores=_cores(56, 28),
        cache_levels=(
            CacheLevel("L1d", 32 * KiB, CacheScope.PER_CORE, None, 32, 64),
            CacheLevel("L2", 256 * KiB, CacheScope.PER_CORE),
            CacheLevel("L3", 28 * MiB, CacheScope.PER_GROUP, 28),
        ),
        dram_peak_gbps_per_socket=Fraction("170.5"),
        sockets=2,
        decoder_width=4,
        dram_type="DDR4-2666",
        dram_channels=8,
        provenance="published",
    )


BUILTIN_SPECS = {s.name: s for s in (_a64fx(), _altra(), _thunderx2())}


def builtin_specs():
    return dict(BUILTIN_SPECS)


def builtin(name):
    aliases = {"altra": "altra_q80_30", "thunderx2": "thunderx2_cn9975", "tx2": "thunderx2_cn9975"}
    key = aliases.get(name, name)
    if key not in BUILTIN_SPECS:
        raise KeyError(f"no built-in machine spec {name!r}; have {sorted(BUILTIN_SPECS)}")
    return BUILTIN_SPECS[key]


# -- file format ------------------------------------------------------------

def dump_spec(spec):
    pairs = [
        ("name", spec.name),
        ("provenance", spec.provenance),
        ("frequency_hz", spec.nominal_frequency_hz),
        ("sockets", spec.sockets),
        ("decoder_width", spec.decoder_width),
    ]
    if spec.cores:
        pairs.append(("cores.count", len(spec.cores)))
        ids = [c for c, _ in spec.cores]
        if ids != list(range(len(ids))):
            pairs.append(("cores.ids", ids))
        if all(node is not None for _, node in spec.cores):
            pairs.append(("cores.numa_map", [node for _, node in spec.cores]))
    for i, lvl in enumerate(spec.cache_levels):
        p = f"cache.{i}"
        pairs += [
            (f"{p}.name", lvl.level_name),
            (f"{p}.capacity_bytes", lvl.capacity_bytes),
            (f"{p}.scope", lvl.scope.value),
            (f"{p}.group_size", lvl.group_size_cores),
            (f"{p}.peak_bpc", lvl.peak_bytes_per_cycle_per_core),
            (f"{p}.peak_gbps", lvl.peak_gbps_per_core),
        ]
    pairs += [
        ("dram.peak_gbps_per_socket", spec.dram_peak_gbps_per_socket),
        ("dram.type", spec.dram_type),
        ("dram.channels", spec.dram_channels),
    ]
    return kvfile.dump(pairs)


def _parse_scope(kv, key):
    value = kv.str(key, "per_core")
    try:
        return CacheScope(value)
    except ValueError:
        raise SpecParseError(f"scope must be one of {[s.value for s in CacheScope]}",
                             line=kv.line_of(key), field=key) from None


def spec_from_kv(kv, *, require_name=True, default_provenance="user"):
    name = kv.str("name")
    if require_name and not name:
        raise SpecParseError("missing required key", field="name")
    cores = ()
    count = kv.int("cores.count")
    ids = kv.int_list("cores.ids")
    numa = kv.int_list("cores.numa_map")
    if count is not None or ids is not None:
        ids = ids if ids is not None else list(range(count))
        if count is not None and len(ids) != count:
            raise SpecParseError("length differs from cores.count", line=kv.line_of("cores.ids"),
                                 field="cores.ids")
        if numa is not None and len(numa) != len(ids):
            raise SpecParseError(f"{len(numa)} entries for {len(ids)} cores",
                                 line=kv.line_of("cores.numa_map"), field="cores.numa_map")
        cores = tuple(zip(ids, numa if numa is not None else [None] * len(ids)))
    levels = []
    for i in kv.indices("cache"):
        p = f"cache.{i}"
        capacity = kv.int(f"{p}.capacity_bytes")
        if capacity is None:
            if require_name:
                raise SpecParseError("missing required key", field=f"{p}.capacity_bytes")
            capacity = 0  # partial spec: keep the detected capacity when merging
        if f"{p}.scope" in kv:
            scope = _parse_scope(kv, f"{p}.scope")
        else:
            scope = CacheScope.PER_CORE if require_name else None
        levels.append(CacheLevel(
            level_name=kv.str(f"{p}.name", f"L{i + 1}"),
            capacity_bytes=capacity,
            scope=scope,
            group_size_cores=kv.int(f"{p}.group_size"),
            peak_bytes_per_cycle_per_core=kv.fraction(f"{p}.peak_bpc"),
            peak_gbps_per_core=kv.fraction(f"{p}.peak_gbps"),
        ))
    spec = MachineSpec(
        name=name or "",
        nominal_frequency_hz=kv.int("frequency_hz"),
        cores=cores,
        cache_levels=tuple(levels),
        dram_peak_gbps_per_socket=kv.fraction("dram.peak_gbps_per_socket"),
        sockets=kv.int("sockets", 1),
        decoder_width=kv.int("decoder_width"),
        dram_type=kv.str("dram.type"),
        dram_channels=kv.int("dram.channels"),
        provenance=kv.str("provenance", default_provenance),
    )
    unknown = [k for k in kv.unused() if not k.startswith("vplat.")]
    if unknown:
        raise SpecParseError("unknown key", line=kv.line_of(unknown[0]), field=unknown[0])
    return spec


def parse_spec(text):
    return spec_from_kv(kvfile.parse(text)).validate()


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def save_spec(spec, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_spec(spec))


def resolve_spec(ref):
    """``builtin:NAME`` or a path to a spec file."""
    if ref.startswith("builtin:"):
        return builtin(ref.split(":", 1)[1])
    return load_spec(ref)


# -- detection --------------------------------------------------------------

def _read(path):
    try:
        with open(path) as fh:
            return fh.read().strip()
    except OSError:
        return None


def _parse_size(text):
    text = text.strip().upper()
    for suffix, mult in (("K", KiB), ("M", MiB), ("G", GiB)):
        if text.endswith(suffix):
            return int(text[:-1]) * mult
    return int(text)


def detect(root="/"):
    """Best-effort description of the host from sysfs/procfs under ``root``.

    Never raises; whatever cannot be determined is left empty and named
    in ``flags``.
    """
    sysdir = os.path.join(root, "sys/devices/system")
    flags = []
    online = _read(os.path.join(sysdir, "cpu/online"))
    cpus = parse_cpu_list(online) if online else list(range(os.cpu_count() or 1))
    if root == "/":
        try:
            allowed = os.sched_getaffinity(0)
            cpus = [c for c in cpus if c in allowed] or cpus
        except (AttributeError, OSError):
            pass

    node_of = {}
    for node_dir in sorted(glob.glob(os.path.join(sysdir, "node/node[0-9]*"))):
        node = int(os.path.basename(node_dir)[4:])
        text = _read(os.path.join(node_dir, "cpulist"))
        for c in parse_cpu_list(text) if text else []:
            node_of[c] = node
    if not node_of:
        flags.append("numa_unknown")
    cores = tuple((c, node_of.get(c)) for c in cpus)

    total_cpus = len(parse_cpu_list(online)) if online else len(cpus)
    cpu0 = os.path.join(sysdir, f"cpu/cpu{cpus[0]}") if cpus else None
    siblings_text = _read(os.path.join(cpu0, "topology/thread_siblings_list")) if cpu0 else None
    threads_per_core = len(parse_cpu_list(siblings_text)) if siblings_text else 1

    levels = []
    for index in sorted(glob.glob(os.path.join(cpu0 or "", "cache/index[0-9]*"))):
        ctype = _read(os.path.join(index, "type"))
        level = _read(os.path.join(index, "level"))
        size = _read(os.path.join(index, "size"))
        if ctype == "Instruction" or not level or not size:
            continue
        try:
            capacity = _parse_size(size)
        except ValueError:
            continue
        shared_text = _read(os.path.join(index, "shared_cpu_list"))
        sharing = len(parse_cpu_list(shared_text)) if shared_text else 1
        if sharing <= threads_per_core:
            scope, group = CacheScope.PER_CORE, None
        elif sharing >= total_cpus:
            scope, group = CacheScope.SHARED, None
        else:
            scope, group = CacheScope.PER_GROUP, sharing // threads_per_core
        name = "L1d" if level == "1" else f"L{level}"
        levels.append(CacheLevel(name, capacity, scope, group))
    levels.sort(key=lambda lvl: lvl.capacity_bytes)
    if not levels:
        flags.append("caches_unknown")
    # peak bandwidths are never exposed by the OS
    flags.append("peaks_unknown")

    freq = None
    for name in ("base_frequency", "cpuinfo_max_freq"):
        text = _read(os.path.join(cpu0 or "", f"cpufreq/{name}"))
        if text and text.isdigit():
            freq = int(text) * 1000
            break
    if freq is None:
        flags.append("frequency_unknown")

    spec = MachineSpec(
        name=_read(os.path.join(root, "proc/sys/kernel/hostname")) or "host",
        nominal_frequency_hz=freq,
        cores=cores,
        cache_levels=tuple(levels),
        provenance="detected",
        flags=tuple(flags),
    )
    try:
        return spec.validate()
    except InvariantViolation:
        return replace(spec, cache_levels=(), flags=spec.flags + ("caches_inconsistent",))


def merge_specs(base, override):
    """Field-wise merge; any value present in ``override`` wins.

    Cache levels are matched by name and merged field by field; levels only
    in ``override`` are added.
    """
    scalar = {}
    for name in ("name", "nominal_frequency_hz", "dram_peak_gbps_per_socket", "decoder_width",
                 "dram_type", "dram_channels"):
        value = getattr(override, name)
        if value not in (None, ""):
            scalar[name] = value
    if override.sockets != 1:
        scalar["sockets"] = override.sockets
    if override.cores:
        scalar["cores"] = override.cores
    levels = {lvl.level_name: lvl for lvl in base.cache_levels}
    for lvl in override.cache_levels:
        if lvl.level_name in levels:
            old = levels[lvl.level_name]
            levels[lvl.level_name] = CacheLevel(
                lvl.level_name,
                lvl.capacity_bytes or old.capacity_bytes,
                lvl.scope or old.scope,
                lvl.group_size_cores if lvl.group_size_cores is not None else old.group_size_cores,
                lvl.peak_bytes_per_cycle_per_core if lvl.peak_bytes_per_cycle_per_core is not None
                else old.peak_bytes_per_cycle_per_core,
                lvl.peak_gbps_per_core if lvl.peak_gbps_per_core is not None
                else old.peak_gbps_per_core,
            )
        else:
            levels[lvl.level_name] = replace(lvl, scope=lvl.scope or CacheScope.PER_CORE)
    merged_levels = tuple(sorted(levels.values(), key=lambda lvl: lvl.capacity_bytes))
    flags = tuple(f for f in base.flags
                  if not (f == "frequency_unknown" and "nominal_frequency_hz" in scalar))
    if any(lvl.peak_gbps(scalar.get("nominal_frequency_hz", base.nominal_frequency_hz))
           for lvl in merged_levels):
        flags = tuple(f for f in flags if f != "peaks_unknown")
    return replace(base, cache_levels=merged_levels, provenance=f"{base.provenance}+{override.provenance}",
                   flags=flags, **scalar).validate()


def load_partial_spec(path):
    """A spec file that may omit ``name``; for merging onto a detected spec."""
    return spec_from_kv(kvfile.read(path), require_name=False)
