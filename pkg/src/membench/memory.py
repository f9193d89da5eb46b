"""Measurement buffers with controlled alignment and page policy.

Buffers are filled with the repeating quadruple ``[x, 1/x, -x, -1/x]``
so that no kernel ever meets a denormal and every accumulator lane set
sums back to zero over a full pass.
"""

import ctypes
import enum
import math
import mmap
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import BufferLayoutError, ValueOutOfRange

DEFAULT_PATTERN_X = 4.0
HUGE_PAGE_BYTES = 2 * 1024 * 1024
MAP_HUGETLB = getattr(mmap, "MAP_HUGETLB", 0x40000)
_MIN_X = 2.0 ** -500
_MAX_X = 2.0 ** 500


class HugepagePolicy(str, enum.Enum):
    TRANSPARENT = "transparent"
    EXPLICIT = "explicit"
    FORBID = "forbid"


class PageKind(str, enum.Enum):
    BASE = "base"
    HUGE = "huge"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class BufferRequest:
    size_bytes: int
    alignment_bytes: int = 64
    numa_node: int = None
    hugepage_policy: HugepagePolicy = HugepagePolicy.TRANSPARENT

    def __post_init__(self):
        object.__setattr__(self, "hugepage_policy", HugepagePolicy(self.hugepage_policy))
        a = self.alignment_bytes
        if a < 64 or a & (a - 1):
            raise BufferLayoutError(f"alignment {a} is not a power of two >= 64")
        if self.size_bytes <= 0:
            raise BufferLayoutError("buffer size must be positive")
        if self.size_bytes % a:
            raise BufferLayoutError(f"size {self.size_bytes} is not a multiple of alignment {a}")
        if self.size_bytes % 32:
            raise BufferLayoutError("size must hold whole pattern quadruples (32 B)")

    def with_size(self, size_bytes):
        return BufferRequest(size_bytes, self.alignment_bytes, self.numa_node,
                             self.hugepage_policy)


@dataclass
class MeasurementBuffer:
    """A data region plus what we could find out about where it lives.

    ``data`` is a float64 view; it is ``None`` for phantom buffers used by
    the virtual platform, which track only size and pattern.
    """

    data: np.ndarray
    size_bytes: int
    alignment_bytes: int
    effective_page_kind: PageKind = PageKind.UNKNOWN
    numa_node_actual: int = None
    warnings: list = field(default_factory=list)
    pattern_x: float = None
    _mapping: object = field(default=None, repr=False)

    @property
    def address(self):
        if self.data is None:
            return 0
        return self.data.ctypes.data

    @property
    def is_phantom(self):
        return self.data is None

    def close(self):
        self.data = None
        if self._mapping is not None:
            try:
                self._mapping.close()
            except BufferError:
                # a live numpy view still references it; GC will unmap
                pass
            self._mapping = None


def _numa_cpus(node, sysfs="/sys/devices/system/node"):
    path = os.path.join(sysfs, f"node{node}", "cpulist")
    try:
        with open(path) as fh:
            return parse_cpu_list(fh.read())
    except OSError:
        return None


def parse_cpu_list(text):
    """``"0-3,8,10-11"`` -> ``[0, 1, 2, 3, 8, 10, 11]``."""
    cpus = []
    for part in text.strip().split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _map(length, huge):
    flags = mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS
    if huge:
        flags |= MAP_HUGETLB
    return mmap.mmap(-1, length, flags=flags, prot=mmap.PROT_READ | mmap.PROT_WRITE)


def _madvise(mapping, policy):
    advice = {HugepagePolicy.TRANSPARENT: getattr(mmap, "MADV_HUGEPAGE", None),
              HugepagePolicy.FORBID: getattr(mmap, "MADV_NOHUGEPAGE", None)}.get(policy)
    if advice is None:
        return False
    try:
        mapping.madvise(advice)
        return True
    except (OSError, ValueError):
        return False


def _thp_mode():
    try:
        with open("/sys/kernel/mm/transparent_hugepage/enabled") as fh:
            text = fh.read()
    except OSError:
        return None
    start, end = text.find("["), text.find("]")
    return text[start + 1:end] if start >= 0 < end else None


def _anon_huge_bytes(address):
    """AnonHugePages of the mapping containing ``address``, or None."""
    try:
        with open("/proc/self/smaps") as fh:
            inside = False
            for line in fh:
                head = line.split(None, 1)[0] if line.strip() else ""
                if "-" in head and not head.endswith(":"):
                    lo, hi = (int(v, 16) for v in head.split("-"))
                    inside = lo <= address < hi
                elif inside and head == "AnonHugePages:":
                    return int(line.split()[1]) * 1024
    except (OSError, ValueError):
        return None
    return None


def _run_on_node(node, fn):
    """Run ``fn`` on a thread bound to ``node``'s CPUs (first-touch placement)."""
    cpus = _numa_cpus(node)
    result = {}

    def target():
        try:
            os.sched_setaffinity(0, cpus)
            result["value"] = fn()
        except BaseException as exc:  # re-raised in the caller
            result["error"] = exc

    t = threading.Thread(target=target, name=f"first-touch-node{node}")
    t.start()
    t.join()
    if "error" in result:
        raise result["error"]
    return result["value"]


def allocate(req, *, phantom=False):
    """Reserve a buffer satisfying ``req``.

    Phantom buffers carry no storage and are only meaningful with virtual
    kernels.  Physical placement is best effort; anything that could not
    be honoured is listed in ``warnings`` rather than silently dropped.
    """
    warnings = []
    numa_actual = None
    if req.numa_node is not None:
        if _numa_cpus(req.numa_node):
            numa_actual = req.numa_node
        else:
            warnings.append(f"numa_unavailable: node {req.numa_node} not present, buffer unpinned")

    if phantom:
        return MeasurementBuffer(None, req.size_bytes, req.alignment_bytes, PageKind.UNKNOWN,
                                 numa_actual, warnings)

    policy = req.hugepage_policy
    align = req.alignment_bytes
    if policy is not HugepagePolicy.FORBID and req.size_bytes >= HUGE_PAGE_BYTES:
        align = max(align, HUGE_PAGE_BYTES)
    page_kind = PageKind.UNKNOWN
    mapping = None
    if policy is HugepagePolicy.EXPLICIT:
        length = math.ceil(req.size_bytes / HUGE_PAGE_BYTES) * HUGE_PAGE_BYTES
        try:
            mapping = _map(length, huge=True)
            page_kind = PageKind.HUGE
            offset = 0
        except OSError as exc:
            warnings.append(f"explicit_hugepages_unavailable: {exc.strerror}; using transparent")
            policy = HugepagePolicy.TRANSPARENT
    if mapping is None:
        mapping = _map(req.size_bytes + align, huge=False)
        base = ctypes.addressof(ctypes.c_char.from_buffer(mapping))
        offset = (-base) % align
        advised = _madvise(mapping, policy)
        if policy is HugepagePolicy.FORBID:
            page_kind = PageKind.BASE if advised or _thp_mode() != "always" else PageKind.UNKNOWN
        elif _thp_mode() == "never":
            page_kind = PageKind.BASE
    data = np.frombuffer(mapping, dtype=np.float64, count=req.size_bytes // 8, offset=offset)
    return MeasurementBuffer(data, req.size_bytes, req.alignment_bytes, page_kind, numa_actual,
                             warnings, _mapping=mapping)


def refresh_page_kind(buf):
    """Re-check THP backing after first touch (transparent policy only)."""
    if buf.data is None or buf.effective_page_kind is not PageKind.UNKNOWN:
        return buf.effective_page_kind
    huge = _anon_huge_bytes(buf.address)
    if huge:
        buf.effective_page_kind = PageKind.HUGE
    elif huge == 0 and buf.size_bytes >= HUGE_PAGE_BYTES:
        buf.effective_page_kind = PageKind.BASE
    return buf.effective_page_kind


def check_pattern_value(x):
    x = float(x)
    if not math.isfinite(x) or x == 0.0 or not _MIN_X <= abs(x) <= _MAX_X:
        raise ValueOutOfRange(f"pattern value {x!r} outside [2^-500, 2^500] in magnitude")
    return x


def pattern_quadruple(x):
    x = check_pattern_value(x)
    r = 1.0 / x
    return np.array([x, r, -x, -r], dtype=np.float64)


def initialize_denormal_safe(buf, x=DEFAULT_PATTERN_X):
    quad = pattern_quadruple(x)
    buf.pattern_x = float(x)
    if buf.data is None:
        return

    def fill():
        buf.data.reshape(-1, 4)[:] = quad

    if buf.numa_node_actual is not None:
        _run_on_node(buf.numa_node_actual, fill)
    else:
        fill()
    refresh_page_kind(buf)


def verify_pattern(buf, x):
    """True iff every element equals the quadruple for ``x`` bit for bit."""
    try:
        quad = pattern_quadruple(x)
    except ValueOutOfRange:
        return False
    if buf.data is None:
        return buf.pattern_x is not None and \
            np.float64(buf.pattern_x).view(np.uint64) == quad[:1].view(np.uint64)[0]
    bits = buf.data.view(np.uint64).reshape(-1, 4)
    return bool(np.all(bits == quad.view(np.uint64)))
