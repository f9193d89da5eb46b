"""Measurement kernels and the metadata that describes their loop bodies.

A kernel streams through a buffer loading eight vector registers per
loop iteration and, depending on the instruction mix, folds them into
eight accumulators with FADD, replaces those FADDs one-for-one with NOPs,
or does nothing but load.
"""

import ctypes
import enum
import functools
import math
import platform
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import native
from .errors import BufferLayoutError, ExtensionUnsupported, InvalidKernel

REGISTERS_PER_ITERATION = 8
ACCUMULATORS = 8
LOOP_CONTROL_PER_BODY = 2  # cmp + conditional branch
CURSORS_MANUAL = 4
ELEMENT_BYTES = 8


class IsaExtension(str, enum.Enum):
    NEON = "neon"
    SVE = "sve"
    SCALAR_PORTABLE = "scalar_portable"
    VIRTUAL = "virtual"


class InstructionMix(str, enum.Enum):
    ARITH_FADD = "arith_fadd"
    NOP_SUBSTITUTED = "nop_substituted"
    LOAD_ONLY = "load_only"


class AddressingMode(str, enum.Enum):
    MANUAL_INCREMENT = "manual_increment"
    POST_INCREMENT = "post_increment"
    OFFSET = "offset"


class ElementType(str, enum.Enum):
    F64 = "f64"


_EXT_IDS = {IsaExtension.NEON: "neon", IsaExtension.SVE: "sve",
            IsaExtension.SCALAR_PORTABLE: "scalar", IsaExtension.VIRTUAL: "virtual"}
_MIX_IDS = {InstructionMix.ARITH_FADD: "fadd", InstructionMix.NOP_SUBSTITUTED: "nop",
            InstructionMix.LOAD_ONLY: "load"}
_ADDR_IDS = {AddressingMode.MANUAL_INCREMENT: "manual", AddressingMode.POST_INCREMENT: "post",
             AddressingMode.OFFSET: "offset"}

_VALID_ADDRESSING = {
    IsaExtension.NEON: (AddressingMode.MANUAL_INCREMENT, AddressingMode.POST_INCREMENT),
    IsaExtension.SVE: (AddressingMode.MANUAL_INCREMENT, AddressingMode.OFFSET),
    IsaExtension.SCALAR_PORTABLE: (AddressingMode.MANUAL_INCREMENT,),
    IsaExtension.VIRTUAL: (AddressingMode.MANUAL_INCREMENT,),
}
_VALID_REGS = {
    IsaExtension.NEON: (1, 2, 4),
    IsaExtension.SVE: (1, 2, 4),
    IsaExtension.SCALAR_PORTABLE: (1, 2),
    IsaExtension.VIRTUAL: (1, 2),
}
DEFAULT_REGS = {IsaExtension.NEON: 4, IsaExtension.SVE: 2,
                IsaExtension.SCALAR_PORTABLE: 1, IsaExtension.VIRTUAL: 2}


def default_addressing(ext, mix):
    """Manual increment for NEON; offset for SVE except pure-load kernels."""
    ext = IsaExtension(ext)
    if ext is IsaExtension.SVE and InstructionMix(mix) is not InstructionMix.LOAD_ONLY:
        return AddressingMode.OFFSET
    return AddressingMode.MANUAL_INCREMENT


@dataclass(frozen=True)
class KernelSpec:
    isa_extension: IsaExtension
    instruction_mix: InstructionMix = InstructionMix.ARITH_FADD
    addressing_mode: AddressingMode = AddressingMode.MANUAL_INCREMENT
    registers_per_load: int = 1
    element_type: ElementType = ElementType.F64

    def __post_init__(self):
        try:
            for name, kind in (("isa_extension", IsaExtension),
                               ("instruction_mix", InstructionMix),
                               ("addressing_mode", AddressingMode),
                               ("element_type", ElementType)):
                object.__setattr__(self, name, kind(getattr(self, name)))
        except ValueError as exc:
            raise InvalidKernel(str(exc)) from None
        ext, mode = self.isa_extension, self.addressing_mode
        if mode not in _VALID_ADDRESSING[ext]:
            raise InvalidKernel(f"{mode.value} addressing is not available for {ext.value}")
        if self.registers_per_load not in _VALID_REGS[ext]:
            raise InvalidKernel(
                f"{ext.value} has no {self.registers_per_load}-register load form")

    @property
    def kernel_id(self):
        return (f"{_EXT_IDS[self.isa_extension]}/{_MIX_IDS[self.instruction_mix]}/"
                f"{_ADDR_IDS[self.addressing_mode]}/r{self.registers_per_load}")

    def __str__(self):
        return self.kernel_id


def parse_kernel_id(text):
    """Parse ``<ext>/<mix>/<addressing>/r<regs>``.

    Trailing parts may be omitted and take the per-extension defaults,
    so ``sve/load`` means ``sve/load/manual/r2``.
    """
    parts = [p for p in text.strip().split("/")]
    if not 1 <= len(parts) <= 4 or not all(parts):
        raise InvalidKernel(f"malformed kernel id {text!r}")

    def lookup(table, token, what):
        for member, short in table.items():
            if token in (short, member.value):
                return member
        raise InvalidKernel(f"unknown {what} {token!r} in kernel id {text!r}")

    ext = lookup(_EXT_IDS, parts[0], "extension")
    mix = lookup(_MIX_IDS, parts[1], "instruction mix") if len(parts) > 1 else InstructionMix.ARITH_FADD
    mode = lookup(_ADDR_IDS, parts[2], "addressing mode") if len(parts) > 2 else default_addressing(ext, mix)
    if len(parts) > 3:
        if not parts[3].startswith("r") or not parts[3][1:].isdigit():
            raise InvalidKernel(f"register count must look like r2, got {parts[3]!r}")
        regs = int(parts[3][1:])
    else:
        regs = DEFAULT_REGS[ext]
    return KernelSpec(ext, mix, mode, regs)


@dataclass(frozen=True)
class KernelMetadata:
    vector_bytes: int
    registers_per_load: int
    loads_per_iteration: int
    arith_per_iteration: int
    aux_per_iteration: int
    address_updates_per_iteration: int
    bytes_per_iteration: int
    stride_bytes: int
    cursor_count: int
    cursor_advance_bytes: int
    body_iterations: int

    @property
    def load_bytes(self):
        return self.registers_per_load * self.vector_bytes

    @property
    def loop_control_per_iteration(self):
        return Fraction(LOOP_CONTROL_PER_BODY, self.body_iterations)

    @property
    def instructions_per_iteration(self):
        return self.loads_per_iteration + self.arith_per_iteration + self.aux_per_iteration

    @property
    def size_granularity(self):
        """Working-set sizes must be multiples of this many bytes.

        Covers whole loop bodies (so every cursor is used equally) and
        whole pattern quadruples.
        """
        body = self.bytes_per_iteration * self.body_iterations
        return math.lcm(body, self.cursor_count * self.load_bytes, 4 * ELEMENT_BYTES)

    @property
    def required_alignment(self):
        return min(self.vector_bytes, 64)


def kernel_metadata(spec, vector_bytes):
    """Per-iteration footprint of ``spec`` at the given register width."""
    if vector_bytes <= 0 or vector_bytes % ELEMENT_BYTES:
        raise InvalidKernel(f"vector width {vector_bytes} B is not a whole number of f64 lanes")
    regs = spec.registers_per_load
    loads = REGISTERS_PER_ITERATION // regs
    load_bytes = regs * vector_bytes
    mode = spec.addressing_mode
    if mode is AddressingMode.MANUAL_INCREMENT:
        updates, cursors = loads, CURSORS_MANUAL
        advance = CURSORS_MANUAL * load_bytes
        body_iterations = CURSORS_MANUAL // math.gcd(CURSORS_MANUAL, loads)
    elif mode is AddressingMode.POST_INCREMENT:
        # folded into the load instruction itself
        updates, cursors, advance, body_iterations = 0, 1, load_bytes, 1
    else:
        updates, cursors, body_iterations = 1, 1, 1
        advance = REGISTERS_PER_ITERATION * vector_bytes
    fadds = ACCUMULATORS
    if spec.instruction_mix is InstructionMix.ARITH_FADD:
        arith, aux = fadds, updates
    elif spec.instruction_mix is InstructionMix.NOP_SUBSTITUTED:
        arith, aux = 0, fadds + updates
    else:
        arith, aux = 0, updates
    bytes_per_iteration = loads * regs * vector_bytes
    return KernelMetadata(
        vector_bytes=vector_bytes,
        registers_per_load=regs,
        loads_per_iteration=loads,
        arith_per_iteration=arith,
        aux_per_iteration=aux,
        address_updates_per_iteration=updates,
        bytes_per_iteration=bytes_per_iteration,
        stride_bytes=bytes_per_iteration,
        cursor_count=cursors,
        cursor_advance_bytes=advance,
        body_iterations=body_iterations,
    )


# -- host capabilities -------------------------------------------------------

def _cpu_features():
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith(("features", "flags")):
                    return set(line.split(":", 1)[1].split())
    except OSError:
        pass
    return set()


def _is_aarch64():
    return platform.machine() in ("aarch64", "arm64")


def extension_available(ext):
    ext = IsaExtension(ext)
    if ext in (IsaExtension.SCALAR_PORTABLE, IsaExtension.VIRTUAL):
        return True
    if not _is_aarch64():
        return False
    if ext is IsaExtension.NEON:
        return native.simd_library("neon") is not None
    return "sve" in _cpu_features() and native.simd_library("sve") is not None


def discover_vector_length(ext, virtual_bytes=None):
    ext = IsaExtension(ext)
    if ext is IsaExtension.VIRTUAL:
        if virtual_bytes is None:
            raise ExtensionUnsupported("virtual vector width must be configured")
        if virtual_bytes <= 0 or virtual_bytes % ELEMENT_BYTES:
            raise InvalidKernel(f"virtual vector width {virtual_bytes} B is not a multiple of 8")
        return virtual_bytes
    if ext is IsaExtension.SCALAR_PORTABLE:
        return ELEMENT_BYTES
    if not extension_available(ext):
        raise ExtensionUnsupported(f"{ext.value} is not available on this host")
    if ext is IsaExtension.NEON:
        return 16
    lib = native.simd_library("sve")
    lib.mb_sve_vector_bytes.restype = ctypes.c_uint64
    return int(lib.mb_sve_vector_bytes())


# -- handles and execution -----------------------------------------------------

@dataclass(frozen=True)
class RunContext:
    """Where an execution happens; only the virtual backend looks at it."""
    worker: int = 0
    repetition: int = 0
    core_count: int = 1
    warmup: bool = False


@dataclass(frozen=True)
class ChecksumToken:
    value: float
    bytes_touched: int
    iterations: int


@dataclass(frozen=True)
class KernelHandle:
    spec: KernelSpec
    metadata: KernelMetadata
    runner: object = field(repr=False, compare=False)
    authoritative: bool = True

    @property
    def kernel_id(self):
        return self.spec.kernel_id


def _sum_accumulators(acc):
    total = 0.0
    for a in acc:
        total += float(a)
    return total


def _scalar_native_runner(lib):
    def run(buffer, size, passes, context):
        acc = (ctypes.c_double * ACCUMULATORS)()
        lib.mb_scalar_sum(buffer.address, size, passes, acc)
        return _sum_accumulators(acc)
    return run


def _scalar_numpy_runner(buffer, size, passes, context):
    rows = buffer.data[: size // ELEMENT_BYTES].reshape(-1, ACCUMULATORS)
    acc = np.zeros(ACCUMULATORS)
    for _ in range(passes):
        # cumsum is strictly sequential, matching the native accumulation order
        acc = np.cumsum(np.vstack([acc, rows]), axis=0)[-1]
    return _sum_accumulators(acc)


def _simd_runner(lib, spec, meta):
    from . import codegen
    fn = getattr(lib, codegen.symbol_name(spec))
    fn.restype = None
    fn.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t,
                   ctypes.POINTER(ctypes.c_double)]
    lanes = meta.vector_bytes // ELEMENT_BYTES

    def run(buffer, size, passes, context):
        out = (ctypes.c_double * (ACCUMULATORS * lanes))()
        fn(buffer.address, size, passes, out)
        return _sum_accumulators(out)
    return run


def resolve_kernel(spec, vector_bytes=None, platform_=None):
    """Bind ``spec`` to an executable implementation.

    ``platform_`` is a :class:`membench.virtual.VirtualPlatform` when the
    kernel should run against simulated hardware; any spec may then be
    emulated.  Otherwise virtual kernels are rejected and real kernels
    need host support.
    """
    if isinstance(spec, str):
        spec = parse_kernel_id(spec)
    if platform_ is not None:
        return platform_.resolve(spec)
    ext = spec.isa_extension
    if ext is IsaExtension.VIRTUAL:
        raise ExtensionUnsupported("virtual kernels need a VirtualPlatform")
    vb = discover_vector_length(ext) if vector_bytes is None else vector_bytes
    meta = kernel_metadata(spec, vb)
    if ext is IsaExtension.SCALAR_PORTABLE:
        lib = native.common_library()
        runner = _scalar_native_runner(lib) if lib is not None else _scalar_numpy_runner
        return KernelHandle(spec, meta, runner, authoritative=False)
    lib = native.simd_library(ext.value)
    if lib is None:
        raise ExtensionUnsupported(f"{ext.value} kernels could not be built")
    return KernelHandle(spec, meta, _simd_runner(lib, spec, meta))


def check_layout(handle, buffer, size):
    meta = handle.metadata
    if buffer.address % meta.required_alignment:
        raise BufferLayoutError(
            f"buffer at {buffer.address:#x} is not {meta.required_alignment}-byte aligned")
    if size <= 0 or size > buffer.size_bytes:
        raise BufferLayoutError(f"working set {size} outside buffer of {buffer.size_bytes} B")
    if size % meta.size_granularity:
        raise BufferLayoutError(
            f"working set {size} B is not a multiple of {meta.size_granularity} B "
            f"for {handle.kernel_id}")


def execute_kernel(handle, buffer, passes, *, size=None, context=None):
    """Stream ``passes`` times over the first ``size`` bytes of ``buffer``."""
    if passes < 1:
        raise ValueError("passes must be at least 1")
    size = buffer.size_bytes if size is None else size
    check_layout(handle, buffer, size)
    value = handle.runner(buffer, size, passes, context or RunContext())
    bytes_touched = size * passes
    return ChecksumToken(value, bytes_touched, bytes_touched // handle.metadata.bytes_per_iteration)


@functools.lru_cache(maxsize=None)
def _catalog_specs():
    specs = []
    for ext in IsaExtension:
        for mix in InstructionMix:
            for mode in _VALID_ADDRESSING[ext]:
                for regs in _VALID_REGS[ext]:
                    specs.append(KernelSpec(ext, mix, mode, regs))
    return tuple(specs)


def list_kernels():
    """All kernel specs in a fixed order, paired with host availability."""
    avail = {ext: extension_available(ext) for ext in IsaExtension}
    return [(spec, avail[spec.isa_extension]) for spec in _catalog_specs()]
