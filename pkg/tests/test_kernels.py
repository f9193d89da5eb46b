import math
import platform

import numpy as np
import pytest
from hypothesis import given, strategies as st

from membench import kernels, memory
from membench.errors import BufferLayoutError, ExtensionUnsupported, InvalidKernel
from membench.kernels import (AddressingMode, InstructionMix, IsaExtension, KernelSpec,
                              RunContext, kernel_metadata, parse_kernel_id)

CATALOG = [spec for spec, _ in kernels.list_kernels()]
ON_ARM = platform.machine() in ("aarch64", "arm64")


def test_listing_one_neon_manual_r4():
    meta = kernel_metadata(parse_kernel_id("neon/fadd/manual/r4"), 16)
    assert meta.loads_per_iteration == 2
    assert meta.bytes_per_iteration == 128
    assert meta.arith_per_iteration == 8
    assert meta.cursor_count == 4
    assert meta.cursor_advance_bytes == 256


def test_listing_two_neon_post_r4():
    meta = kernel_metadata(parse_kernel_id("neon/fadd/post/r4"), 16)
    assert meta.loads_per_iteration == 2
    assert meta.address_updates_per_iteration == 0
    assert meta.aux_per_iteration == 0
    assert meta.arith_per_iteration == 8


def test_virtual_load_r2_metadata_formula():
    meta = kernel_metadata(KernelSpec("virtual", "load_only", "manual_increment", 2), 64)
    assert meta.bytes_per_iteration == meta.loads_per_iteration * 2 * 64


@pytest.mark.parametrize("ext, mode, regs", [
    ("sve", "post_increment", 1),
    ("neon", "offset", 1),
    ("scalar_portable", "manual_increment", 4),
    ("neon", "manual_increment", 3),
    ("virtual", "offset", 1),
])
def test_invalid_combinations_rejected(ext, mode, regs):
    with pytest.raises(InvalidKernel):
        KernelSpec(ext, "arith_fadd", mode, regs)


def test_kernel_id_defaults_and_round_trip():
    assert parse_kernel_id("neon").kernel_id == "neon/fadd/manual/r4"
    assert parse_kernel_id("sve/fadd").kernel_id == "sve/fadd/offset/r2"
    assert parse_kernel_id("sve/load").kernel_id == "sve/load/manual/r2"
    for spec in CATALOG:
        assert parse_kernel_id(spec.kernel_id) == spec
    for bad in ("", "mmx/fadd", "neon/fadd/manual/4", "neon//manual", "a/b/c/d/e"):
        with pytest.raises(InvalidKernel):
            parse_kernel_id(bad)


@given(st.sampled_from(CATALOG), st.sampled_from([16, 32, 64, 128, 256]))
def test_metadata_identities(spec, vb):
    meta = kernel_metadata(spec, vb)
    assert meta.bytes_per_iteration == meta.loads_per_iteration * meta.registers_per_load * vb
    assert meta.stride_bytes == meta.bytes_per_iteration
    assert meta.loads_per_iteration * meta.registers_per_load == kernels.REGISTERS_PER_ITERATION
    assert meta.size_granularity % meta.bytes_per_iteration == 0
    assert meta.size_granularity % 32 == 0
    if spec.addressing_mode is AddressingMode.MANUAL_INCREMENT:
        assert meta.cursor_count == 4
        assert meta.cursor_advance_bytes == 4 * meta.load_bytes
        # every loop body uses each cursor equally often
        assert (meta.loads_per_iteration * meta.body_iterations) % 4 == 0


@given(st.sampled_from(CATALOG), st.sampled_from([16, 32, 64]))
def test_mix_invariance_of_traffic(spec, vb):
    metas = []
    for mix in InstructionMix:
        metas.append(kernel_metadata(KernelSpec(spec.isa_extension, mix, spec.addressing_mode,
                                                spec.registers_per_load), vb))
    assert len({m.bytes_per_iteration for m in metas}) == 1
    assert len({m.loads_per_iteration for m in metas}) == 1
    fadd, nop, load = metas
    assert nop.aux_per_iteration == fadd.arith_per_iteration + fadd.aux_per_iteration
    assert load.arith_per_iteration == 0 and load.aux_per_iteration == fadd.aux_per_iteration


@pytest.mark.parametrize("spec", [s for s in CATALOG if s.isa_extension is IsaExtension.SVE],
                         ids=str)
def test_sve_metadata_scales_with_vector_length(spec):
    for vb in (16, 32, 64, 128):
        assert kernel_metadata(spec, 2 * vb).bytes_per_iteration == \
            2 * kernel_metadata(spec, vb).bytes_per_iteration


def test_catalog_has_both_sve_addressing_variants():
    sve = {(s.instruction_mix, s.registers_per_load, s.addressing_mode)
           for s in CATALOG if s.isa_extension is IsaExtension.SVE}
    for mix in InstructionMix:
        for regs in (1, 2, 4):
            assert (mix, regs, AddressingMode.OFFSET) in sve
            assert (mix, regs, AddressingMode.MANUAL_INCREMENT) in sve


def test_catalog_availability():
    avail = {spec: ok for spec, ok in kernels.list_kernels()}
    for spec, ok in avail.items():
        if spec.isa_extension in (IsaExtension.VIRTUAL, IsaExtension.SCALAR_PORTABLE):
            assert ok
        elif not ON_ARM:
            assert not ok


def test_discover_vector_length():
    assert kernels.discover_vector_length("virtual", 32) == 32
    assert kernels.discover_vector_length("scalar_portable") == 8
    with pytest.raises(ExtensionUnsupported):
        kernels.discover_vector_length("virtual")
    if ON_ARM and kernels.extension_available("neon"):
        assert kernels.discover_vector_length("neon") == 16
    elif not ON_ARM:
        with pytest.raises(ExtensionUnsupported):
            kernels.discover_vector_length("neon")


def test_virtual_kernel_needs_platform():
    with pytest.raises(ExtensionUnsupported):
        kernels.resolve_kernel("virtual/fadd/manual/r2")


def _buffer(size, x):
    buf = memory.allocate(memory.BufferRequest(size))
    memory.initialize_denormal_safe(buf, x)
    return buf


def _scalar_oracle(values, passes):
    acc = [0.0] * 8
    for _ in range(passes):
        for i, v in enumerate(values):
            acc[i % 8] += v
    total = 0.0
    for a in acc:
        total += a
    return total


@pytest.mark.parametrize("regs", [1, 2])
def test_scalar_checksum_matches_brute_force(regs):
    handle = kernels.resolve_kernel(f"scalar/fadd/manual/r{regs}")
    assert handle.authoritative is False
    buf = _buffer(4096, 2.0)
    token = kernels.execute_kernel(handle, buf, 3)
    assert token.value == _scalar_oracle(buf.data.tolist(), 3)
    assert token.bytes_touched == 4096 * 3
    assert token.iterations * handle.metadata.bytes_per_iteration == token.bytes_touched


def test_scalar_numpy_fallback_matches_native():
    handle = kernels.resolve_kernel("scalar/fadd/manual/r1")
    buf = _buffer(8192, 3.0)
    rng = np.random.default_rng(5)
    buf.data[:] = rng.uniform(-1, 1, buf.data.size)
    native = kernels.execute_kernel(handle, buf, 2).value
    fallback = kernels._scalar_numpy_runner(buf, 8192, 2, RunContext())
    assert native == fallback == _scalar_oracle(buf.data.tolist(), 2)


def test_execute_preconditions():
    handle = kernels.resolve_kernel("scalar/fadd/manual/r1")
    buf = _buffer(4096, 4.0)
    with pytest.raises(ValueError):
        kernels.execute_kernel(handle, buf, 0)
    with pytest.raises(BufferLayoutError):
        kernels.execute_kernel(handle, buf, 1, size=8192)
    with pytest.raises(BufferLayoutError):
        kernels.execute_kernel(handle, buf, 1, size=4096 - 32)


@pytest.mark.skipif(not ON_ARM, reason="needs an Arm host")
@pytest.mark.parametrize("spec", [s for s in CATALOG if s.isa_extension in
                                  (IsaExtension.NEON, IsaExtension.SVE)], ids=str)
def test_simd_kernel_checksum_is_zero_on_pattern(spec):
    if not kernels.extension_available(spec.isa_extension):
        pytest.skip(f"{spec.isa_extension.value} unavailable")
    handle = kernels.resolve_kernel(spec)
    size = math.lcm(handle.metadata.size_granularity, 4096)
    buf = _buffer(size, 4.0)
    token = kernels.execute_kernel(handle, buf, 2)
    assert token.value == 0.0
