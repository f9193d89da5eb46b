from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from membench import kernels, memory, virtual
from membench.errors import ConfigError
from membench.kernels import IsaExtension, KernelSpec, RunContext
from membench.virtual import Plateau, VirtualPlatform, VirtualSchedule

KiB = 1024
EMULATED = [s for s, _ in kernels.list_kernels()
            if s.isa_extension is not IsaExtension.SCALAR_PORTABLE]


def half_tick_schedule(**kw):
    return VirtualSchedule((Plateau(64 * KiB, Fraction(1, 2)), Plateau(None, 1)), **kw)


def test_virtual_execute_direct_product():
    assert virtual.virtual_execute(half_tick_schedule(), 64 * KiB, 65536) == 32768


def test_jitter_deterministic_and_bounded():
    s = half_tick_schedule(per_worker_jitter=Fraction(1, 10), seed=7)
    ctx = RunContext(worker=1, repetition=3)
    a = virtual.virtual_execute(s, 4096, 4096, ctx)
    assert a == virtual.virtual_execute(s, 4096, 4096, ctx)
    assert a != virtual.virtual_execute(s, 4096, 4096, RunContext(worker=2, repetition=3))
    assert Fraction(2048) * Fraction(9, 10) <= a <= Fraction(2048) * Fraction(11, 10)
    zero = half_tick_schedule()
    assert virtual.virtual_execute(zero, 4096, 4096, ctx) == 2048


@pytest.mark.parametrize("plateaus", [
    (),
    (Plateau(2048, 1), Plateau(1024, 2)),
    (Plateau(1024, 2), Plateau(2048, 1)),
    (Plateau(None, 1), Plateau(2048, 2)),
])
def test_schedule_invariants(plateaus):
    with pytest.raises(ConfigError):
        VirtualSchedule(plateaus)


def test_bounded_schedule_rejects_oversize():
    s = VirtualSchedule((Plateau(1024, 1),))
    with pytest.raises(ConfigError):
        s.plateau_for(2048)


def _handle(kid, vb=64):
    p = VirtualPlatform(half_tick_schedule(vector_bytes=vb))
    return p, p.resolve(kernels.parse_kernel_id(kid))


def test_trace_neon_manual_r4():
    p, h = _handle("neon/fadd/manual/r4")
    buf = p.allocate(memory.BufferRequest(1024))
    trace = virtual.address_trace(h, buf)
    assert trace[:4] == [(0, 64), (64, 64), (128, 64), (192, 64)]
    assert trace[4:8] == [(256, 64), (320, 64), (384, 64), (448, 64)]
    assert len(trace) == 16


def test_trace_post_increment_single_cursor():
    p, h = _handle("neon/load/post/r4")
    buf = p.allocate(memory.BufferRequest(1024))
    trace = virtual.address_trace(h, buf)
    assert [o for o, _ in trace] == list(range(0, 1024, 64))


@pytest.mark.parametrize("spec", EMULATED, ids=str)
@pytest.mark.parametrize("vb", [16, 32, 64])
def test_trace_coverage_and_metadata_agreement(spec, vb):
    p = VirtualPlatform(half_tick_schedule(vector_bytes=vb))
    h = p.resolve(spec)
    size = h.metadata.size_granularity * 3
    buf = p.allocate(memory.BufferRequest(size))
    passes = 2
    trace = virtual.address_trace(h, buf, passes)
    per_pass = len(trace) // passes
    covered = sorted(trace[:per_pass])
    assert covered[0][0] == 0
    for (o1, l1), (o2, _) in zip(covered, covered[1:]):
        assert o1 + l1 == o2
    assert covered[-1][0] + covered[-1][1] == size
    total = sum(length for _, length in trace)
    iterations = size * passes // h.metadata.bytes_per_iteration
    assert total == iterations * h.metadata.bytes_per_iteration


def test_platform_accounting_and_clock():
    p, h = _handle("virtual/load/manual/r2")
    buf = p.allocate(memory.BufferRequest(64 * KiB))
    t = p.timer(0)
    t0 = t.read()
    token = kernels.execute_kernel(h, buf, 3)
    assert t.read() - t0 == 3 * 32768
    assert p.bytes_touched[0] == token.bytes_touched == 3 * 64 * KiB
    assert token.iterations * h.metadata.bytes_per_iteration == token.bytes_touched


def test_schedule_file_round_trip(tmp_path):
    s = VirtualSchedule((virtual.plateau_for_gbps(65536, 159, 1_800_000_000, Fraction(3, 2)),
                         Plateau(None, Fraction(7, 3))),
                        tick_frequency_hz=1_800_000_000, per_worker_jitter=Fraction(1, 100),
                        seed=11, read_overhead_ticks=5, vector_bytes=32,
                        worker_ticks_scale=(1, Fraction(3, 2)))
    path = tmp_path / "s.vplat"
    path.write_text(virtual.dump_schedule(s))
    assert virtual.load_schedule(path) == s


def test_schedule_file_gbps_form():
    s = virtual.parse_schedule("vplat.tick_frequency_hz = 1000000000\n"
                               "vplat.plateau.0.max_bytes = 65536\n"
                               "vplat.plateau.0.gbps = 100\n"
                               "vplat.plateau.1.max_bytes = inf\n"
                               "vplat.plateau.1.gbps = 50\n")
    assert [p.ticks_per_byte for p in s.plateaus] == [Fraction(1, 100), Fraction(1, 50)]


@given(st.integers(0, 2**63), st.integers(0, 1000), st.integers(0, 10**6))
def test_jitter_draw_range(seed, worker, rep):
    u = virtual.jitter_draw(seed, worker, rep, 4096)
    assert -1.0 <= u < 1.0
    assert u == virtual.jitter_draw(seed, worker, rep, 4096)
