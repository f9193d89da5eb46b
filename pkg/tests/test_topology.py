from fractions import Fraction

import pytest

from membench import topology
from membench.errors import InvariantViolation, SpecParseError
from membench.topology import CacheScope

KiB, MiB = 1024, 1024 * 1024


def test_a64fx_builtin():
    s = topology.builtin("a64fx")
    assert s.nominal_frequency_hz == 1_800_000_000
    assert len(s.cores) == 48 and s.numa_node_of(47) == 3
    l1, l2 = s.cache_levels
    assert (l1.level_name, l1.capacity_bytes, l1.scope) == ("L1d", 64 * KiB, CacheScope.PER_CORE)
    assert l1.peak_gbps(s.nominal_frequency_hz) == Fraction("230.4")
    assert l1.peak_bytes_per_cycle_per_core * s.nominal_frequency_hz / 10**9 == Fraction("230.4")
    assert (l2.capacity_bytes, l2.scope, l2.group_size_cores) == (8 * MiB, CacheScope.PER_GROUP, 12)
    assert s.level("L3") is None
    assert s.dram_peak_gbps == Fraction("921.6") == 4 * Fraction("230.4")
    assert s.decoder_width == 4


def test_altra_builtin():
    s = topology.builtin("altra")
    assert len(s.cores) == 80 and s.nominal_frequency_hz == 3_000_000_000
    assert s.level("L1d").peak_gbps(s.nominal_frequency_hz) == 96
    assert s.dram_peak_gbps == Fraction("204.8") == 8 * topology.ddr_channel_gbps(3200)


def test_thunderx2_builtin():
    s = topology.builtin("thunderx2")
    assert len(s.cores) == 56 and s.sockets == 2
    assert s.nominal_frequency_hz == 2_000_000_000
    assert s.level("L1d").capacity_bytes == 32 * KiB
    assert s.level("L1d").peak_gbps(s.nominal_frequency_hz) == 64
    assert s.dram_peak_gbps_per_socket == Fraction("170.5")


@pytest.mark.parametrize("name", sorted(topology.builtin_specs()))
def test_builtin_round_trip_and_peak_consistency(name, tmp_path):
    s = topology.builtin(name)
    path = tmp_path / f"{name}.spec"
    topology.save_spec(s, path)
    assert topology.load_spec(path) == s
    assert topology.resolve_spec(str(path)) == s
    assert topology.resolve_spec(f"builtin:{name}") == s
    for lvl in s.cache_levels:
        if lvl.peak_bytes_per_cycle_per_core is not None and lvl.peak_gbps_per_core is not None:
            assert lvl.peak_gbps_per_core == \
                lvl.peak_bytes_per_cycle_per_core * s.nominal_frequency_hz / 10**9


SPEC = """\
name = toy
frequency_hz = 2000000000
cache.0.name = L1d
cache.0.capacity_bytes = 32768
cache.0.peak_bpc = 32
cache.0.peak_gbps = {gbps}
cache.1.name = L2
cache.1.capacity_bytes = 1048576
"""


def test_inconsistent_peak_is_rejected():
    assert topology.parse_spec(SPEC.format(gbps="64.06")).level("L1d")  # within 0.1%
    with pytest.raises(InvariantViolation) as exc:
        topology.parse_spec(SPEC.format(gbps="64.1"))
    assert exc.value.field == "cache.0.peak_gbps"


def test_missing_l3_is_fine_and_order_enforced():
    s = topology.parse_spec(SPEC.format(gbps="64"))
    assert [lvl.level_name for lvl in s.cache_levels] == ["L1d", "L2"]
    bad = SPEC.format(gbps="64").replace("1048576", "16384")
    with pytest.raises(InvariantViolation, match="cache.1.capacity_bytes"):
        topology.parse_spec(bad)


def test_parse_errors_carry_location():
    with pytest.raises(SpecParseError) as exc:
        topology.parse_spec("name = x\ncache.0.capacity_bytes = big\n")
    assert exc.value.line == 2 and exc.value.field == "cache.0.capacity_bytes"
    with pytest.raises(SpecParseError) as exc:
        topology.parse_spec("name = x\nbogus = 1\n")
    assert exc.value.field == "bogus"
    with pytest.raises(SpecParseError):
        topology.parse_spec("frequency_hz = 1\n")


def _fake_sysfs(root, l1="64K", l2="1024K", shared="0-3"):
    base = root / "sys/devices/system"
    (base / "cpu").mkdir(parents=True)
    (base / "cpu/online").write_text("0-3\n")
    for cpu in range(4):
        c = base / f"cpu/cpu{cpu}"
        (c / "topology").mkdir(parents=True)
        (c / "topology/thread_siblings_list").write_text(f"{cpu}\n")
        for idx, (level, ctype, size, share) in enumerate(
                [(1, "Data", l1, str(cpu)), (1, "Instruction", "64K", str(cpu)),
                 (2, "Unified", l2, shared)]):
            d = c / f"cache/index{idx}"
            d.mkdir(parents=True)
            (d / "level").write_text(f"{level}\n")
            (d / "type").write_text(f"{ctype}\n")
            (d / "size").write_text(f"{size}\n")
            (d / "shared_cpu_list").write_text(f"{share}\n")
        (c / "cpufreq").mkdir()
        (c / "cpufreq/cpuinfo_max_freq").write_text("2600000\n")
    node = base / "node/node0"
    node.mkdir(parents=True)
    (node / "cpulist").write_text("0-3\n")


def test_detect_from_fake_sysfs(tmp_path):
    _fake_sysfs(tmp_path)
    s = topology.detect(str(tmp_path))
    l1, l2 = s.cache_levels
    assert (l1.level_name, l1.capacity_bytes, l1.scope) == ("L1d", 65536, CacheScope.PER_CORE)
    assert (l2.capacity_bytes, l2.scope) == (1024 * KiB, CacheScope.SHARED)
    assert s.nominal_frequency_hz == 2_600_000_000
    assert [c for c, _ in s.cores] == [0, 1, 2, 3] and s.numa_node_of(2) == 0
    assert "peaks_unknown" in s.flags and not s.has_peaks


def test_detect_live_host_never_raises():
    s = topology.detect()
    assert s.provenance == "detected"
    assert "peaks_unknown" in s.flags


def test_merge_user_values_win(tmp_path):
    _fake_sysfs(tmp_path)
    detected = topology.detect(str(tmp_path))
    user = tmp_path / "user.spec"
    user.write_text("frequency_hz = 3000000000\ncache.0.name = L1d\ncache.0.peak_bpc = 32\n"
                    "dram.peak_gbps_per_socket = 100\n")
    merged = topology.merge_specs(detected, topology.load_partial_spec(user))
    assert merged.nominal_frequency_hz == 3_000_000_000
    assert merged.level("L1d").capacity_bytes == 65536  # kept from detection
    assert merged.level("L1d").peak_gbps(merged.nominal_frequency_hz) == 96
    assert merged.dram_peak_gbps_per_socket == 100
    assert "peaks_unknown" not in merged.flags
    assert merged.provenance == "detected+user"


def test_sharers():
    a64 = topology.builtin("a64fx")
    l1, l2 = a64.cache_levels
    assert l1.sharers(48) == 1
    assert l2.sharers(48) == 12 and l2.sharers(4) == 4
