import csv
import io
import json
import os
import platform
import subprocess
import sys
from pathlib import Path

import pytest

from membench import cli, engine, kernels, output, topology, virtual
from membench.engine import Engine, SweepConfig
from membench.virtual import VirtualPlatform

DATA = Path(__file__).parent / "data"
GOLDEN_ARGS = ["--config", str(DATA / "golden.cfg"), "--virtual", str(DATA / "a64fx_jitter.vplat")]


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def small_result(machine=None):
    eng = Engine(VirtualPlatform(virtual.a64fx_like_schedule()), machine)
    return eng.sweep(SweepConfig(kernels.parse_kernel_id("sve/fadd/offset/r2"),
                                 sizes_bytes=(8192, 1 << 20, 1 << 26), repetitions=3))


def _table(text):
    return list(csv.reader(ln for ln in text.splitlines() if not ln.startswith("#")))


def test_csv_columns_and_digits():
    text = output.to_csv(small_result(topology.builtin("a64fx")), topology.builtin("a64fx"))
    header, *rows = _table(text)
    assert header == list(output.COLUMNS)
    assert rows[0][0] == "sve/fadd/offset/r2" and rows[0][1] == "8192"
    for row in rows:
        for cell in row[4:8]:
            digits = cell.lstrip("-").replace(".", "").split("e")[0].lstrip("0")
            assert len(digits) <= 6
    assert [r[8] for r in rows] == ["L1d", "L2", "DRAM"]
    assert float(rows[0][7]) == pytest.approx(69.0, rel=1e-5)


def test_metadata_lines_embed_reproduction_info():
    text = output.to_csv(small_result(topology.builtin("a64fx")), topology.builtin("a64fx"))
    meta = [ln for ln in text.splitlines() if ln.startswith("#")]
    joined = "\n".join(meta)
    for needle in ("kernel_id: sve/fadd/offset/r2", "calibration:", "a64fx (provenance published)",
                   "config_hash:"):
        assert needle in joined


def test_efficiency_omitted_without_peaks():
    no_peaks = topology.MachineSpec("bare", cache_levels=(topology.CacheLevel("L1d", 65536),))
    header = _table(output.to_csv(small_result(no_peaks), no_peaks))[0]
    assert "efficiency_pct" not in header
    header = _table(output.to_csv(small_result()))[0]
    assert "efficiency_pct" not in header and "level_annotation" in header


def test_json_projects_onto_csv():
    machine = topology.builtin("a64fx")
    res = small_result(machine)
    doc = json.loads(output.to_json(res, machine))
    assert doc["metadata"]["config_hash"] == res.metadata["config_hash"]
    assert output.json_to_csv_rows(output.to_json(res, machine)) == \
        _table(output.to_csv(res, machine))[1:]
    # every numeric CSV field is present with full precision in JSON
    for row, p in zip(doc["rows"], res.points):
        assert row["mean_gbps"] == p.mean_gbps and row["stddev_gbps"] == p.stddev_gbps


def test_golden_csv_and_json_are_byte_identical():
    code, csv_text, _ = run_cli(*GOLDEN_ARGS)
    assert code == 0
    assert csv_text == (DATA / "golden.csv").read_text()
    code, json_text, _ = run_cli(*GOLDEN_ARGS, "--output", "json")
    assert code == 0
    assert json_text == (DATA / "golden.json").read_text()


def test_flags_override_config_file():
    code, text, _ = run_cli(*GOLDEN_ARGS, "--reps", "2", "--sizes", "8K,16K")
    assert code == 0
    rows = _table(text)[1:]
    assert [r[1] for r in rows] == ["8192", "16384"] and {r[3] for r in rows} == {"2"}


def test_default_settings():
    args = cli.build_parser().parse_args([])
    s = cli.merge_settings(None, args)
    assert s["cores"] == [0] and s["reps"] == 100 and s["kernel"] is None
    os.environ["MEMBENCH_BACKEND"] = "virtual"
    try:
        plan = cli.plan_run(s)
    finally:
        del os.environ["MEMBENCH_BACKEND"]
    assert plan.config.kernel.kernel_id == "neon/fadd/manual/r4"
    assert plan.config.cores == (0,) and plan.config.repetitions == 100


def test_cores_range_gives_48_core_sve_sweep():
    plan = cli.parse_config(["--kernel", "sve/fadd/offset/r2", "--cores", "0-47",
                             "--virtual", "builtin:a64fx"])
    assert plan.config.cores == tuple(range(48))
    assert plan.config.kernel.kernel_id == "sve/fadd/offset/r2"


@pytest.mark.parametrize("argv", [
    ["--sizes", "16K,8K"],
    ["--kernel", "sve/fadd/post/r2"],
    ["--reps", "zero"],
    ["--hugepages", "sometimes"],
    ["--pattern-x", "0"],
    ["--sizes", "100"],
])
def test_config_errors_exit_2(argv):
    code, _, err = run_cli("--virtual", "builtin:a64fx", *argv)
    assert code == 2, err


def test_unknown_config_key_exit_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("kernel = neon\nbogus = 1\n")
    code, _, err = run_cli("--config", str(cfg))
    assert code == 2 and "bogus" in err and "line 2" in err


def test_io_errors_exit_3(tmp_path):
    code, _, _ = run_cli("--config", str(tmp_path / "missing.cfg"))
    assert code == 3
    code, _, _ = run_cli(*GOLDEN_ARGS, "--reps", "1", "--out", str(tmp_path / "no/such/dir.csv"))
    assert code == 3


def test_backend_unavailable_exit_4(monkeypatch):
    monkeypatch.setenv("MEMBENCH_BACKEND", "host")
    code, _, err = run_cli("--kernel", "virtual/load", "--sizes", "8K", "--reps", "1")
    assert code == 4, err
    if platform.machine() not in ("aarch64", "arm64"):
        code, _, _ = run_cli("--kernel", "neon/fadd/manual/r4", "--sizes", "8K")
        assert code == 4


def test_bad_backend_env_exit_2(monkeypatch):
    monkeypatch.setenv("MEMBENCH_BACKEND", "quantum")
    assert run_cli("--sizes", "8K")[0] == 2


def test_plot_writes_data_and_script(tmp_path):
    out = tmp_path / "run.csv"
    code, _, err = run_cli(*GOLDEN_ARGS, "--reps", "2", "--plot", "--out", str(out))
    assert code == 0, err
    dat, script = tmp_path / "run.dat", tmp_path / "run_plot.py"
    assert dat.exists() and script.exists()
    lines = [ln for ln in dat.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 11 and lines[0].split()[3] == "L1d"
    pytest.importorskip("matplotlib")
    proc = subprocess.run([sys.executable, script.name, "run.png"], cwd=tmp_path,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "run.png").stat().st_size > 0


def test_list_kernels():
    code, text, _ = run_cli("--list-kernels")
    assert code == 0
    assert "sve/load/offset/r4\t" in text and "virtual/fadd/manual/r2\tavailable" in text


def test_module_entry_point(tmp_path):
    env = dict(os.environ, MEMBENCH_BACKEND="virtual")
    proc = subprocess.run([sys.executable, "-m", "membench", "--sizes", "8K,64K", "--reps", "1",
                           "--output", "json"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["metadata"]["backend"] == "virtual"


def test_host_default_kernel_falls_back_off_arm():
    if platform.machine() in ("aarch64", "arm64"):
        pytest.skip("NEON present")
    code, text, err = run_cli("--sizes", "16K", "--reps", "2", "--min-bytes-per-sample", "1M")
    assert code == 0, err
    assert "neon unavailable" in text
    assert _table(text)[1][0] == "scalar/fadd/manual/r2"
