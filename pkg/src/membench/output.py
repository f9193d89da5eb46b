"""CSV/JSON emission and plot-script generation for sweep results."""

import csv
import io
import json
import os
from fractions import Fraction

from . import analysis

COLUMNS = ("kernel_id", "size_bytes", "core_count", "repetitions", "mean_gbps", "stddev_gbps",
           "bytes_per_cycle", "efficiency_pct", "level_annotation", "warnings")
SIGNIFICANT_DIGITS = 6


def fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return f"{float(value):.{SIGNIFICANT_DIGITS}g}"


def _jsonable(value):
    if isinstance(value, Fraction):
        return str(value) if value.denominator != 1 else value.numerator
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value  # enums
    return value


def columns_for(machine):
    if machine is None or not machine.has_peaks:
        return tuple(c for c in COLUMNS if c != "efficiency_pct")
    return COLUMNS


def rows(result, machine=None):
    """One dict per working-set size, numbers unrounded."""
    out = []
    for p in result.points:
        level = ""
        eff = None
        if machine is not None and machine.cache_levels:
            level = analysis.classify_size(p.size_bytes,
                                           analysis.effective_levels(machine, p.core_count))
            peak = analysis.level_peak_gbps(machine, level, p.core_count)
            ratio = analysis.efficiency(p.mean_gbps, peak)
            eff = None if ratio is None else 100 * ratio
        out.append({
            "kernel_id": result.kernel_id,
            "size_bytes": p.size_bytes,
            "core_count": p.core_count,
            "repetitions": p.sample_count,
            "mean_gbps": p.mean_gbps,
            "stddev_gbps": p.stddev_gbps,
            "bytes_per_cycle": p.bytes_per_cycle,
            "efficiency_pct": eff,
            "level_annotation": level,
            "warnings": ";".join(p.warnings),
        })
    return out


def _metadata_lines(result):
    md = result.metadata
    machine = md.get("machine")
    lines = [
        f"kernel_id: {result.kernel_id}",
        f"backend: {md.get('backend')}",
        f"authoritative: {fmt(md.get('authoritative'))}",
        f"calibration: {json.dumps(_jsonable(md.get('calibration')), sort_keys=True)}",
        "machine: " + ("none" if machine is None
                       else f"{machine['name']} (provenance {machine['provenance']})"),
        f"frequency_basis: {md.get('frequency_basis')}",
        f"config_hash: {md.get('config_hash')}",
        f"config: {json.dumps(_jsonable(md.get('config')), sort_keys=True)}",
    ]
    for w in md.get("warnings", ()):
        lines.append(f"warning: {w}")
    return lines


def to_csv(result, machine=None):
    cols = columns_for(machine)
    buf = io.StringIO()
    for line in _metadata_lines(result):
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows(result, machine):
        writer.writerow([row[c] if isinstance(row[c], str) else fmt(row[c]) for c in cols])
    return buf.getvalue()


def report(result, machine):
    """Per-level efficiencies and detected knees, or ``{}`` without a machine spec."""
    if machine is None or not machine.cache_levels or not result.points:
        return {}
    core_count = result.points[0].core_count
    series = result.gbps_series()
    out = {"levels": [
        {"level": e.level, "measured_gbps": e.measured_gbps, "peak_gbps": e.peak_gbps,
         "efficiency": e.efficiency_fraction, "flags": list(e.flags)}
        for e in analysis.efficiency_report(series, machine, core_count)]}
    try:
        knees = analysis.detect_knees(series, machine, core_count)
    except analysis.AnalysisError:
        knees = []
    out["knees"] = [
        {"boundary_bytes": k.boundary_bytes, "upstream_gbps": k.upstream_level_gbps,
         "downstream_gbps": k.downstream_level_gbps, "confidence": k.confidence,
         "ratio": k.ratio, "level": k.level_name}
        for k in knees]
    return out


def to_json(result, machine=None):
    cols = columns_for(machine)
    doc = {
        "metadata": _jsonable(result.metadata),
        "columns": list(cols),
        "rows": [{c: row[c] for c in cols} for row in rows(result, machine)],
        "analysis": report(result, machine),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def json_to_csv_rows(text):
    """Project a JSON document back onto formatted CSV cells."""
    doc = json.loads(text)
    cols = doc["columns"]
    return [[r[c] if isinstance(r[c], str) else fmt(r[c]) for c in cols] for r in doc["rows"]]


def to_dat(result, machine=None):
    lines = ["# size_bytes mean_gbps stddev_gbps level"]
    for row in rows(result, machine):
        lines.append(f"{row['size_bytes']} {row['mean_gbps']!r} {row['stddev_gbps']!r} "
                     f"{row['level_annotation'] or '-'}")
    return "\n".join(lines) + "\n"


PLOT_TEMPLATE = '''\
"""Bandwidth versus working-set size for {kernel_id}."""
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

DATA = {dat!r}
BOUNDARIES = {boundaries!r}
TITLE = {title!r}


def main(out="{stem}.png"):
    sizes, gbps, err = [], [], []
    with open(DATA) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            s, m, d, _ = line.split()
            sizes.append(int(s))
            gbps.append(float(m))
            err.append(float(d))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.errorbar(sizes, gbps, yerr=err, marker="o", markersize=3, capsize=2)
    ax.set_xscale("log", base=2)
    top = max(gbps) * 1.1
    for name, cap in BOUNDARIES:
        ax.axvline(cap, color="grey", linestyle="--", linewidth=0.8)
        ax.text(cap, top, name, rotation=90, va="top", ha="right", fontsize=8)
    ax.set_ylim(0, top * 1.05)
    ax.set_xlabel("working set [B]")
    ax.set_ylabel("bandwidth [GB/s]")
    ax.set_title(TITLE)
    ax.grid(True, which="major", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)


if __name__ == "__main__":
    main(*sys.argv[1:])
'''


def plot_script(result, machine, dat_path, stem):
    boundaries = []
    if machine is not None and result.points:
        for lvl in analysis.effective_levels(machine, result.points[0].core_count):
            if lvl.capacity_bytes is not None and not lvl.indistinct:
                boundaries.append((lvl.name, lvl.capacity_bytes))
    cores = result.points[0].core_count if result.points else 1
    title = f"{result.kernel_id}, {cores} core(s)"
    if machine is not None:
        title += f", {machine.name}"
    return PLOT_TEMPLATE.format(kernel_id=result.kernel_id, dat=os.path.basename(dat_path),
                                boundaries=boundaries, title=title, stem=stem)


def write_plot(result, machine, stem):
    """Write ``<stem>.dat`` and ``<stem>_plot.py``; returns both paths."""
    dat_path = f"{stem}.dat"
    script_path = f"{stem}_plot.py"
    with open(dat_path, "w") as fh:
        fh.write(to_dat(result, machine))
    with open(script_path, "w") as fh:
        fh.write(plot_script(result, machine, dat_path, os.path.basename(stem)))
    return dat_path, script_path


def emit(result, fmt_name="csv", machine=None):
    if fmt_name == "csv":
        return to_csv(result, machine)
    if fmt_name == "json":
        return to_json(result, machine)
    raise ValueError(f"unknown output format {fmt_name!r}")
