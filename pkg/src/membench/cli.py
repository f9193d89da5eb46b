"""Command-line front end: ``membench [--config FILE] [flags]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 backend
unavailable.
"""

import argparse
import os
import sys
from dataclasses import dataclass

from . import engine, kvfile, output, topology, virtual
from .errors import (BackendUnavailable, CalibrationError, ConfigError, ExtensionUnsupported,
                     MembenchError, SpecParseError)
from .kernels import IsaExtension, extension_available, list_kernels, parse_kernel_id
from .memory import HugepagePolicy, parse_cpu_list

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4

DEFAULT_KERNEL = "neon/fadd/manual/r4"
FALLBACK_KERNEL = "scalar/fadd/manual/r2"
BACKEND_ENV = "MEMBENCH_BACKEND"
BACKENDS = ("host", "virtual")

_SUFFIXES = {"k": 1024, "kib": 1024, "m": 1024**2, "mib": 1024**2, "g": 1024**3, "gib": 1024**3}


def parse_size(text):
    """``"64K"``/``"8MiB"``/``"4096"`` -> bytes (binary multiples)."""
    t = text.strip().lower()
    for suffix in sorted(_SUFFIXES, key=len, reverse=True):
        if t.endswith(suffix):
            return int(t[:-len(suffix)]) * _SUFFIXES[suffix]
    return kvfile.parse_int(t)


def parse_sizes(text):
    return [parse_size(p) for p in text.split(",") if p.strip()]


def parse_cores(text):
    cores = parse_cpu_list(text)
    if not cores:
        raise ValueError("empty core list")
    return cores


FIELDS = {
    "kernel": str,
    "cores": parse_cores,
    "sizes": parse_sizes,
    "reps": kvfile.parse_int,
    "pattern_x": float,
    "alignment": kvfile.parse_int,
    "hugepages": HugepagePolicy,
    "machine_spec": str,
    "subtract_loop_overhead": kvfile.parse_bool,
    "subtract_timer_overhead": kvfile.parse_bool,
    "min_bytes_per_sample": parse_size,
    "output": str,
    "plot": kvfile.parse_bool,
    "virtual": str,
    "seed": kvfile.parse_int,
    "out": str,
}

DEFAULTS = {
    "kernel": None,
    "cores": [0],
    "sizes": None,
    "reps": engine.DEFAULT_REPETITIONS,
    "pattern_x": 4.0,
    "alignment": 64,
    "hugepages": HugepagePolicy.TRANSPARENT,
    "machine_spec": None,
    "subtract_loop_overhead": False,
    "subtract_timer_overhead": False,
    "min_bytes_per_sample": engine.DEFAULT_MIN_BYTES_PER_SAMPLE,
    "output": "csv",
    "plot": False,
    "virtual": None,
    "seed": None,
    "out": None,
}


@dataclass
class RunPlan:
    config: engine.SweepConfig
    machine: object
    platform: object
    output: str
    plot: bool
    out: str
    warnings: list


def build_parser():
    p = argparse.ArgumentParser(
        prog="membench",
        description="Memory-hierarchy load-bandwidth sweep.")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--kernel", help=f"kernel id, e.g. sve/fadd/offset/r2 (default {DEFAULT_KERNEL})")
    p.add_argument("--cores", help="core list, e.g. 0-47 or 0,2,4")
    p.add_argument("--sizes", help="comma-separated working-set sizes (K/M/G suffixes)")
    p.add_argument("--reps", help="repetitions per size (default 100)")
    p.add_argument("--min-bytes-per-sample", dest="min_bytes_per_sample",
                   help="traffic per timed repetition (default 256M)")
    p.add_argument("--pattern-x", dest="pattern_x", help="buffer pattern value (default 4.0)")
    p.add_argument("--alignment", help="buffer alignment in bytes (default 64)")
    p.add_argument("--hugepages", choices=[h.value for h in HugepagePolicy])
    p.add_argument("--machine-spec", dest="machine_spec", help="spec file or builtin:NAME")
    p.add_argument("--subtract-loop-overhead", dest="subtract_loop_overhead",
                   action="store_const", const="true")
    p.add_argument("--subtract-timer-overhead", dest="subtract_timer_overhead",
                   action="store_const", const="true")
    p.add_argument("--output", choices=["csv", "json"])
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--plot", action="store_const", const="true",
                   help="also write <stem>.dat and <stem>_plot.py")
    p.add_argument("--virtual", help="virtual schedule file (or 'builtin:a64fx')")
    p.add_argument("--seed", help="seed for virtual jitter")
    p.add_argument("--list-kernels", action="store_true", help="print the kernel catalog")
    return p


def _convert(key, value, origin):
    if not isinstance(value, str):
        return value
    try:
        return FIELDS[key](value)
    except (ValueError, TypeError) as exc:
        raise SpecParseError(f"invalid value {value!r} ({exc})", field=f"{origin}{key}") from None


def merge_settings(file_kv, args):
    """File values, then flags on top, then defaults for whatever is left."""
    settings = dict(DEFAULTS)
    if file_kv is not None:
        for key in FIELDS:
            if key in file_kv:
                settings[key] = _convert(key, file_kv.raw(key), "")
        unknown = file_kv.unused()
        if unknown:
            raise SpecParseError("unknown config key", line=file_kv.line_of(unknown[0]),
                                 field=unknown[0])
    for key in FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = _convert(key, value, "--")
    return settings


def _select_backend(settings):
    forced = os.environ.get(BACKEND_ENV, "").strip().lower() or None
    if forced is not None and forced not in BACKENDS:
        raise ConfigError(f"{BACKEND_ENV}={forced!r}: expected one of {', '.join(BACKENDS)}")
    if forced == "host" and settings["virtual"]:
        raise ConfigError(f"--virtual conflicts with {BACKEND_ENV}=host")
    return forced or ("virtual" if settings["virtual"] else "host")


def _schedule(settings):
    ref = settings["virtual"]
    if ref in (None, "builtin:a64fx"):
        schedule = virtual.a64fx_like_schedule()
    else:
        schedule = virtual.load_schedule(ref)
    if settings["seed"] is not None:
        schedule = virtual.VirtualSchedule(
            schedule.plateaus, schedule.tick_frequency_hz, schedule.per_worker_jitter,
            settings["seed"], schedule.read_overhead_ticks, schedule.vector_bytes,
            schedule.worker_ticks_scale)
    return schedule


def plan_run(settings):
    warnings = []
    backend = _select_backend(settings)
    kernel_text = settings["kernel"]
    if kernel_text is None:
        kernel_text = DEFAULT_KERNEL
        if backend == "host" and not extension_available(IsaExtension.NEON):
            kernel_text = FALLBACK_KERNEL
            warnings.append(f"neon unavailable on this host; default kernel is {FALLBACK_KERNEL}")
    spec = parse_kernel_id(kernel_text)

    machine = None
    if settings["machine_spec"]:
        machine = topology.resolve_spec(settings["machine_spec"])
    elif backend == "host":
        machine = topology.detect()

    if backend == "virtual":
        platform = virtual.VirtualPlatform(_schedule(settings))
    else:
        if not extension_available(spec.isa_extension) or spec.isa_extension is IsaExtension.VIRTUAL:
            raise ExtensionUnsupported(
                f"{spec.isa_extension.value} kernels cannot run on this host "
                f"(try --kernel {FALLBACK_KERNEL} or --virtual)")
        platform = engine.HostPlatform()

    config = engine.SweepConfig(
        kernel=spec,
        sizes_bytes=tuple(settings["sizes"]) if settings["sizes"] else None,
        repetitions=settings["reps"],
        min_bytes_per_sample=settings["min_bytes_per_sample"],
        cores=tuple(settings["cores"]),
        alignment_bytes=settings["alignment"],
        hugepage_policy=settings["hugepages"],
        subtract_loop_overhead=settings["subtract_loop_overhead"],
        subtract_timer_overhead=settings["subtract_timer_overhead"],
        pattern_x=settings["pattern_x"],
    )
    if settings["output"] not in ("csv", "json"):
        raise ConfigError(f"output must be csv or json, not {settings['output']!r}")
    return RunPlan(config, machine, platform, settings["output"], settings["plot"],
                   settings["out"], warnings)


def parse_config(argv=None):
    """argv (+ optional --config file) -> :class:`RunPlan`. Raises on bad input."""
    args = build_parser().parse_args(argv)
    file_kv = kvfile.read(args.config) if args.config else None
    return plan_run(merge_settings(file_kv, args))


def execute(plan):
    result = engine.Engine(plan.platform, plan.machine).sweep(plan.config)
    if plan.warnings:
        result.metadata["warnings"] = plan.warnings + result.metadata["warnings"]
    return result


def write_outputs(plan, result, stdout=None):
    text = output.emit(result, plan.output, plan.machine)
    if plan.out:
        with open(plan.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        (stdout or sys.stdout).write(text)
    if plan.plot:
        stem = os.path.splitext(plan.out)[0] if plan.out else "membench"
        output.write_plot(result, plan.machine, stem)


def _print_catalog(stream):
    for spec, available in list_kernels():
        stream.write(f"{spec.kernel_id}\t{'available' if available else 'unavailable'}\n")


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.list_kernels:
        _print_catalog(stdout)
        return EXIT_OK
    try:
        file_kv = kvfile.read(args.config) if args.config else None
    except OSError as exc:
        stderr.write(f"membench: cannot read config: {exc}\n")
        return EXIT_IO
    except SpecParseError as exc:
        stderr.write(f"membench: config error: {exc}\n")
        return EXIT_CONFIG
    try:
        plan = plan_run(merge_settings(file_kv, args))
        result = execute(plan)
    except (BackendUnavailable, ExtensionUnsupported, CalibrationError) as exc:
        stderr.write(f"membench: backend unavailable: {exc}\n")
        return EXIT_BACKEND
    except OSError as exc:
        stderr.write(f"membench: I/O error: {exc}\n")
        return EXIT_IO
    except (ValueError, MembenchError) as exc:
        stderr.write(f"membench: config error: {exc}\n")
        return EXIT_CONFIG
    try:
        write_outputs(plan, result, stdout)
    except OSError as exc:
        stderr.write(f"membench: I/O error: {exc}\n")
        return EXIT_IO
    return EXIT_OK
