"""On-demand compilation of the C/asm pieces via the system C compiler.

Libraries are cached under ``$MEMBENCH_CACHE_DIR`` (default
``~/.cache/membench``) keyed by a hash of source, flags and compiler.
"""

import ctypes
import functools
import hashlib
import logging
import os
import platform
import shutil
import subprocess
import tempfile
from importlib import resources
from pathlib import Path

log = logging.getLogger(__name__)


class NativeBuildError(RuntimeError):
    pass


def compiler():
    return os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")


def cache_dir():
    root = os.environ.get("MEMBENCH_CACHE_DIR")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "membench"


def build_shared(name, source, flags=()):
    cc = compiler()
    if cc is None:
        raise NativeBuildError("no C compiler found")
    flags = ["-O2", "-shared", "-fPIC", *flags]
    digest = hashlib.sha256(
        "\0".join([source, cc, platform.machine(), *flags]).encode()).hexdigest()[:16]
    target = cache_dir() / f"{name}-{digest}.so"
    if not target.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / f"{name}.c"
            src.write_text(source)
            out = Path(tmp) / target.name
            proc = subprocess.run([cc, *flags, "-o", str(out), str(src)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise NativeBuildError(f"{cc} failed for {name}:\n{proc.stderr}")
            # atomic publish; concurrent builders race benignly
            os.replace(out, target)
    return ctypes.CDLL(str(target))


def _declare_common(lib):
    u64 = ctypes.c_uint64
    lib.mb_has_hw_counter.restype = ctypes.c_int
    lib.mb_hw_counter.restype = u64
    lib.mb_hw_counter_freq.restype = u64
    lib.mb_fenced_monotonic_ns.restype = u64
    lib.mb_scalar_sum.restype = None
    lib.mb_scalar_sum.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t,
                                  ctypes.POINTER(ctypes.c_double)]
    return lib


@functools.lru_cache(maxsize=None)
def common_library():
    """The host library, or None when it cannot be built here."""
    if os.environ.get("MEMBENCH_NO_NATIVE"):
        return None
    source = resources.files(__package__).joinpath("common.c").read_text()
    try:
        return _declare_common(build_shared("membench_common", source))
    except (NativeBuildError, OSError) as exc:
        log.warning("native library unavailable: %s", exc)
        return None


@functools.lru_cache(maxsize=None)
def simd_library(ext):
    """Compiled NEON or SVE kernels for this aarch64 host, or None."""
    if os.environ.get("MEMBENCH_NO_NATIVE") or platform.machine() not in ("aarch64", "arm64"):
        return None
    from .. import codegen
    source = codegen.library_source(ext)
    flags = ["-march=armv8.2-a+sve"] if ext == "sve" else []
    try:
        return build_shared(f"membench_{ext}", source, flags)
    except (NativeBuildError, OSError) as exc:
        log.warning("%s kernels unavailable: %s", ext, exc)
        return None
