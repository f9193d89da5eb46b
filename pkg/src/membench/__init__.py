"""Memory-hierarchy load-bandwidth microbenchmark."""

from .engine import Engine, SweepConfig, sweep
from .kernels import KernelSpec, parse_kernel_id, resolve_kernel
from .memory import BufferRequest, allocate, initialize_denormal_safe, verify_pattern
from .topology import MachineSpec, builtin
from .virtual import VirtualPlatform, VirtualSchedule

__version__ = "0.1.0"
