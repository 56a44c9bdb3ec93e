"""
Host resources: worker counts for parallel stages and the `info` summary.
"""

import platform
from dataclasses import dataclass

import psutil
import torch


@dataclass
class SystemStats:
    """Host summary shown by `modcal info`."""
    physical_cores: int
    logical_cores: int
    memory_total: int
    memory_available: int
    python: str
    torch: str
    torch_threads: int


def get_system_stats() -> SystemStats:
    memory = psutil.virtual_memory()
    return SystemStats(
        physical_cores=psutil.cpu_count(logical=False) or 1,
        logical_cores=psutil.cpu_count(logical=True) or 1,
        memory_total=memory.total,
        memory_available=memory.available,
        python=platform.python_version(),
        torch=torch.__version__,
        torch_threads=torch.get_num_threads(),
    )


def default_workers(requested: int = 0) -> int:
    """Requested count, or the number of physical cores when 0."""
    if requested and requested > 0:
        return requested
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
