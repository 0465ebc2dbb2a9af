"""Thread-count helpers and BLAS pool pinning for reproducible parallel timing."""

from __future__ import annotations

import contextlib
import os

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl is a declared dependency
    threadpool_limits = None

THREADS_ENV_VAR = "SPLINEREG_THREADS"


@contextlib.contextmanager
def single_threaded_blas():
    """Limit BLAS/OpenMP pools to one thread for the duration of the block.

    Library-level parallelism is managed explicitly (tile chunks, image slabs);
    letting BLAS spawn its own workers underneath would both oversubscribe the
    machine and make single-thread baselines meaningless.
    """
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def physical_core_count() -> int:
    """Number of physical cores, ignoring SMT siblings. Falls back to cpu_count."""
    try:
        cores = set()
        base = "/sys/devices/system/cpu"
        for name in os.listdir(base):
            if not name.startswith("cpu") or not name[3:].isdigit():
                continue
            topo = os.path.join(base, name, "topology")
            try:
                with open(os.path.join(topo, "core_id")) as fh:
                    core = fh.read().strip()
                with open(os.path.join(topo, "physical_package_id")) as fh:
                    pkg = fh.read().strip()
            except OSError:
                continue
            cores.add((pkg, core))
        if cores:
            return len(cores)
    except OSError:
        pass
    return os.cpu_count() or 1


def resolve_thread_count(flag_value: int | None) -> int:
    """Thread count from CLI flag, else environment, else 1. The flag wins."""
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
