"""Wall-time and resident-memory bookkeeping for pipeline stages.

Measurements are logged only; they never enter report files, which must be
reproducible byte for byte.
"""
from __future__ import annotations

import logging
import os
import time

import psutil

logger = logging.getLogger(__name__)

_TWO_20 = float(2 ** 20)


def _child_memory(process):
    """Resident memory of every child process, in MiB."""
    try:
        for child in process.children(recursive=True):
            try:
                yield child.memory_info().rss / _TWO_20
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                yield 0.0
    except (psutil.NoSuchProcess, psutil.AccessDenied):
        yield 0.0


def current_memory(include_children=False, pid=None):
    """Resident set size of ``pid`` (default: this process) in MiB, or -1
    when the process cannot be inspected."""
    try:
        process = psutil.Process(pid or os.getpid())
        mem = process.memory_info().rss / _TWO_20
        if include_children:
            mem += sum(_child_memory(process))
        return mem
    except (psutil.NoSuchProcess, psutil.AccessDenied):
        return -1.0


def default_workers():
    """Number of usable CPUs for the worker pool."""
    try:
        return max(1, len(psutil.Process().cpu_affinity()))
    except (AttributeError, psutil.Error):
        return max(1, psutil.cpu_count() or 1)


class StageProfiler:
    """Records (stage, seconds, MiB at entry, MiB at exit) for named blocks.

    >>> prof = StageProfiler()
    >>> with prof.stage('prealign'):
    ...     pass
    """

    def __init__(self, include_children=True):
        self.include_children = include_children
        self.records = []

    def stage(self, name):
        return _StageCM(self, name)

    def summary(self):
        lines = ['{0:<24s} {1:>10s} {2:>12s}'.format('stage', 'seconds',
                                                     'peak MiB')]
        for name, seconds, start, end in self.records:
            lines.append('{0:<24s} {1:>10.2f} {2:>12.1f}'.format(
                name, seconds, max(start, end)))
        return '\n'.join(lines)


class _StageCM(object):

    def __init__(self, profiler, name):
        self.profiler = profiler
        self.name = name

    def __enter__(self):
        self.mem = current_memory(self.profiler.include_children)
        self.start = time.perf_counter()
        logger.info('stage %s: started', self.name)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        elapsed = time.perf_counter() - self.start
        mem = current_memory(self.profiler.include_children)
        self.profiler.records.append((self.name, elapsed, self.mem, mem))
        if exc_type is None:
            logger.info('stage %s: %.2f s, %.1f MiB (%+.1f)', self.name,
                        elapsed, mem, mem - self.mem)
        else:
            logger.error('stage %s: failed after %.2f s', self.name, elapsed)
        return False
