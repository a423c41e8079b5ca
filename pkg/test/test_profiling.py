import logging
import os

from cellmatch.profiling import StageProfiler, current_memory, default_workers


def test_current_memory():
    mem = current_memory()
    assert type(mem) == float, "Memory usage of process should be a number"
    assert mem > 0
    assert current_memory(include_children=True) >= mem * 0.5


def test_unknown_pid():
    # pid 2**22 + 1 is above the default Linux pid_max
    assert current_memory(pid=2 ** 22 + 1) == -1.0


def test_default_workers():
    n = default_workers()
    assert type(n) == int
    assert 1 <= n <= (os.cpu_count() or 1)


def test_stage_records():
    prof = StageProfiler(include_children=False)
    with prof.stage('prealign'):
        data = [0] * 100000
    assert len(data) == 100000
    name, seconds, start, end = prof.records[0]
    assert name == 'prealign'
    assert seconds >= 0
    assert start > 0 and end > 0
    lines = prof.summary().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith('prealign')


def test_stage_failure_is_recorded():
    prof = StageProfiler()
    logging.getLogger('cellmatch.profiling').setLevel(logging.CRITICAL)
    try:
        with prof.stage('learn'):
            raise RuntimeError('learning failed')
    except RuntimeError:
        pass
    else:
        raise AssertionError('the exception must propagate')
    finally:
        logging.getLogger('cellmatch.profiling').setLevel(logging.NOTSET)
    assert [r[0] for r in prof.records] == ['learn']


if __name__ == "__main__":
    test_current_memory()
    test_unknown_pid()
    test_default_workers()
    test_stage_records()
    test_stage_failure_is_recorded()
