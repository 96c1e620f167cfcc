import numpy as np
import pytest
from hypothesis import settings

from dhnsw.bench.datasets import synthetic_dataset
from dhnsw.builder import build_index, records_from_arrays
from dhnsw.hnsw import HnswParams, VectorRecord, sq_l2_rows
from dhnsw.memory_node import register
from dhnsw.transport import TransportConfig, connect
from dhnsw.builder import upload

settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")


def random_records(n, dim, seed=0, start=0):
    rng = np.random.default_rng(seed)
    return [VectorRecord(start + i, v) for i, v in enumerate(rng.normal(size=(n, dim)).astype(np.float32))]


def brute_force(vectors, ids, query, k):
    """Exhaustive top-k as (id, squared distance), ties by smaller id."""
    d = sq_l2_rows(np.asarray(vectors, dtype=np.float32), np.asarray(query, dtype=np.float32).astype(np.float64))
    order = np.lexsort((np.asarray(ids), d))[:k]
    return [(int(ids[i]), float(d[i])) for i in order]


def mount(built, doorbell_max=8):
    """Fresh in-process region holding ``built``; returns (region, transport factory)."""
    region = register(built.region_size)
    cfg = TransportConfig(doorbell_max=doorbell_max)
    upload(connect(cfg, region, record=False), built)
    return region, lambda record=True: connect(cfg, region, record=record)


@pytest.fixture(scope="session")
def small_data():
    return synthetic_dataset(3000, 300, 16, blobs=16, seed=7, k=10)


@pytest.fixture(scope="session")
def small_index(small_data):
    return build_index(
        records_from_arrays(small_data.base),
        16,
        params=HnswParams(M=12, ef_construction=64, seed=7),
        seed=7,
    )


@pytest.fixture
def served_region():
    """A 1 MiB region behind a live TCP memory node."""
    from dhnsw.memory_node import MemoryServer

    region = register(1 << 20)
    server = MemoryServer(region, "127.0.0.1", 0)
    server.start()
    yield region, server.address
    server.shutdown()
    server.server_close()


# -- acceptance reporting ---------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    measured = "; ".join(v for k, v in item.user_properties if k == "measured")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA[(num, item.name)] = (num, title, status, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status, measured in sorted(_CRITERIA.values(), key=lambda r: (r[0], r[1])):
        line = f"criterion {num} {status}: {title}"
        terminalreporter.write_line(line + (f" [{measured}]" if measured else ""))
