import numpy as np
import pytest

from cxrpipe.data_ingest import load_images, split_dataset
from cxrpipe.toydata import generate_toy_dataset


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    records = generate_toy_dataset(out, 140, 64, seed=0)
    return out, records


@pytest.fixture(scope="session")
def toy_split(toy_dir):
    _, records = toy_dir
    return split_dataset(records, (300, 60, 60), seed=42)


@pytest.fixture(scope="session")
def toy_arrays(toy_dir, toy_split):
    """(train, val, test) arrays at 64x64 and 32x32."""
    root, records = toy_dir
    by_id = {r.id: r for r in records}

    def load(ids, size):
        return load_images([by_id[i] for i in ids], root, size)

    return {size: tuple(load(ids, size) for ids in (toy_split.train, toy_split.validation, toy_split.test))
            for size in (64, 32)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
