import numpy as np
import pytest

import sparseconv as sc


@pytest.fixture(scope="session")
def resnet_graph():
    return sc.resnet18_shape(seed=0)


@pytest.fixture(scope="session")
def resnet_bench_records(resnet_graph):
    """One shared benchmark run; several tests read different rows from it.

    End-to-end rows get extra samples: they feed the speedup assertions,
    and this sandbox's wall clock is noisy enough that ratio medians need
    the larger sample to stabilize.
    """
    return sc.bench_model(
        resnet_graph,
        [0.0, 0.1, 0.2, 0.3, 0.5],
        repeats=24,
        warmup=3,
        seed=0,
        model_name="resnet18-shape",
        e2e_repeats=64,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
