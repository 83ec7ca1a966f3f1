import os

# single-threaded BLAS: the models here use small matrices where thread
# fan-out costs more than it saves (must be set before numpy loads)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from raceimpute import synth


@pytest.fixture(scope="session")
def benchmark_independent():
    """Canonical desk-scale benchmark, independent mode, seed 42."""
    config = synth.benchmark_config(synth.INDEPENDENT, seed=42)
    return config, synth.generate(config)


@pytest.fixture(scope="session")
def benchmark_confounded():
    """Canonical desk-scale benchmark, SES-confounded mode, seed 42."""
    config = synth.benchmark_config(synth.SES_CONFOUNDED, seed=42)
    return config, synth.generate(config)


@pytest.fixture(scope="session")
def trained_benchmark_models(benchmark_confounded):
    """Name-only LSTM, LSTM+Geo, and the boosted-tree filter trained once on
    the seed-42 confounded benchmark; shared by property tests and the
    acceptance suite."""
    from raceimpute.pipeline import run_benchmark_pipeline

    config, dataset = benchmark_confounded
    return run_benchmark_pipeline(config, dataset, seed=42)
