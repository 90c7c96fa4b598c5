import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flame.devicesim import SimulatedDevice, make_device
from flame.layerfit import build_estimator_store
from flame.profiler import SamplingPlan, run_campaign

from synthetic import STANDARD_DEVICE_SEED, standard_dnn, standard_slm


@pytest.fixture(scope="session")
def standard_config():
    """Seed-7 device config: 29x11 grid, jitter 0.03."""
    return make_device(seed=STANDARD_DEVICE_SEED)


@pytest.fixture(scope="session")
def pure_config(standard_config):
    """Same device, measurement jitter off: the noiseless ground-truth law."""
    return replace(standard_config, jitter_sigma=0.0)


@pytest.fixture(scope="session")
def sparse_dnn_store(standard_config):
    """Estimators fitted from the sparse jittered plan on the standard DNN."""
    device = SimulatedDevice(standard_config)
    plan = SamplingPlan(cpu_stride=4, gpu_stride=4, iterations=400)
    dataset = run_campaign(
        device, standard_dnn().unique_configs(), device.grid, plan, np.random.default_rng(5)
    )
    return build_estimator_store(dataset)


@pytest.fixture(scope="session")
def sparse_slm_store(standard_config):
    """Estimators fitted from the sparse jittered plan on the standard SLM."""
    device = SimulatedDevice(standard_config)
    plan = SamplingPlan(
        cpu_stride=4, gpu_stride=4, context_stride=90, iterations=5, context_max=1024
    )
    dataset = run_campaign(
        device, standard_slm().unique_configs(), device.grid, plan, np.random.default_rng(6)
    )
    return build_estimator_store(dataset)
