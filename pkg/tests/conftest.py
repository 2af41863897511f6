from dataclasses import replace

import pytest
import torch

from thermal_workbench.models import ModelConfig, NormStats, PiModNn
from thermal_workbench.plant import PlantParams, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs that train models")


@pytest.fixture
def tiny_config():
    return ModelConfig(dims_fnna=(1, 4, 1), dims_fnnb=(1, 3, 1), dims_fnne=(6, 4, 1),
                       encoder_len=8, decoder_len=4, window_len=3, baseline_hidden=4)


@pytest.fixture(scope="session")
def plant_frame():
    """Three days of noisy telemetry from the default plant."""
    return generate_dataset(PlantParams(), days=3, seed=0)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def constrained_model(tiny_config, plant_frame):
    torch.manual_seed(0)
    model = PiModNn(tiny_config)
    model.set_stats(NormStats.from_frame(plant_frame))
    return model


@pytest.fixture
def adversarial_model(tiny_config):
    """Unconstrained time stepper whose response to more heating is cooling."""
    model = PiModNn(replace(tiny_config, hard_constraints=False))
    with torch.no_grad():
        for p in model.fnne.parameters():
            p.zero_()
        model.fnnb.layers[0].weight.fill_(1.0)
        model.fnnb.layers[0].bias.fill_(10.0)
        model.fnnb.layers[1].weight.fill_(-1.0)
        model.fnnb.layers[1].bias.fill_(30.0)
        model.fnna.layers[0].weight.fill_(1.0)
        model.fnna.layers[0].bias.fill_(10.0)
        model.fnna.layers[1].weight.fill_(0.01)
        model.fnna.layers[1].bias.fill_(0.0)
    return model
