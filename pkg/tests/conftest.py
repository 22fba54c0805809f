import pytest
import torch

from hoiprompt import _kernels
from hoiprompt.config import config_from_dict
from hoiprompt.data import SynthSpec, generate_synthetic
from hoiprompt.foundation import MockFoundationProvider
from hoiprompt.model import HOIDetector, ModelConfig

import acceptance_log

torch.set_num_threads(1)


@pytest.fixture(params=sorted(_kernels.BACKENDS))
def kernels(request):
    return _kernels.BACKENDS[request.param]


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic(SynthSpec(num_objects=3, num_verbs=4, num_samples=8), seed=3)


@pytest.fixture(scope="session")
def provider():
    return MockFoundationProvider(seed=0)


def tiny_model_config(registry=None, **kw):
    base = dict(d_v=32, n_q=4, heads=4, ffn_dim=64, encoder_layers=1, decoder_layers=1,
                num_objects=registry.num_objects if registry else 3,
                num_verbs=registry.num_verbs if registry else 4)
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_config(**train):
    t = {"steps": 4, "batch_size": 2, "seed": 0, "checkpoint_every": 2, "lr": 2e-4}
    t.update(train)
    return config_from_dict({"model": {"d_v": 32, "n_q": 4, "heads": 4, "ffn_dim": 64, "encoder_layers": 1,
                                       "decoder_layers": 1}, "train": t})


@pytest.fixture
def tiny_model(synth):
    torch.manual_seed(0)
    return HOIDetector(tiny_model_config(synth[1]))


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
