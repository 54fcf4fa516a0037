import pytest
import torch

from mmdit_guidance.toy_mmdit.dataset import DatasetConfig
from mmdit_guidance.toy_mmdit.model import ModelConfig, ToyMMDiT


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_blocks=12, heads=2, width=4, mlp_ratio=2, image_side=16, patch_size=4, vocab_a=13, vocab_b=41)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, dtype=torch.float32, **kw) -> ToyMMDiT:
    torch.manual_seed(seed)
    model = ToyMMDiT(tiny_config(**kw)).to(dtype)
    # adaLN-zero leaves the output head at zero; perturb so velocities are nontrivial
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return model.eval()


@pytest.fixture(scope="session")
def dataset_config():
    return DatasetConfig()


@pytest.fixture(scope="session")
def tokenizer(dataset_config):
    return dataset_config.tokenizer()


@pytest.fixture(scope="session")
def model():
    return tiny_model()


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])
