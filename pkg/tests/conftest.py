import numpy as np
import pytest
import torch

from dynsubnet.model import GroundingModel
from dynsubnet.supernet import SupernetConfig

torch.set_num_threads(1)


def randomize_norms(module, seed=0):
    """Give every batch-norm non-trivial running statistics and affine params."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, buf in module.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.randn(buf.shape, generator=g, dtype=buf.dtype) * 0.1)
            elif name.endswith("running_var"):
                buf.copy_(torch.rand(buf.shape, generator=g, dtype=buf.dtype) + 0.5)
        for name, p in module.named_parameters():
            if "bn" in name or "norm" in name:
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    return module


@pytest.fixture(scope="session")
def cfg():
    return SupernetConfig()


@pytest.fixture
def model64(cfg):
    torch.manual_seed(0)
    return randomize_norms(GroundingModel(cfg)).double().eval()


@pytest.fixture
def batch(cfg):
    g = torch.Generator().manual_seed(5)
    b = 3
    image = torch.rand(b, 3, cfg.image_size, cfg.image_size, generator=g, dtype=torch.float64)
    ids = torch.randint(3, 18, (b, 7), generator=g)
    ids[:, 0] = 1
    mask = torch.ones(b, 7, dtype=torch.bool)
    mask[1, 5:] = False
    ids[1, 5:] = 0
    return image, ids, mask


def random_binary(cfg, rows, p, rng):
    layer = (rng.random((rows, cfg.num_layer_gates)) < p).astype(np.float64)
    filt = (rng.random((rows, cfg.num_filter_gates)) < p).astype(np.float64)
    return torch.from_numpy(layer), torch.from_numpy(filt)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
