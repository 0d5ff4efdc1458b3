import pytest
import torch

from ctrlora.controlnet import init_base_controlnet
from ctrlora.diffusion import make_linear_schedule
from ctrlora.unet import UNet, UNetConfig

TINY = dict(in_channels=2, base_channels=2, channel_multipliers=[1, 2], attention_levels=[1], num_classes=2,
            time_embed_dim=4, head_dim=2)
SMALL = dict(in_channels=4, base_channels=8, channel_multipliers=[1, 2], attention_levels=[1], num_classes=4,
             time_embed_dim=16, head_dim=4)


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with seeded noise (zero-inits included) so paths are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return module


def frozen_unet(cfg: dict, seed: int = 0, dtype=torch.float32) -> UNet:
    torch.manual_seed(seed)
    unet = UNet(UNetConfig(**cfg)).to(dtype)
    unet.eval()
    for p in unet.parameters():
        p.requires_grad_(False)
    return unet


@pytest.fixture
def sched():
    return make_linear_schedule()


@pytest.fixture
def small_unet():
    return frozen_unet(SMALL)


@pytest.fixture
def small_cn(small_unet):
    return init_base_controlnet(small_unet)


@pytest.fixture
def tiny_unet64():
    return frozen_unet(TINY, dtype=torch.float64)


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
