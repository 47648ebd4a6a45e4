import pytest
import torch

from boxguide.boxnet import BoxNet, BoxNetConfig
from boxguide.toy_diffusion.shapes import ShapesDataset
from boxguide.toy_diffusion.stack import ToyStack


@pytest.fixture(scope="session")
def random_stack():
    """Untrained toy stack (random weights); enough for plumbing and exactness tests."""
    torch.manual_seed(0)
    stack = ToyStack()
    stack.trained = True  # allow decoding random weights
    return stack


@pytest.fixture(scope="session")
def random_boxnet(random_stack):
    torch.manual_seed(1)
    net = BoxNet(BoxNetConfig(feature_channels=tuple(random_stack.unet.feature_channels)))
    net.eval()
    return net


@pytest.fixture(scope="session")
def tiny_dataset():
    return ShapesDataset.generate(48, seed=3)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
