import numpy as np
import pytest

from vesca.encoder import Encoder, EncoderSpec, init_params
from vesca.numerics import RngState

SMALL_SPEC = EncoderSpec(image_side=8, patch_side=2, embed_dim=8, num_blocks=1, mlp_ratio=2,
                         adapter_dim=4)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def small_encoder():
    return Encoder(SMALL_SPEC, init_params(SMALL_SPEC, RngState(11)))


@pytest.fixture
def small_image():
    return RngState(12).uniform(SMALL_SPEC.image_shape, 0.1, 0.9)


@pytest.fixture
def default_encoder():
    spec = EncoderSpec()
    return Encoder(spec, init_params(spec, RngState(3)))


def random_image(shape, seed, low=0.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, size=shape)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> one-line verdict, printed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
