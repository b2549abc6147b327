import contextlib

import numpy as np
import pytest
from hypothesis import settings

from attnlens.models import Model, random_weights, toy_swin_config, toy_vit_config

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_CRITERIA = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vit_model():
    cfg = toy_vit_config()
    return Model(cfg, random_weights(cfg, 7))


@pytest.fixture(scope="session")
def swin_model():
    cfg = toy_swin_config()
    return Model(cfg, random_weights(cfg, 7))


def random_image(cfg, rng):
    return rng.random((cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the summary."""

    @contextlib.contextmanager
    def record(label):
        detail = {}
        try:
            yield detail
        except BaseException:
            _CRITERIA.append(f"FAIL  {label}  {detail.get('msg', '')}")
            raise
        _CRITERIA.append(f"PASS  {label}  {detail.get('msg', '')}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
