import numpy as np
import pytest

from alice3d.config import configure_determinism, preset
from alice3d.model import init_model
from alice3d.trainer import make_view_bundle

configure_determinism()


def micro_setup(seed: int = 0, name: str = "gradcheck", **train_overrides):
    """Model state, config and one batch for the small gradient-check geometry."""
    import dataclasses

    cfg = preset(name)
    cfg.train = dataclasses.replace(cfg.train, seed=seed, **train_overrides)
    state = init_model(cfg.model, seed)
    bundle = make_view_bundle(cfg.data, cfg.train, step=1)
    return cfg, state, bundle


@pytest.fixture
def micro():
    return micro_setup(0)


def rng(seed):
    return np.random.default_rng(seed)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
