import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

_VERDICTS: list[str] = []


def record_verdict(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    _VERDICTS.append(line)
    print(line)


@pytest.fixture
def verdict():
    return record_verdict


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run():
    """Tiny model overfit to one 64x64 texture patch at lambda 0.01 for 500 steps."""
    from shiftlic.imageio import procedural_texture
    from shiftlic.model import Model, ModelConfig
    from shiftlic.training import TrainConfig, train_loop

    patch = procedural_texture(64, 64, np.random.default_rng(0))
    model = Model(ModelConfig.tiny(), seed=0)
    cfg = TrainConfig.desk(steps=500, lmbda=0.01, seed=0)
    t = time.perf_counter()
    result = train_loop(model, patch, cfg)
    return {"model": model, "patch": patch, "result": result, "cfg": cfg,
            "seconds": time.perf_counter() - t}
