import numpy as np
import pytest

from qdtlab import datagen
from qdtlab.datagen import TierSpec, Tier
from qdtlab.envsim import EnvConfig
from qdtlab.model import ModelConfig


def tiny_model(variant="quantum", **kw) -> ModelConfig:
    base = dict(d_model=8, n_layers=1, n_heads=2, context_len=3, t_max=1000, variant=variant)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def short_env():
    return EnvConfig(max_steps=40)


@pytest.fixture(scope="session")
def small_dataset(short_env):
    return datagen.collect(TierSpec(Tier.MEDIUM, 12, 0.3), short_env, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ----------------------------------------------------

CRITERIA: dict[tuple[int, str], tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record a numbered acceptance result; the summary lists every one."""
    def record(number: int, ok: bool, detail: str, label: str = ""):
        CRITERIA[(number, label)] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, label) in sorted(CRITERIA):
        ok, detail = CRITERIA[(n, label)]
        name = f"{n:>2}" + (f" [{label}]" if label else "")
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
