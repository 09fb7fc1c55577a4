import json
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from lab.density import BumpComponent, DensitySpec, realize_density
from lab.fpe_solver import SolverConfig
from lab.grid import build_grid

GOLDEN_MANIFEST = Path(__file__).resolve().parent / "golden_manifest.json"


@pytest.fixture(scope="session")
def golden():
    return json.loads(GOLDEN_MANIFEST.read_text(encoding="utf-8"))


@pytest.fixture
def grid_1d():
    return build_grid(1, [64])


@pytest.fixture
def grid_2d():
    return build_grid(2, [16, 16])


@pytest.fixture
def solver_cfg():
    return SolverConfig()


@pytest.fixture
def bump_spec():
    return DensitySpec(
        family="bump_mixture",
        components=[
            BumpComponent(center=[0.3], width=0.25, weight=1.0),
            BumpComponent(center=[0.72], width=0.2, weight=0.6),
        ],
        floor_fraction=0.1,
    )


@pytest.fixture
def bump_density(bump_spec, grid_1d):
    return realize_density(bump_spec, grid_1d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def log_messages():
    """收集 loguru 输出，(级别, 消息) 列表"""
    messages = []
    handler_id = logger.add(lambda m: messages.append((m.record["level"].name, m.record["message"])), level="DEBUG")
    yield messages
    logger.remove(handler_id)
