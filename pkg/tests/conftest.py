import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modmoe.components import Batch  # noqa: E402
from modmoe.config import ModelConfig, RoutingConfig  # noqa: E402

SMALL_DIMS = (5, 4, 3, 6)


def small_model_cfg(**kw):
    base = dict(feature_dims=SMALL_DIMS, model_dim=8, encoder_hidden=6, heads=2, head_hidden=5)
    base.update(kw)
    return ModelConfig(**base)


def small_routing_cfg(**kw):
    base = dict(experts=16, top_k=2, expert_hidden=6)
    base.update(kw)
    return RoutingConfig(**base)


def random_batch(rng, n, availability=None, dims=SMALL_DIMS):
    if availability is None:
        availability = rng.integers(1, 16, size=n)
    availability = np.asarray(availability, dtype=np.int64)
    feats = [rng.normal(size=(len(availability), d)) for d in dims]
    for i, f in enumerate(feats):
        f[(availability >> i) & 1 == 0] = 0.0
    return Batch(feats, availability, rng.uniform(1.5, 18.0, size=len(availability)),
                 rng.normal(size=len(availability)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
