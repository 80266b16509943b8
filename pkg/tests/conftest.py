from __future__ import annotations

import numpy as np
import pytest

from cvln.navsim import GenParams, Scene, generate_benchmark
from cvln.policy import PolicyConfig, init_params

SMALL = GenParams(num_domains=3, num_scenes=2, nodes_per_scene=10, train_episodes=12, val_episodes=6,
                  landmarks_per_domain=10, max_steps=6)


def chain_scene(n: int = 3, spacing: float = 1.0, feature_dim: int = 4) -> Scene:
    """Straight chain 0-1-...-(n-1) along the x axis."""
    pos = np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)
    adj = [[j for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)]
    return Scene(0, pos, np.zeros((n, feature_dim)), np.arange(n) + 12, adj)


@pytest.fixture(scope="session")
def small_benchmark():
    return generate_benchmark(3, "I", SMALL)


@pytest.fixture(scope="session")
def small_policy():
    cfg = PolicyConfig(vocab_size=SMALL.vocab_size, feature_dim=SMALL.feature_dim,
                       max_degree=SMALL.max_degree)
    return init_params(cfg, np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
