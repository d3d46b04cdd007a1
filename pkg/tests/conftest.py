import numpy as np
import pytest

from ltof import harness


def tiny_portfolio_cfg(**overrides):
    """Small, fast portfolio cell config for unit tests (seconds, not minutes)."""
    cfg = harness.desk_config("portfolio")
    cfg.update({
        "n_assets": 5, "num_factors": 2, "n_samples": 240, "feature_dim": 8,
        "hidden_width": 24, "epochs": 30, "batch_size": 64, "patience": 10,
        "two_stage_layers": [1, 2], "proxy_epochs": 30,
    })
    cfg.update(overrides)
    return cfg


def tiny_nonconvex_cfg(**overrides):
    cfg = harness.desk_config("nonconvex")
    cfg.update({
        "n_var": 6, "n_eq": 3, "n_ineq": 3, "n_samples": 200, "feature_dim": 10,
        "hidden_width": 24, "epochs": 30, "batch_size": 64, "patience": 10,
        "oracle_restarts": 4, "two_stage_layers": [1, 2], "proxy_epochs": 30,
    })
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def tiny_portfolio_dataset():
    cfg = tiny_portfolio_cfg()
    problem, ds = harness.build_dataset(cfg, 1)
    return cfg, problem, ds


@pytest.fixture(scope="session")
def tiny_nonconvex_dataset():
    cfg = tiny_nonconvex_cfg()
    problem, ds = harness.build_dataset(cfg, 1)
    return cfg, problem, ds


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
