"""Shared fixtures: a small seeded model that decodes in well under a second."""

import sys

import numpy as np
import pytest

from d3tom.toymodel import ModelConfig, init_weights

SMALL = dict(vocab_size=64, d_model=32, d_ff=64, n_layers=4, n_heads=2, n_visual=40,
             n_prompt=6, n_output=8, n_steps=4, merge_layer=1, d_visual=16)


def small_config(**changes) -> ModelConfig:
    return ModelConfig(**{**SMALL, **changes})


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_weights(small_cfg):
    return init_weights(small_cfg)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
