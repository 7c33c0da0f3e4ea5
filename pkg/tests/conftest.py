"""Shared fixtures: the default-scenario dataset and a training-run cache.

The heavy acceptance criteria (event recovery, rank sweep, ablations, the
baseline comparison) share full 150-epoch runs; training each configuration
once per session keeps the suite inside its runtime budgets.
"""

import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pila import gnssdata, trainer


def default_train_config(**overrides):
    config = trainer.TrainConfig(seed=0)
    return replace(config, **overrides) if overrides else config


RUN_CONFIGS = {
    "pila-r1": lambda: default_train_config(rank=1),
    "pila-r4": lambda: default_train_config(rank=4),
    "pila-r8": lambda: default_train_config(rank=8),
    "no-residual": lambda: trainer.config_for_axis(
        default_train_config(), "ablation", "no-residual"),
    "no-prior": lambda: trainer.config_for_axis(
        default_train_config(), "ablation", "no-prior"),
    "hvae": lambda: default_train_config(model_kind="hvae"),
}


@pytest.fixture(scope="session")
def default_dataset():
    return gnssdata.generate(gnssdata.default_scenario())


class RunCache:
    def __init__(self, dataset):
        self.dataset = dataset
        self._results = {}

    def get(self, name):
        if name not in self._results:
            config = RUN_CONFIGS[name]()
            result = trainer.train(self.dataset, config)
            evaluation = trainer.evaluate(result.checkpoint, self.dataset)
            self._results[name] = (result, evaluation)
        return self._results[name]


@pytest.fixture(scope="session")
def run_cache(default_dataset):
    return RunCache(default_dataset)
