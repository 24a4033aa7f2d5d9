"""Shared fixtures: small datasets, configs and a tiny block stack."""

import copy

import numpy as np
import pytest

from ffcl.data import SyntheticSpec, gen_synthetic, normalize
from ffcl.network import BlockSpec, build_model

SMALL_BLOCKS = [
    {"kind": "conv", "out": 4, "kernel": 3, "stride": 2},
    {"kind": "conv", "out": 8, "kernel": 3, "stride": 2},
    {"kind": "conv", "out": 8, "kernel": 3, "stride": 2},
]

# desk-scale training sanity scenario: sigma=0, 200/class, 32x32, 60/20/20
SANITY_CONFIG = {
    "model": {
        "blocks": [
            {"kind": "conv", "out": 8, "kernel": 3, "stride": 1},
            {"kind": "conv", "out": 16, "kernel": 3, "stride": 2},
            {"kind": "conv", "out": 32, "kernel": 3, "stride": 2},
            {"kind": "conv", "out": 64, "kernel": 3, "stride": 2},
        ],
        "input_shape": [1, 32, 32],
        "embedding": "gap",
    },
    "data": {
        "source": {"synthetic": {"n_per_class": 200, "size": 32, "noise": 0.0, "seed": 0}},
        "normalization": "zero_one",
        "split": {"train": 0.6, "val": 0.2, "test": 0.2, "seed": 0, "stratified": True},
    },
    "stages": {
        "local": {"epochs": 2, "batch_size": 10, "learning_rate": 1e-3},
        "global": {"epochs": 2, "batch_size": 10, "learning_rate": 1e-3},
        "finetune": {"epochs": 10, "batch_size": 10, "learning_rate": 1e-3},
    },
    "pipeline": {"mode": "LocalThenGlobal", "seed": 0},
}

# the same shape of experiment, shrunk so that end-to-end tests take well under a second per run
TINY_CONFIG = {
    "model": {"blocks": SMALL_BLOCKS, "input_shape": [1, 16, 16], "embedding": "gap"},
    "data": {
        "source": {"synthetic": {"n_per_class": 20, "size": 16, "stripe_period": 4.0, "seed": 3}},
        "normalization": "zero_one",
        "split": {"train": 0.6, "val": 0.2, "test": 0.2, "seed": 1},
    },
    "stages": {
        "local": {"epochs": 1, "batch_size": 8, "learning_rate": 1e-3},
        "global": {"epochs": 1, "batch_size": 8, "learning_rate": 1e-3},
        "finetune": {"epochs": 2, "batch_size": 8, "learning_rate": 1e-3},
    },
    "pipeline": {"mode": "LocalThenGlobal", "seed": 5},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def sanity_config():
    return copy.deepcopy(SANITY_CONFIG)


@pytest.fixture
def tiny_dataset():
    ds = gen_synthetic(SyntheticSpec(n_per_class=12, size=16, stripe_period=4.0, seed=2))
    return normalize(ds, "zero_one")


@pytest.fixture
def small_stack():
    return build_model([BlockSpec(**b) for b in SMALL_BLOCKS], (1, 16, 16), seed=11)


def write_yaml(path, cfg):
    import yaml

    path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return path
