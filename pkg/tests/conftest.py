"""Shared fixtures: a desk-scale experiment config that runs in seconds"""

import copy
import json

import pytest

TINY_CONFIG = {
    "task_space": {
        "env_family": "simple_spread",
        "populations": [2, 4],
        "max_steps": 5,
        "target_population": 2,
    },
    "env": {},
    "teacher": {
        "mode": "spc",
        "alpha": 0.1,
        "max_clusters": 2,
        "rebuild_every": 5,
        "buffer_capacity": 32,
        "train_episodes": 2,
        "eval_episodes": 2,
    },
    "imitation": {
        "hidden_dim": 4,
        "epochs": 1,
        "learning_rate": 0.01,
        "batch_size": 8,
        "buffer_transitions": 200,
        "context_trajectories": 4,
    },
    "student": {"message_dim": 8, "skill_dim": 2, "interval": 2, "hidden": 8},
    "trainer": {"sgd_iterations": 1, "min_minibatch": 8},
    "run": {"rounds": 2, "seed": 0, "checkpoint_every": 0, "workers": 1},
}


@pytest.fixture
def tiny_config_dict():
    """Fresh copy of the tiny config document"""
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_dict):
    """The tiny config written to a JSON file"""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict), encoding="utf-8")
    return path
