"""Desk-scale run presets.

Each family fixes a parameter budget through its e=1 block and picks, for
e = 2..4, the per-branch (depth, growth) whose total count lands closest to
that budget (counted for 4 classes on 3x16x16 inputs). ``small-dense``
variants stay within 10% of the budget; ``tiny-dense`` is too small for that
at every e (L=10 is the shallowest DenseNet-BC), so its variants are nearest
matches only.
"""

from __future__ import annotations

import copy

_BLOCKS = {
    "tiny-dense": {1: (10, 4), 2: (34, 1), 3: (10, 2), 4: (22, 1)},
    "small-dense": {1: (22, 6), 2: (10, 8), 3: (40, 2), 4: (22, 3)},
}

_DATASET = {
    "kind": "synthetic",
    "n_train": 320,
    "n_test": 160,
    "classes": 4,
    "size": 16,
    "difficulty": "medium",
    "seed": 0,
}

_TRAINING = {
    "epochs": 20,
    "minibatch": 32,
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "milestones": [0.5, 0.75],
    "decay": 0.1,
    "last_k": 5,
    "augment": True,
}


def _make(family: str, e: int) -> dict:
    depth, growth = _BLOCKS[family][e]
    return {
        "dataset": dict(_DATASET),
        "model": {"family": "densenet_bc", "depth": depth, "growth": growth},
        "branches": e,
        "train_fuse": "sm",
        "predict_fuse": "fc",
        "training": dict(_TRAINING),
    }


PRESETS = {f"{family}-e{e}": _make(family, e) for family in _BLOCKS for e in range(1, 5)}


def get_preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
