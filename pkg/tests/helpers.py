"""Shared test utilities: independent oracles and parameter-tree tools.

The oracles here deliberately avoid the library's own code paths: the
pairwise AUC counts every pair, and gradient checks go through central
finite differences of the public log-density.
"""

from __future__ import annotations

import numpy as np

from vsde.density import ARModelParams


def pairwise_auc(scores, labels) -> float:
    """O(N^2) Mann-Whitney statistic: wins + half-ties over all
    (anomaly, normal) pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def tree_flatten(tree: list[dict]) -> tuple[np.ndarray, list]:
    """Flatten a list-of-dicts parameter tree into one vector plus the
    spec needed to rebuild it."""
    parts, spec = [], []
    for i, block in enumerate(tree):
        for key in sorted(block):
            parts.append(np.asarray(block[key], dtype=float).ravel())
            spec.append((i, key, block[key].shape))
    return np.concatenate(parts), spec


def tree_unflatten(vec: np.ndarray, spec: list) -> list[dict]:
    tree: list[dict] = []
    offset = 0
    current = -1
    for i, key, shape in spec:
        size = int(np.prod(shape))
        if i != current:
            tree.append({})
            current = i
        tree[-1][key] = vec[offset : offset + size].reshape(shape)
        offset += size
    return tree


def rebuild_model(model: ARModelParams, vec: np.ndarray, spec: list) -> ARModelParams:
    """The same model with its parameters replaced by a flat vector."""
    return ARModelParams(
        tree_unflatten(vec, spec),
        model.pnn,
        model.permutation,
        model.conditioner_widths,
        model.dropout,
    )


def model_param_vector(model: ARModelParams) -> tuple[np.ndarray, list]:
    return tree_flatten(model.conditioners)
