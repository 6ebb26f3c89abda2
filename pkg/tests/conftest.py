"""Shared builders for small deterministic fixtures."""

import numpy as np
import pytest

from scenet.data import Item, ItemTable, Triplet, TripletSet


def build_items(n, f_dim, t_dim=None, seed=0, n_categories=3):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        text = rng.standard_normal(t_dim) if t_dim is not None else None
        items.append(
            Item(
                f"it{i:03d}",
                f"cat{i % n_categories}",
                rng.standard_normal(f_dim),
                text,
            )
        )
    return ItemTable(items)


def build_triplets(items, count, seed=0, conditions=None):
    """Random well-formed triplets over the table (ids distinct per record)."""
    rng = np.random.default_rng(seed)
    ids = items.ids
    records = []
    for i in range(count):
        a, p, n = rng.choice(len(ids), size=3, replace=False)
        cond = None if conditions is None else conditions[i % len(conditions)]
        records.append(Triplet(ids[a], ids[p], ids[n], cond))
    return TripletSet(records)


@pytest.fixture
def tiny_items():
    return build_items(12, f_dim=6, seed=3)


@pytest.fixture
def tiny_triplets(tiny_items):
    return build_triplets(tiny_items, 20, seed=4)
