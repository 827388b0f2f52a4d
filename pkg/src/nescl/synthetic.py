"""Seeded synthetic datasets with planted user/item communities."""

from __future__ import annotations

import numpy as np

from .interactions import InteractionDataset


def block_dataset(num_users: int = 200, num_items: int = 300, communities: int = 5,
                  density: float = 0.05, in_community: float = 0.8,
                  test_fraction: float = 0.2, seed: int = 0) -> InteractionDataset:
    """Users and items split evenly into ``communities`` blocks.

    Every user interacts with ``round(density * num_items)`` distinct items,
    a fraction ``in_community`` of them drawn from the user's own block and
    the rest uniformly from the other blocks. Each user keeps at least one
    train item; ``test_fraction`` of the remainder is held out.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) % communities
    item_block = np.arange(num_items) % communities
    per_user = max(2, int(round(density * num_items)))
    n_in = int(round(in_community * per_user))

    train, test = [], []
    for u in range(num_users):
        own = np.flatnonzero(item_block == user_block[u])
        other = np.flatnonzero(item_block != user_block[u])
        k_in = min(n_in, len(own))
        k_out = min(per_user - k_in, len(other))
        items = np.concatenate([rng.choice(own, size=k_in, replace=False),
                                rng.choice(other, size=k_out, replace=False)])
        items = rng.permutation(items)
        n_test = min(len(items) - 1, int(round(test_fraction * len(items))))
        test.extend((u, int(i)) for i in items[:n_test])
        train.extend((u, int(i)) for i in items[n_test:])
    return InteractionDataset.from_pairs(num_users, num_items, train, test)
