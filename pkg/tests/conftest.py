import numpy as np
import pytest

from delaytomo.delay_model import DelayDistribution, DelaySupport, LinkParams
from delaytomo.topology import TreeTopology, regular_tree


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def four_leaf_tree():
    """Root 0 -> 1 -> {2, 3} -> leaves {4, 5, 6, 7}."""
    return regular_tree(2, 2)


@pytest.fixture
def single_link_tree():
    return TreeTopology(labels=("S", "L"), fathers=(None, 0), hop_counts=(None, 1))


@pytest.fixture
def two_link_chain():
    return TreeTopology(labels=("S", "a", "L"), fathers=(None, 0, 1), hop_counts=(None, 1, 1))


def random_params(tree, support, rng, max_loss=0.3):
    """Unstructured random normalized link distributions for oracle tests."""
    dists = {}
    for i in tree.link_ids:
        mass = rng.random(support.bin_count) + 1e-3
        loss = rng.random() * max_loss
        mass *= (1.0 - loss) / mass.sum()
        dists[i] = DelayDistribution(support, mass, loss)
    return LinkParams(support, dists)
