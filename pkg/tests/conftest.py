import numpy as np
import pytest

from clustercon.network import build_clustered_network, random_clustered_network


@pytest.fixture
def four_node_net():
    """Two 2-node clusters joined by a single cross edge."""
    return build_clustered_network(
        n_nodes=4,
        edges=[(1, 2), (3, 4), (2, 3)],
        partition=[{1, 2}, {3, 4}],
    )


@pytest.fixture
def k2_net():
    """Smallest clustered network: K2 with singleton clusters."""
    return build_clustered_network(2, [(1, 2)], [{1}, {2}])


@pytest.fixture
def toy_net():
    """Three-node path, two clusters, one inter-cluster (certificate toy)."""
    return build_clustered_network(3, [(1, 2), (2, 3)], [{1, 2}, {3}])


def random_nets(count: int, seed: int = 0, n_range=(4, 14)):
    """Deterministic stream of random clustered networks for property tests."""
    rng = np.random.default_rng(seed)
    nets = []
    for k in range(count):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(1, max(2, n // 2) + 1))
        prob = float(rng.uniform(0.0, 0.5))
        nets.append(random_clustered_network(n, m, prob, seed=1000 + k))
    return nets
