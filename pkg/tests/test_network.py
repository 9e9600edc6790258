import json

import numpy as np
import numpy.testing as npt
import pytest

from clustercon.network import (
    BadPartition,
    DisconnectedCluster,
    DisconnectedParent,
    EmptySet,
    InfeasibleRequest,
    SelfEdge,
    UnknownNode,
    build_clustered_network,
    load_network,
    network_from_dict,
    random_clustered_network,
)

from conftest import random_nets


class TestBuild:
    def test_four_node_example(self, four_node_net):
        net = four_node_net
        assert net.n_clusters == 2
        assert net.n_inter_clusters == 1
        ic = net.inter_clusters[0]
        assert ic.nodes == frozenset({2, 3})
        assert ic.edges == frozenset({(2, 3)})
        assert ic.clusters == (1, 2)

    def test_k2_smallest_inter_cluster(self, k2_net):
        assert k2_net.n_clusters == 2
        assert k2_net.n_inter_clusters == 1
        assert k2_net.inter_clusters[0].nodes == frozenset({1, 2})

    def test_disconnected_parent(self):
        with pytest.raises(DisconnectedParent):
            build_clustered_network(3, [(1, 2)], [{1, 2}, {3}])

    def test_disconnected_cluster_names_cluster(self):
        # cluster 2 = {3, 5} has no internal edge
        with pytest.raises(DisconnectedCluster) as err:
            build_clustered_network(
                5, [(1, 2), (2, 3), (3, 4), (4, 5)], [{1, 2}, {3, 5}, {4}]
            )
        assert err.value.cluster == 2

    def test_bad_partition_overlap(self):
        with pytest.raises(BadPartition):
            build_clustered_network(3, [(1, 2), (2, 3)], [{1, 2}, {2, 3}])

    def test_bad_partition_gap(self):
        with pytest.raises(BadPartition):
            build_clustered_network(3, [(1, 2), (2, 3)], [{1, 2}])

    def test_self_edge(self):
        with pytest.raises(SelfEdge):
            build_clustered_network(2, [(1, 1), (1, 2)], [{1}, {2}])

    def test_node_out_of_range(self):
        with pytest.raises(UnknownNode):
            build_clustered_network(2, [(1, 7)], [{1}, {2}])

    def test_multiple_inter_clusters(self):
        # 1-2 | 3-4 | 5-6 chained: pairs (1,2) and (2,3) realized, (1,3) not
        net = build_clustered_network(
            6,
            [(1, 2), (3, 4), (5, 6), (2, 3), (4, 5)],
            [{1, 2}, {3, 4}, {5, 6}],
        )
        assert net.n_inter_clusters == 2
        pairs = {ic.clusters for ic in net.inter_clusters}
        assert pairs == {(1, 2), (2, 3)}


class TestAugmentedMatrices:
    def test_cluster_laplacian_block(self, four_node_net):
        lap = four_node_net.augmented_laplacian({1, 2}).matrix
        expected = np.zeros((4, 4))
        expected[0, 0] = expected[1, 1] = 1.0
        expected[0, 1] = expected[1, 0] = -1.0
        npt.assert_allclose(lap, expected)

    def test_inter_cluster_uses_cross_edges_only(self, four_node_net):
        lap = four_node_net.augmented_laplacian(frozenset({2, 3})).matrix
        expected = np.zeros((4, 4))
        expected[1, 1] = expected[2, 2] = 1.0
        expected[1, 2] = expected[2, 1] = -1.0
        npt.assert_allclose(lap, expected)

    def test_set_with_no_internal_edges_gives_zero(self, four_node_net):
        lap = four_node_net.augmented_laplacian({1, 4}).matrix
        npt.assert_allclose(lap, np.zeros((4, 4)))

    def test_empty_set_rejected(self, four_node_net):
        with pytest.raises(EmptySet):
            four_node_net.augmented_laplacian(frozenset())

    def test_augmented_laplacians_sum_to_parent(self):
        # Edge sets of clusters and inter-clusters tile E, so the augmented
        # Laplacians add up to the parent Laplacian.
        for net in random_nets(12, seed=3):
            total = np.zeros((net.n_nodes, net.n_nodes))
            for k in range(1, net.n_clusters + 1):
                total += net.cluster_laplacian(k)
            for r in range(1, net.n_inter_clusters + 1):
                total += net.inter_cluster_laplacian(r)
            npt.assert_allclose(total, net.laplacian_matrix(), atol=1e-12)

    def test_augmented_laplacian_psd_zero_row_sums(self):
        for net in random_nets(8, seed=4):
            for r in range(1, net.n_inter_clusters + 1):
                lap = net.inter_cluster_laplacian(r)
                npt.assert_allclose(lap, lap.T)
                npt.assert_allclose(lap.sum(axis=1), 0.0, atol=1e-12)
                assert np.linalg.eigvalsh(lap).min() > -1e-12


class TestPartitionNeighbors:
    def test_four_node_cases(self, four_node_net):
        same, inter = four_node_net.partition_neighbors(2)
        assert same == frozenset({1})
        assert inter == {1: frozenset({3})}

        same, inter = four_node_net.partition_neighbors(1)
        assert same == frozenset({2})
        assert inter == {1: frozenset()}

        same, inter = four_node_net.partition_neighbors(3)
        assert same == frozenset({4})
        assert inter == {1: frozenset({2})}

    def test_unknown_node(self, four_node_net):
        with pytest.raises(UnknownNode):
            four_node_net.partition_neighbors(9)

    def test_partition_identity_on_random_networks(self):
        # The pieces are pairwise disjoint and union exactly to N_p.
        for net in random_nets(12, seed=5):
            for p in range(1, net.n_nodes + 1):
                same, inter = net.partition_neighbors(p)
                pieces = [same] + list(inter.values())
                union = set()
                total = 0
                for piece in pieces:
                    union |= piece
                    total += len(piece)
                assert len(union) == total, "neighbor pieces overlap"
                assert union == set(net.neighbors(p))


class TestRandomGenerator:
    def test_invariants_hold(self):
        # build_clustered_network re-validates everything, so construction
        # succeeding is the oracle here; spot-check the counts too.
        net = random_clustered_network(14, 5, 0.1, seed=1)
        assert net.n_nodes == 14
        assert net.n_clusters == 5

    def test_k2_unique(self):
        net = random_clustered_network(2, 2, 0.0, seed=7)
        assert net.edges == frozenset({(1, 2)})

    def test_deterministic(self):
        a = random_clustered_network(10, 3, 0.25, seed=42)
        b = random_clustered_network(10, 3, 0.25, seed=42)
        assert a.edges == b.edges
        assert a.partition == b.partition

    def test_infeasible(self):
        with pytest.raises(InfeasibleRequest):
            random_clustered_network(3, 4, 0.0, seed=0)


class TestSerialization:
    def test_dict_roundtrip(self, four_node_net):
        data = four_node_net.to_dict()
        again = network_from_dict(data)
        assert again.edges == four_node_net.edges
        assert again.partition == four_node_net.partition

    def test_load_from_file(self, four_node_net, tmp_path):
        path = tmp_path / "net.json"
        path.write_text(json.dumps(four_node_net.to_dict()))
        net = load_network(path)
        assert net.edges == four_node_net.edges

    def test_adjacency_text(self, four_node_net):
        text = four_node_net.to_adjacency_text()
        assert text.splitlines()[0] == "1: 2"
        assert text.splitlines()[1] == "2: 1 3"
