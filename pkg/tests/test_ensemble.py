import numpy as np
import numpy.testing as npt
import pytest

from clustercon.ensemble import GainSet, Plant, build_ensemble
from clustercon.network import build_clustered_network
from clustercon.spectral import DimensionMismatch, disagreement_coordinate

from conftest import random_nets


def make_system(net, n=2, m=1, d=1, k_u_scale=0.7, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) * 0.5
    b = rng.normal(size=(n, d))
    h = rng.normal(size=(m, n))
    plant = Plant(A=a, B=b, H=h)
    gains = GainSet.homogeneous(
        k_u=k_u_scale * np.eye(d, m),
        k_eta=-0.8 * np.eye(m),
        k_zeta=-1.1 * np.eye(m),
        t1=0.1, t2=0.2, t3=0.1, t4=0.2,
        n_agents=net.n_nodes,
        n_inter=net.n_inter_clusters,
    )
    return build_ensemble(net, plant, gains)


def neighbor_sum_oracle(net, sys, x):
    """Per-agent consensus sums computed edge-by-edge, independent of any
    matrix products."""
    n, m = sys.plant.n, sys.plant.m
    xb = x.reshape(net.n_nodes, n)
    y = xb @ sys.plant.H.T
    intra = np.zeros((net.n_nodes, m))
    inter = np.zeros((net.n_inter_clusters, net.n_nodes, m))
    for p in range(1, net.n_nodes + 1):
        same, per_inter = net.partition_neighbors(p)
        for q in same:
            intra[p - 1] += y[q - 1] - y[p - 1]
        for r, nbrs in per_inter.items():
            for q in nbrs:
                inter[r - 1, p - 1] += y[q - 1] - y[p - 1]
    return intra, inter


class TestCouplingMatrices:
    def test_eta_coupling_matches_neighbor_sums(self, four_node_net):
        sys = make_system(four_node_net, seed=1)
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = rng.normal(size=4 * 2)
            x_dis = disagreement_coordinate(x, sys.decomposition, 2)
            intra, _ = neighbor_sum_oracle(four_node_net, sys, x)
            npt.assert_allclose(sys.coupling_eta @ x_dis, -intra.reshape(-1), atol=1e-10)

    def test_zeta_coupling_matches_neighbor_sums(self, four_node_net):
        sys = make_system(four_node_net, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.normal(size=4 * 2)
            x_dis = disagreement_coordinate(x, sys.decomposition, 2)
            _, inter = neighbor_sum_oracle(four_node_net, sys, x)
            npt.assert_allclose(sys.coupling_zeta @ x_dis, -inter.reshape(-1), atol=1e-10)

    def test_couplings_on_random_networks(self):
        for idx, net in enumerate(random_nets(8, seed=9)):
            sys = make_system(net, seed=idx)
            rng = np.random.default_rng(100 + idx)
            x = rng.normal(size=net.n_nodes * 2)
            x_dis = disagreement_coordinate(x, sys.decomposition, 2)
            intra, inter = neighbor_sum_oracle(net, sys, x)
            npt.assert_allclose(sys.coupling_eta @ x_dis, -intra.reshape(-1), atol=1e-9)
            if net.n_inter_clusters:
                npt.assert_allclose(sys.coupling_zeta @ x_dis, -inter.reshape(-1), atol=1e-9)

    def test_consensus_state_gives_zero(self, four_node_net):
        sys = make_system(four_node_net)
        x = np.kron(np.ones(4), np.array([1.3, -0.4]))
        x_dis = disagreement_coordinate(x, sys.decomposition, 2)
        npt.assert_allclose(sys.coupling_eta @ x_dis, 0.0, atol=1e-12)
        npt.assert_allclose(sys.coupling_zeta @ x_dis, 0.0, atol=1e-12)

    def test_nonmember_rows_are_zero(self, four_node_net):
        # agents 1 and 4 are outside the single inter-cluster {2, 3}
        sys = make_system(four_node_net)
        m = sys.plant.m
        block = sys.coupling_zeta_blocks[0]
        npt.assert_allclose(block[0:m, :], 0.0, atol=1e-14)
        npt.assert_allclose(block[3 * m:4 * m, :], 0.0, atol=1e-14)

    def test_agent_without_same_cluster_neighbors(self, k2_net):
        # singleton clusters: every row block of the eta coupling is zero
        sys = make_system(k2_net)
        npt.assert_allclose(sys.coupling_eta, 0.0, atol=1e-14)


class TestFlowMatrix:
    def test_zero_controller_gain(self, four_node_net):
        sys = make_system(four_node_net, k_u_scale=0.0)
        n = sys.plant.n
        npt.assert_allclose(sys.f11, np.kron(np.eye(3), sys.plant.A), atol=1e-14)
        npt.assert_allclose(sys.f12, 0.0, atol=1e-14)
        npt.assert_allclose(sys.f13, 0.0, atol=1e-14)

    def test_varrho_formula(self, four_node_net):
        sys = make_system(four_node_net)
        n, m = sys.plant.n, sys.plant.m
        expected = n * 3 + m * 4 + m * 4 * 1
        assert sys.varrho == expected
        assert sys.flow_matrix.shape == (expected, expected)

    def test_single_cluster_has_no_zeta_rows(self):
        net = build_clustered_network(3, [(1, 2), (2, 3)], [{1, 2, 3}])
        sys = make_system(net)
        n, m = sys.plant.n, sys.plant.m
        assert net.n_inter_clusters == 0
        assert sys.varrho == n * 2 + m * 3
        assert sys.flow_matrix.shape == (sys.varrho, sys.varrho)

    def test_reduced_flow_matches_projected_full_flow(self):
        # Master consistency check: differentiate the full coordinates, map
        # through (V^T kron I), C and I, and compare against F z.
        for idx, net in enumerate(random_nets(6, seed=21)):
            sys = make_system(net, seed=idx + 50)
            rng = np.random.default_rng(idx)
            N, n, m = net.n_nodes, sys.plant.n, sys.plant.m
            ms = net.n_inter_clusters
            x = rng.normal(size=N * n)
            eta = rng.normal(size=N * m)
            zeta = rng.normal(size=ms * N * m)
            z = sys.reduced_state(x, eta, zeta)

            xdot, etadot, zetadot = sys.full_flow(x, eta, zeta)
            xdis_dot = disagreement_coordinate(xdot, sys.decomposition, n)
            eta_err_dot = etadot + sys.coupling_eta @ xdis_dot
            if ms:
                zeta_err_dot = zetadot + sys.coupling_zeta @ xdis_dot
                direct = np.concatenate([xdis_dot, eta_err_dot, zeta_err_dot])
            else:
                direct = np.concatenate([xdis_dot, eta_err_dot])
            npt.assert_allclose(sys.flow_matrix @ z, direct, atol=1e-8)

    def test_estimator_error_formulations_agree(self):
        for idx, net in enumerate(random_nets(6, seed=31)):
            sys = make_system(net, seed=idx)
            rng = np.random.default_rng(idx + 7)
            N, n, m = net.n_nodes, sys.plant.n, sys.plant.m
            ms = net.n_inter_clusters
            x = rng.normal(size=N * n)
            eta = rng.normal(size=N * m)
            zeta = rng.normal(size=ms * N * m)
            eta_err, zeta_err = sys.estimator_errors(x, eta, zeta)
            z = sys.reduced_state(x, eta, zeta)
            _, eta_err2, zeta_err2 = sys.split_reduced(z)
            npt.assert_allclose(eta_err, eta_err2, atol=1e-10)
            npt.assert_allclose(zeta_err, zeta_err2, atol=1e-10)

    def test_full_flow_matches_laplacian_coupled_form(self, four_node_net):
        # xdot = ((I kron A) - (L kron B K_u H)) x
        #        + (I kron B K_u) eta_err + (I kron B K_u) sum_r zeta_err_r
        sys = make_system(four_node_net, seed=12)
        net = four_node_net
        rng = np.random.default_rng(13)
        N, n, m = 4, sys.plant.n, sys.plant.m
        x = rng.normal(size=N * n)
        eta = rng.normal(size=N * m)
        zeta = rng.normal(size=N * m)
        xdot, _, _ = sys.full_flow(x, eta, zeta)

        eta_err, zeta_err = sys.estimator_errors(x, eta, zeta)
        bku = sys.plant.B @ sys.gains.k_u
        lap = net.laplacian_matrix()
        coupled = (
            (np.kron(np.eye(N), sys.plant.A) - np.kron(lap, bku @ sys.plant.H)) @ x
            + np.kron(np.eye(N), bku) @ eta_err
            + np.kron(np.eye(N), bku) @ zeta_err
        )
        npt.assert_allclose(xdot, coupled, atol=1e-10)

    def test_consensus_with_zero_estimators(self, four_node_net):
        sys = make_system(four_node_net)
        x = np.kron(np.ones(4), np.array([0.3, 1.1]))
        eta = np.zeros(4 * sys.plant.m)
        zeta = np.zeros(4 * sys.plant.m)
        xdot, _, _ = sys.full_flow(x, eta, zeta)
        npt.assert_allclose(xdot, np.kron(np.eye(4), sys.plant.A) @ x, atol=1e-12)
        npt.assert_allclose(sys.controller(eta, zeta), 0.0, atol=1e-14)

    def test_two_agent_hand_assembled(self, k2_net):
        # scalar integrators: xdot_p = k_u * (eta_p + zeta_p)
        plant = Plant(A=[[0.0]], B=[[1.0]], H=[[1.0]])
        gains = GainSet.homogeneous(
            k_u=[[0.5]], k_eta=[[-1.0]], k_zeta=[[-2.0]],
            t1=0.1, t2=0.1, t3=0.1, t4=0.1, n_agents=2, n_inter=1,
        )
        sys = build_ensemble(k2_net, plant, gains)
        x = np.array([1.0, -2.0])
        eta = np.array([0.2, 0.4])
        zeta = np.array([0.6, -0.8])
        xdot, etadot, zetadot = sys.full_flow(x, eta, zeta)
        npt.assert_allclose(xdot, 0.5 * (eta + zeta))
        npt.assert_allclose(etadot, -1.0 * eta)
        npt.assert_allclose(zetadot, -2.0 * zeta)

    def test_mode_report(self, four_node_net):
        plant = Plant(A=[[0.0, 1.0], [0.0, -1.0]], B=[[0.0], [1.0]], H=[[1.0, 0.0]])
        gains = GainSet.homogeneous(
            k_u=[[0.8]], k_eta=[[-1.0]], k_zeta=[[-1.0]],
            t1=0.1, t2=0.2, t3=0.1, t4=0.2, n_agents=4, n_inter=1,
        )
        sys = build_ensemble(four_node_net, plant, gains)
        report = sys.coupling_mode_report()
        assert len(report) == 3
        all_stable = all(entry["stable"] for entry in report)
        f11_stable = np.max(np.linalg.eigvals(sys.f11).real) < 0
        assert all_stable == f11_stable

    def test_dimension_validation(self, four_node_net):
        plant = Plant(A=np.zeros((2, 2)), B=np.ones((2, 1)), H=np.ones((1, 2)))
        with pytest.raises(DimensionMismatch):
            gains = GainSet.homogeneous(
                k_u=np.ones((2, 2)), k_eta=-np.eye(1), k_zeta=-np.eye(1),
                t1=0.1, t2=0.2, t3=0.1, t4=0.2, n_agents=4, n_inter=1,
            )
            build_ensemble(four_node_net, plant, gains)

    def test_controllability_observability_ranks(self):
        plant = Plant(
            A=[[0, 0, 1, 0], [0, 0, 0, 1], [0, 0, -2.66, 0], [0, 0, 0, -2.66]],
            B=[[0, 0], [0, 0], [1, 0], [0, 1]],
            H=[[1, 0, 0, 0], [0, 1, 0, 0]],
        )
        assert plant.controllability_rank() == 4
        assert plant.observability_rank() == 4
