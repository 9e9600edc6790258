import numpy as np
import numpy.testing as npt
import pytest

from clustercon.network import random_clustered_network
from clustercon.spectral import (
    DimensionMismatch,
    NotConnected,
    NotSymmetric,
    consensus_projection,
    decompose,
    decomposition_to_csv,
    disagreement_coordinate,
)


def random_connected_laplacian(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random connected graph Laplacian: random spanning tree plus extra edges."""
    a = np.zeros((n, n))
    order = rng.permutation(n)
    for i in range(1, n):
        j = order[int(rng.integers(i))]
        a[order[i], j] = a[j, order[i]] = 1.0
    mask = rng.random((n, n)) < 0.3
    mask = np.triu(mask, 1)
    a = np.maximum(a, mask + mask.T)
    return np.diag(a.sum(axis=1)) - a


def residuals(lap):
    dec = decompose(lap)
    v = dec.range_basis
    n = lap.shape[0]
    return (
        np.linalg.norm(lap - dec.reconstruct()),
        np.linalg.norm(v.T @ v - np.eye(n - 1)),
        np.linalg.norm(dec.projector - v @ v.T),
    )


class TestDecompose:
    def test_k2_exact(self):
        lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
        dec = decompose(lap)
        npt.assert_allclose(dec.nonzero_eigenvalues, [2.0])
        npt.assert_allclose(np.abs(dec.range_basis[:, 0]), [1 / np.sqrt(2)] * 2)
        npt.assert_allclose(dec.projector, [[0.5, -0.5], [-0.5, 0.5]])
        # sign convention: first sizable entry positive
        assert dec.range_basis[0, 0] > 0

    def test_basis_orthogonal_to_agreement_direction(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            lap = random_connected_laplacian(int(rng.integers(2, 12)), rng)
            dec = decompose(lap)
            ones = np.ones(lap.shape[0])
            assert np.linalg.norm(dec.range_basis.T @ ones) <= 1e-10

    def test_identity_residuals_random_graphs(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            lap = random_connected_laplacian(int(rng.integers(2, 12)), rng)
            r1, r2, r3 = residuals(lap)
            assert max(r1, r2, r3) <= 1e-9

    def test_projector_commutes_with_laplacian(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            lap = random_connected_laplacian(8, rng)
            dec = decompose(lap)
            npt.assert_allclose(dec.projector @ lap, lap, atol=1e-12)
            npt.assert_allclose(lap @ dec.projector, lap, atol=1e-12)

    def test_repeated_eigenvalues_stay_orthonormal(self):
        # Complete graph: eigenvalue N with multiplicity N-1.
        n = 7
        lap = n * np.eye(n) - np.ones((n, n))
        r1, r2, r3 = residuals(lap)
        assert max(r1, r2, r3) <= 1e-9

    def test_not_symmetric(self):
        bad = np.array([[1.0, -1.0], [0.0, 1.0]])
        with pytest.raises(NotSymmetric):
            decompose(bad)

    def test_not_connected(self):
        lap = np.zeros((4, 4))
        lap[:2, :2] = [[1, -1], [-1, 1]]
        lap[2:, 2:] = [[1, -1], [-1, 1]]
        with pytest.raises(NotConnected):
            decompose(lap)

    def test_deterministic_output(self):
        lap = random_connected_laplacian(9, np.random.default_rng(8))
        a = decompose(lap)
        b = decompose(lap)
        npt.assert_array_equal(a.range_basis, b.range_basis)


class TestDisagreementCoordinate:
    def test_consensus_maps_to_zero(self):
        rng = np.random.default_rng(5)
        lap = random_connected_laplacian(6, rng)
        dec = decompose(lap)
        x = np.kron(np.ones(6), rng.normal(size=3))
        assert np.linalg.norm(disagreement_coordinate(x, dec, 3)) <= 1e-12

    def test_two_agent_example(self):
        dec = decompose(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        x = np.array([1.0, 3.0])
        assert np.linalg.norm(disagreement_coordinate(x, dec, 1)) == pytest.approx(np.sqrt(2))

    def test_norm_matches_projection_oracle(self):
        # The independent oracle applies (S kron I_n) directly.
        rng = np.random.default_rng(6)
        for _ in range(30):
            n_nodes = int(rng.integers(2, 8))
            block = int(rng.integers(1, 4))
            lap = random_connected_laplacian(n_nodes, rng)
            dec = decompose(lap)
            x = rng.normal(size=n_nodes * block)
            lhs = np.linalg.norm(disagreement_coordinate(x, dec, block))
            rhs = np.linalg.norm(consensus_projection(x, dec, block))
            assert abs(lhs - rhs) <= 1e-10

    def test_zero_iff_consensus(self):
        rng = np.random.default_rng(7)
        net = random_clustered_network(5, 2, 0.3, seed=1)
        dec = decompose(net.laplacian_matrix())
        x = rng.normal(size=5 * 3)
        assert np.linalg.norm(disagreement_coordinate(x, dec, 3)) > 1e-6
        blocks = x.reshape(5, 3)
        blocks[:] = blocks[0]
        assert np.linalg.norm(disagreement_coordinate(blocks.reshape(-1), dec, 3)) <= 1e-12

    def test_dimension_mismatch(self):
        dec = decompose(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        with pytest.raises(DimensionMismatch):
            disagreement_coordinate(np.zeros(5), dec, 2)

    def test_csv_dump(self, tmp_path):
        dec = decompose(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        path = tmp_path / "dec.csv"
        decomposition_to_csv(dec, path)
        assert path.read_text().startswith("eigenvalues,")
