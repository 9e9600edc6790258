"""Spectral splitting of a connected-graph Laplacian into its agreement and
disagreement parts.

For a connected undirected graph the Laplacian L admits an orthonormal basis
of its range completing v1 = (1/sqrt(N)) 1_N, collected column-wise into the
N x (N-1) matrix V with L = V diag(lambda_2..lambda_N) V^T, V^T V = I, and
V V^T = S where S = I - 11^T/N is the projector onto the orthogonal
complement of the agreement subspace span{1_N}.  The reduced coordinate
x_dis = (V^T kron I_n) x has the same norm as the projected state
(S kron I_n) x, so ||x_dis|| measures the distance of a stacked agent state
to consensus and vanishes exactly on it.

Stacked vectors follow row-major block convention throughout: a vector of N
blocks of size n is the C-order flattening of the (N, n) array of blocks,
under which (A kron I_n) x = vec(A X) for X the (N, n) block matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONNECTIVITY_TOL = 1e-8
EIGENVALUE_CLUSTER_TOL = 1e-8


class SpectralError(ValueError):
    pass


class NotSymmetric(SpectralError):
    pass


class NotConnected(SpectralError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SpectralDecomposition:
    """Orthonormal range basis of a connected-graph Laplacian.

    range_basis:        V, N x (N-1), orthonormal columns spanning range(L)
    nonzero_eigenvalues: diagonal of D, ascending, all > 0
    eigenvalues:        all N Laplacian eigenvalues ascending (first is 0)
    projector:          S = I - 11^T/N, exact by construction
    """

    range_basis: np.ndarray
    nonzero_eigenvalues: np.ndarray
    eigenvalues: np.ndarray
    projector: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.range_basis.shape[0]

    @property
    def gain_matrix(self) -> np.ndarray:
        """D = diag(lambda_2, ..., lambda_N)."""
        return np.diag(self.nonzero_eigenvalues)

    @property
    def algebraic_connectivity(self) -> float:
        return float(self.nonzero_eigenvalues[0])

    def reconstruct(self) -> np.ndarray:
        """V D V^T, equal to the decomposed Laplacian up to tolerance."""
        return self.range_basis @ self.gain_matrix @ self.range_basis.T


def decompose(laplacian: np.ndarray, *, tol: float = 1e-9) -> SpectralDecomposition:
    """Orthonormal range-basis decomposition of a connected-graph Laplacian.

    Eigenvectors are ordered by ascending eigenvalue with a deterministic
    sign convention (first entry of magnitude above threshold made positive),
    and re-orthonormalized within eigenvalue clusters so repeated eigenvalues
    stay numerically orthonormal.  Raises NotSymmetric / NotConnected.
    """
    laplacian = np.asarray(laplacian, dtype=float)
    if laplacian.ndim != 2 or laplacian.shape[0] != laplacian.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got {laplacian.shape}")
    n = laplacian.shape[0]
    scale = max(1.0, float(np.abs(laplacian).max()))
    if np.abs(laplacian - laplacian.T).max() > tol * scale:
        raise NotSymmetric("Laplacian is not symmetric")

    values, vectors = np.linalg.eigh(laplacian)
    if values[1] <= CONNECTIVITY_TOL:
        raise NotConnected(
            f"second-smallest Laplacian eigenvalue {values[1]:.3e} below threshold; graph disconnected"
        )

    basis = vectors[:, 1:].copy()
    nonzero = values[1:].copy()

    # The zero eigenvector is 1/sqrt(N) up to roundoff; enforce exact
    # orthogonality of the remaining columns to the agreement direction.
    ones = np.ones(n) / np.sqrt(n)
    basis -= np.outer(ones, ones @ basis)

    # Re-orthonormalize inside clusters of (numerically) equal eigenvalues.
    start = 0
    for stop in range(1, n):
        at_boundary = (
            stop == n - 1
            or nonzero[stop] - nonzero[stop - 1] > EIGENVALUE_CLUSTER_TOL * max(1.0, nonzero[stop])
        )
        if at_boundary:
            end = n - 1 if stop == n - 1 else stop
            q, _ = np.linalg.qr(basis[:, start:end])
            basis[:, start:end] = q
            start = stop

    for k in range(basis.shape[1]):
        col = basis[:, k]
        idx = np.argmax(np.abs(col) > 1e-12)
        if col[idx] < 0:
            basis[:, k] = -col

    projector = np.eye(n) - np.ones((n, n)) / n
    return SpectralDecomposition(
        range_basis=basis,
        nonzero_eigenvalues=nonzero,
        eigenvalues=values,
        projector=projector,
    )


def blocks_of(x: np.ndarray, block_dim: int) -> np.ndarray:
    """Reshape a stacked vector into its (count, block_dim) block matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or block_dim <= 0 or x.size % block_dim:
        raise DimensionMismatch(f"vector of size {x.size} is not stacked {block_dim}-blocks")
    return x.reshape(-1, block_dim)


def disagreement_coordinate(x: np.ndarray, dec: SpectralDecomposition, block_dim: int) -> np.ndarray:
    """(V^T kron I_n) x for a stacked N-agent state with blocks of size n."""
    blocks = blocks_of(x, block_dim)
    if blocks.shape[0] != dec.n_nodes:
        raise DimensionMismatch(
            f"state has {blocks.shape[0]} blocks, decomposition has {dec.n_nodes} nodes"
        )
    return (dec.range_basis.T @ blocks).reshape(-1)


def consensus_projection(x: np.ndarray, dec: SpectralDecomposition, block_dim: int) -> np.ndarray:
    """(S kron I_n) x, the component of x orthogonal to the agreement subspace."""
    blocks = blocks_of(x, block_dim)
    if blocks.shape[0] != dec.n_nodes:
        raise DimensionMismatch(
            f"state has {blocks.shape[0]} blocks, decomposition has {dec.n_nodes} nodes"
        )
    return (dec.projector @ blocks).reshape(-1)


def decomposition_to_csv(dec: SpectralDecomposition, path) -> None:
    """Dump eigenvalues and the range basis for offline debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("eigenvalues," + ",".join(f"{v:.17g}" for v in dec.eigenvalues) + "\n")
        for row in dec.range_basis:
            fh.write("basis_row," + ",".join(f"{v:.17g}" for v in row) + "\n")
