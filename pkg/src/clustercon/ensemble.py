"""Closed-loop ensemble assembly for identical LTI agents on a clustered
network.

Each agent p runs  xdot_p = A x_p + B u_p,  y_p = H x_p  with the distributed
controller u_p = K_u (eta_p + sum_r zeta_pr), where eta_p approximates the
same-cluster output consensus sum and zeta_pr the inter-cluster-r one.  The
estimator errors

    eta_err_p  = eta_p  - sum_{q in same-cluster nbrs}(y_q - y_p)
    zeta_err_pr = zeta_pr - sum_{q in inter-cluster-r nbrs}(y_q - y_p)

together with the disagreement coordinate x_dis = (V^T kron I_n) x form the
reduced state z = (x_dis, eta_err, zeta_err), which flows linearly,
zdot = F z.  This module builds the coupling matrices mapping x_dis to the
stacked estimator sums, the reduced flow matrix F, and the full-coordinate
flow operator used for exact propagation.

Neighbor sums are taken through sub-graph edges (cluster edges and
inter-cluster cross edges), which is what makes the stacked sums expressible
through augmented Laplacians and keeps the neighbor partition exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import ClusteredNetwork
from .spectral import (
    DimensionMismatch,
    SpectralDecomposition,
    blocks_of,
    decompose,
    disagreement_coordinate,
)


@dataclass(frozen=True)
class Plant:
    """Identical-agent LTI data: state A (n x n), input B (n x d), output H (m x n)."""

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "H", H)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch("A must be square")
        if B.shape[0] != n:
            raise DimensionMismatch("B row count must match A")
        if H.shape[1] != n:
            raise DimensionMismatch("H column count must match A")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def controllability_rank(self) -> int:
        mats = [self.B]
        for _ in range(self.n - 1):
            mats.append(self.A @ mats[-1])
        return int(np.linalg.matrix_rank(np.hstack(mats)))

    def observability_rank(self) -> int:
        mats = [self.H]
        for _ in range(self.n - 1):
            mats.append(mats[-1] @ self.A)
        return int(np.linalg.matrix_rank(np.vstack(mats)))


@dataclass(frozen=True)
class GainSet:
    """Controller/estimator gains and timer bounds.

    k_u:    d x m controller gain
    k_eta:  (N, m, m) per-agent estimator flow gains
    k_zeta: (M*, N, m, m) per (inter-cluster, agent) estimator flow gains
    t1, t2: per-agent timer reset bounds, 0 < t1 <= t2
    t3, t4: per-inter-cluster timer reset bounds, 0 < t3 <= t4
    """

    k_u: np.ndarray
    k_eta: np.ndarray
    k_zeta: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    t4: np.ndarray

    def __post_init__(self):
        for name in ("k_u", "k_eta", "k_zeta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("t1", "t2", "t3", "t4"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.t1 <= 0) or np.any(self.t2 < self.t1):
            raise ValueError("agent timer bounds must satisfy 0 < t1 <= t2")
        if self.t3.size and (np.any(self.t3 <= 0) or np.any(self.t4 < self.t3)):
            raise ValueError("inter-cluster timer bounds must satisfy 0 < t3 <= t4")

    @classmethod
    def homogeneous(
        cls,
        k_u,
        k_eta,
        k_zeta,
        t1: float,
        t2: float,
        t3: float,
        t4: float,
        n_agents: int,
        n_inter: int,
    ) -> "GainSet":
        """Broadcast one gain matrix and one timer pair to every agent / inter-cluster."""
        k_eta = np.atleast_2d(np.asarray(k_eta, dtype=float))
        k_zeta = np.atleast_2d(np.asarray(k_zeta, dtype=float))
        m = k_eta.shape[0]
        return cls(
            k_u=np.atleast_2d(np.asarray(k_u, dtype=float)),
            k_eta=np.broadcast_to(k_eta, (n_agents, m, m)).copy(),
            k_zeta=np.broadcast_to(k_zeta, (n_inter, n_agents, m, m)).copy(),
            t1=np.full(n_agents, float(t1)),
            t2=np.full(n_agents, float(t2)),
            t3=np.full(n_inter, float(t3)),
            t4=np.full(n_inter, float(t4)),
        )


@dataclass(frozen=True)
class EnsembleSystem:
    """Clustered network + plant + gains with all derived closed-loop matrices.

    Immutable after construction; build with :func:`build_ensemble`.
    """

    network: ClusteredNetwork
    decomposition: SpectralDecomposition
    plant: Plant
    gains: GainSet
    coupling_eta: np.ndarray           # C,  mN x n(N-1)
    coupling_zeta_blocks: np.ndarray   # I_r stack, (M*, mN, n(N-1))
    coupling_zeta: np.ndarray          # I,  mN M* x n(N-1)
    f11: np.ndarray
    f12: np.ndarray
    f13: np.ndarray
    flow_matrix: np.ndarray            # F, varrho x varrho
    k_eta_stacked: np.ndarray          # block-diag, mN x mN
    k_zeta_stacked: np.ndarray         # block-diag, mN M* x mN M*
    full_flow_operator: np.ndarray = field(repr=False, default=None)
    cluster_row_laplacians: np.ndarray = field(repr=False, default=None)
    inter_laplacians: np.ndarray = field(repr=False, default=None)

    @property
    def n_agents(self) -> int:
        return self.network.n_nodes

    @property
    def n_inter(self) -> int:
        return self.network.n_inter_clusters

    @property
    def dims(self) -> dict:
        p = self.plant
        return {
            "n": p.n, "m": p.m, "d": p.d,
            "N": self.n_agents, "M": self.network.n_clusters, "M_star": self.n_inter,
            "varrho": self.varrho,
        }

    @property
    def varrho(self) -> int:
        n, m = self.plant.n, self.plant.m
        N, ms = self.n_agents, self.n_inter
        return n * (N - 1) + m * N + m * N * ms

    # -- stacked-state helpers -------------------------------------------

    def outputs(self, x: np.ndarray) -> np.ndarray:
        """Agent outputs as an (N, m) array."""
        return blocks_of(x, self.plant.n) @ self.plant.H.T

    def intra_output_sums(self, x: np.ndarray) -> np.ndarray:
        """(N, m) array of same-cluster output consensus sums.

        Row p is sum over same-cluster neighbors q of (y_q - y_p); this is
        the reset value of eta_p and the authoritative neighbor-sum form.
        """
        return -self.cluster_row_laplacians @ self.outputs(x)

    def inter_output_sums(self, x: np.ndarray) -> np.ndarray:
        """(M*, N, m) array of inter-cluster output consensus sums.

        Entry (r, p) is sum over inter-cluster-r neighbors q of (y_q - y_p);
        rows for agents outside inter-cluster r are zero.
        """
        y = self.outputs(x)
        if self.n_inter == 0:
            return np.zeros((0, self.n_agents, self.plant.m))
        return -np.einsum("rpq,qm->rpm", self.inter_laplacians, y)

    def controller(self, eta: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """Stacked control inputs u (N*d,), u_p = K_u (eta_p + sum_r zeta_pr)."""
        m = self.plant.m
        eta_blocks = blocks_of(eta, m)
        total = eta_blocks.copy()
        if self.n_inter:
            total = total + zeta.reshape(self.n_inter, self.n_agents, m).sum(axis=0)
        return (total @ self.gains.k_u.T).reshape(-1)

    def full_flow(self, x: np.ndarray, eta: np.ndarray, zeta: np.ndarray):
        """Time derivatives (xdot, etadot, zetadot) of the physical coordinates."""
        n, m, d = self.plant.n, self.plant.m, self.plant.d
        xb = blocks_of(x, n)
        u = blocks_of(self.controller(eta, zeta), d)
        xdot = xb @ self.plant.A.T + u @ self.plant.B.T
        etadot = np.einsum("pij,pj->pi", self.gains.k_eta, blocks_of(eta, m))
        if self.n_inter:
            zb = zeta.reshape(self.n_inter, self.n_agents, m)
            zetadot = np.einsum("rpij,rpj->rpi", self.gains.k_zeta, zb).reshape(-1)
        else:
            zetadot = np.zeros(0)
        return xdot.reshape(-1), etadot.reshape(-1), zetadot

    def estimator_errors(self, x: np.ndarray, eta: np.ndarray, zeta: np.ndarray):
        """(eta_err, zeta_err) from the neighbor-sum definitions."""
        m = self.plant.m
        eta_err = eta - self.intra_output_sums(x).reshape(-1)
        if self.n_inter:
            zeta_err = zeta - self.inter_output_sums(x).reshape(-1)
        else:
            zeta_err = np.zeros(0)
        return eta_err, zeta_err

    def reduced_state(self, x: np.ndarray, eta: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """z = (x_dis, eta_err, zeta_err) via the coupling-matrix form."""
        x_dis = disagreement_coordinate(x, self.decomposition, self.plant.n)
        eta_err = eta + self.coupling_eta @ x_dis
        if self.n_inter:
            zeta_err = zeta + self.coupling_zeta @ x_dis
        else:
            zeta_err = np.zeros(0)
        return np.concatenate([x_dis, eta_err, zeta_err])

    def split_reduced(self, z: np.ndarray):
        """Split z into (x_dis, eta_err, zeta_err)."""
        n, m = self.plant.n, self.plant.m
        N = self.n_agents
        a = n * (N - 1)
        b = a + m * N
        return z[:a], z[a:b], z[b:]

    def coupling_mode_report(self) -> list[dict]:
        """Eigenvalues of A - lambda_i B K_u H for every Laplacian eigenvalue.

        Diagnostic only: the disagreement block F11 is stable iff all these
        are in the open left half plane.
        """
        bkh = self.plant.B @ self.gains.k_u @ self.plant.H
        out = []
        for lam in self.decomposition.nonzero_eigenvalues:
            eig = np.linalg.eigvals(self.plant.A - lam * bkh)
            out.append({"eigenvalue": float(lam), "modes": eig, "stable": bool(np.max(eig.real) < 0)})
        return out

def build_coupling_eta(
    net: ClusteredNetwork, dec: SpectralDecomposition, h: np.ndarray
) -> np.ndarray:
    """Coupling C with eta_err = eta + C x_dis.

    Row-block p equals (row p of the cluster augmented Laplacian) V kron H,
    so C x_dis reproduces minus the same-cluster output sums for any x.
    """
    w = net.agent_cluster_laplacian_rows()
    return np.kron(w @ dec.range_basis, np.atleast_2d(h))


def build_coupling_zeta(
    net: ClusteredNetwork, dec: SpectralDecomposition, h: np.ndarray
):
    """Per-inter-cluster couplings I_r and their stack I with zeta_err = zeta + I x_dis."""
    h = np.atleast_2d(h)
    m = h.shape[0]
    n = h.shape[1]
    n_cols = n * (net.n_nodes - 1)
    blocks = []
    for r in range(net.n_inter_clusters):
        lr = net.inter_cluster_laplacian(r + 1)
        blocks.append(np.kron(lr @ dec.range_basis, h))
    if blocks:
        stack = np.stack(blocks)
        return stack, stack.reshape(-1, n_cols)
    return np.zeros((0, m * net.n_nodes, n_cols)), np.zeros((0, n_cols))


def _block_diag(blocks: np.ndarray) -> np.ndarray:
    """Block-diagonal matrix from a (k, a, b) stack."""
    k, a, b = blocks.shape
    out = np.zeros((k * a, k * b))
    for i in range(k):
        out[i * a:(i + 1) * a, i * b:(i + 1) * b] = blocks[i]
    return out


def build_ensemble(
    network: ClusteredNetwork,
    plant: Plant,
    gains: GainSet,
    dec: SpectralDecomposition | None = None,
) -> EnsembleSystem:
    """Assemble the closed-loop system matrices for a clustered network."""
    N = network.n_nodes
    ms = network.n_inter_clusters
    n, m, d = plant.n, plant.m, plant.d

    if gains.k_u.shape != (d, m):
        raise DimensionMismatch(f"k_u must be {d}x{m}, got {gains.k_u.shape}")
    if gains.k_eta.shape != (N, m, m):
        raise DimensionMismatch(f"k_eta must have shape ({N},{m},{m})")
    if gains.k_zeta.shape != (ms, N, m, m):
        raise DimensionMismatch(f"k_zeta must have shape ({ms},{N},{m},{m})")
    if gains.t1.shape != (N,) or gains.t2.shape != (N,):
        raise DimensionMismatch("agent timer bounds must have one entry per agent")
    if gains.t3.shape != (ms,) or gains.t4.shape != (ms,):
        raise DimensionMismatch("inter-cluster timer bounds must have one entry per inter-cluster")

    if dec is None:
        dec = decompose(network.laplacian_matrix())

    w_cluster = network.agent_cluster_laplacian_rows()
    if ms:
        l_inter = np.stack([network.inter_cluster_laplacian(r + 1) for r in range(ms)])
    else:
        l_inter = np.zeros((0, N, N))

    v = dec.range_basis
    bku = plant.B @ gains.k_u
    coupling_eta = build_coupling_eta(network, dec, plant.H)
    zeta_blocks, coupling_zeta = build_coupling_zeta(network, dec, plant.H)

    f11 = np.kron(np.eye(N - 1), plant.A) - np.kron(dec.gain_matrix, bku @ plant.H)
    f12 = np.kron(v.T, bku)
    if ms:
        sum_over_inter = np.kron(np.ones((1, ms)), np.eye(m * N))
        f13 = f12 @ sum_over_inter
    else:
        f13 = np.zeros((n * (N - 1), 0))

    k_eta = _block_diag(gains.k_eta)
    if ms:
        k_zeta = _block_diag(np.stack([_block_diag(gains.k_zeta[r]) for r in range(ms)]))
    else:
        k_zeta = np.zeros((0, 0))

    c = coupling_eta
    i_mat = coupling_zeta
    top = np.hstack([f11, f12, f13])
    mid = np.hstack([c @ f11 - k_eta @ c, c @ f12 + k_eta, c @ f13])
    if ms:
        bot = np.hstack([i_mat @ f11 - k_zeta @ i_mat, i_mat @ f12, i_mat @ f13 + k_zeta])
        flow = np.vstack([top, mid, bot])
    else:
        flow = np.vstack([top, mid])

    # Constant flow operator on the physical coordinates (x, eta, zeta).
    kron_a = np.kron(np.eye(N), plant.A)
    kron_bku = np.kron(np.eye(N), bku)
    if ms:
        full_op = np.block([
            [kron_a, kron_bku, kron_bku @ sum_over_inter],
            [np.zeros((m * N, n * N)), k_eta, np.zeros((m * N, m * N * ms))],
            [np.zeros((m * N * ms, n * N)), np.zeros((m * N * ms, m * N)), k_zeta],
        ])
    else:
        full_op = np.block([
            [kron_a, kron_bku],
            [np.zeros((m * N, n * N)), k_eta],
        ])

    return EnsembleSystem(
        network=network,
        decomposition=dec,
        plant=plant,
        gains=gains,
        coupling_eta=coupling_eta,
        coupling_zeta_blocks=zeta_blocks,
        coupling_zeta=coupling_zeta,
        f11=f11,
        f12=f12,
        f13=f13,
        flow_matrix=flow,
        k_eta_stacked=k_eta,
        k_zeta_stacked=k_zeta,
        full_flow_operator=full_op,
        cluster_row_laplacians=w_cluster,
        inter_laplacians=l_inter,
    )
