"""Marine-craft rendezvous scenario, perturbation signals, and Monte Carlo.

Each planar craft has a fixed bow offset of length ell from its center of
mass; commanding the bow velocity is nonsingular for ell > 0, so a craft can
track any smooth bow reference exactly through the inverse kinematic map.
The references come from a virtual point-mass-with-damping plant per agent,
driven into consensus by the hybrid output-feedback protocol: position and
velocity of the virtual plant are the agent state, position is the measured
output.  Crafts then follow their virtual reference velocity, and rendezvous
of the bows follows from consensus of the virtual plants.

The shipped 14-node preset matches the demo scale (14 agents, 5 clusters,
8 inter-clusters, state dimension 4, reduced dimension 304).  The topology
is constructed, not copied: the demo network places every node in exactly
two inter-clusters, which keeps the broadcast-identical inter-cluster
measurement noise largely common-mode so the disagreement floor stays small.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .ensemble import EnsembleSystem, GainSet, Plant, build_ensemble
from .hybridsim import HybridTrace, NoiseModel, make_initial, simulate
from .network import ClusteredNetwork, build_clustered_network, random_clustered_network


# -- virtual plant ---------------------------------------------------------

def virtual_plant(mass: np.ndarray, damping: np.ndarray) -> Plant:
    """Point-mass-with-viscous-damping LTI plant in (position, velocity) form.

    mass must be positive definite and damping nonzero; the output is the
    position block.
    """
    mass = np.atleast_2d(np.asarray(mass, dtype=float))
    damping = np.atleast_2d(np.asarray(damping, dtype=float))
    k = mass.shape[0]
    if np.linalg.eigvalsh(0.5 * (mass + mass.T)).min() <= 0:
        raise ValueError("mass matrix must be positive definite")
    if not np.any(damping):
        raise ValueError("damping matrix must be nonzero")
    inv_mass = np.linalg.inv(mass)
    a = np.block([[np.zeros((k, k)), np.eye(k)], [np.zeros((k, k)), -inv_mass @ damping]])
    b = np.vstack([np.zeros((k, k)), inv_mass])
    h = np.hstack([np.eye(k), np.zeros((k, k))])
    return Plant(A=a, B=b, H=h)


# -- craft kinematics ------------------------------------------------------

def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def inverse_map(theta: float, bow_velocity: np.ndarray, length: float) -> tuple[float, float]:
    """(speed, turn rate) realizing a requested bow velocity.

    The bow velocity equals R(theta) diag(1, ell) (v, omega), and both
    factors are invertible for ell > 0.
    """
    if length <= 0:
        raise ValueError("bow offset length must be positive")
    local = rotation(theta).T @ np.asarray(bow_velocity, dtype=float)
    return float(local[0]), float(local[1] / length)


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Principal value in (-pi, pi]."""
    wrapped = np.remainder(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def bow_positions(centers: np.ndarray, headings: np.ndarray, length: float) -> np.ndarray:
    offsets = length * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    return centers + offsets


def _craft_rates(centers, headings, velocities, length):
    """Kinematic rates (cdot, thetadot) for bow-velocity tracking commands."""
    cos_t = np.cos(headings)
    sin_t = np.sin(headings)
    speed = cos_t * velocities[:, 0] + sin_t * velocities[:, 1]
    turn = (-sin_t * velocities[:, 0] + cos_t * velocities[:, 1]) / length
    cdot = np.stack([speed * cos_t, speed * sin_t], axis=1)
    return cdot, turn


def integrate_crafts(
    times: np.ndarray,
    velocity_samples: np.ndarray,
    centers0: np.ndarray,
    headings0: np.ndarray,
    length: float,
):
    """Fixed-step RK4 for the craft fleet along a sampled reference-velocity
    signal.

    `times` must be uniform with an even number of intervals; velocity
    samples at consecutive half-steps provide the RK4 stage values, so the
    integration step is twice the sampling step.  Returns (step_times,
    centers, headings) with leading time axis.
    """
    n_samples = len(times)
    if n_samples < 3 or (n_samples - 1) % 2:
        raise ValueError("need an odd number of half-step samples (even interval count)")
    h = 2.0 * (times[1] - times[0])
    steps = (n_samples - 1) // 2
    n_agents = centers0.shape[0]
    centers = np.empty((steps + 1, n_agents, 2))
    headings = np.empty((steps + 1, n_agents))
    centers[0] = centers0
    headings[0] = headings0
    for k in range(steps):
        v0 = velocity_samples[2 * k]
        vh = velocity_samples[2 * k + 1]
        v1 = velocity_samples[2 * k + 2]
        c, th = centers[k], headings[k]
        k1c, k1t = _craft_rates(c, th, v0, length)
        k2c, k2t = _craft_rates(c + 0.5 * h * k1c, th + 0.5 * h * k1t, vh, length)
        k3c, k3t = _craft_rates(c + 0.5 * h * k2c, th + 0.5 * h * k2t, vh, length)
        k4c, k4t = _craft_rates(c + h * k3c, th + h * k3t, v1, length)
        centers[k + 1] = c + (h / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
        headings[k + 1] = wrap_angle(th + (h / 6.0) * (k1t + 2 * k2t + 2 * k3t + k4t))
    return times[::2].copy(), centers, headings


# -- perturbation signals --------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Slow-beat sinusoidal measurement noise of continuous time.

    agent channel:        a1 * sin(w1 t) * sin(w2 t) * ones(m)
    inter-cluster channel: a2 * sin(w3 t) * cos(w4 t) * ones(m)
    """

    agent_amplitude: float = 0.07
    inter_amplitude: float = 0.04
    agent_freqs: tuple[float, float] = (0.015, 0.2)
    inter_freqs: tuple[float, float] = (0.095, 0.4)

    def __post_init__(self):
        if self.agent_amplitude < 0 or self.inter_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")

    def scaled(self, amplitude_agent: float, amplitude_inter: float) -> "PerturbationSpec":
        return PerturbationSpec(
            agent_amplitude=amplitude_agent,
            inter_amplitude=amplitude_inter,
            agent_freqs=self.agent_freqs,
            inter_freqs=self.inter_freqs,
        )


def perturbation_signals(t: float, spec: PerturbationSpec, m: int) -> tuple[np.ndarray, np.ndarray]:
    """(agent noise, inter-cluster noise) m-vectors at continuous time t."""
    w1, w2 = spec.agent_freqs
    w3, w4 = spec.inter_freqs
    agent = spec.agent_amplitude * math.sin(w1 * t) * math.sin(w2 * t) * np.ones(m)
    inter = spec.inter_amplitude * math.sin(w3 * t) * math.cos(w4 * t) * np.ones(m)
    return agent, inter


def noise_model(spec: PerturbationSpec, m: int) -> NoiseModel:
    """Shared-signal noise model: every agent and inter-cluster samples the
    same continuous-time signal at its own jump instants."""
    return NoiseModel.shared(
        agent_signal=lambda t: perturbation_signals(t, spec, m)[0],
        inter_signal=lambda t: perturbation_signals(t, spec, m)[1],
    )


def noise_sup_norm(spec: PerturbationSpec, m: int, n_agents: int, n_inter: int) -> float:
    """Upper bound on sup_t of the stacked noise Euclidean norm (product of
    unit-bounded sinusoids bounded by 1)."""
    return math.sqrt(
        m * n_agents * spec.agent_amplitude ** 2
        + m * n_agents * n_inter * spec.inter_amplitude ** 2
    )


# -- shipped 14-agent preset ----------------------------------------------

DEMO_LENGTH = 0.53
DEMO_SIGMA = 500.0
DEMO_K_ETA = np.array([[-2.33, -1.33], [1.33, -5.66]])


def demo_network() -> ClusteredNetwork:
    """Constructed 14-node clustered network: 5 clusters, 8 inter-clusters,
    every node a member of exactly two inter-clusters."""
    clusters = [{1, 2, 3}, {4, 5, 6}, {7, 8, 9}, {10, 11, 12}, {13, 14}]
    intra = [
        (1, 2), (2, 3), (1, 3),
        (4, 5), (5, 6), (4, 6),
        (7, 8), (8, 9), (7, 9),
        (10, 11), (11, 12), (10, 12),
        (13, 14),
    ]
    cross = [
        (1, 4), (3, 5),      # clusters 1-2
        (1, 7), (1, 8),      # clusters 1-3
        (2, 10), (3, 11),    # clusters 1-4
        (2, 13),             # clusters 1-5
        (4, 7), (6, 9),      # clusters 2-3
        (5, 10), (6, 12),    # clusters 2-4
        (8, 13), (9, 14),    # clusters 3-5
        (11, 14), (12, 14),  # clusters 4-5
    ]
    return build_clustered_network(14, intra + cross, clusters)


def demo_plant() -> Plant:
    return virtual_plant(np.eye(2), 2.66 * np.eye(2))


def demo_gains(net: ClusteredNetwork, k_u_scale: float = 0.5) -> GainSet:
    return GainSet.homogeneous(
        k_u=k_u_scale * np.eye(2),
        k_eta=DEMO_K_ETA,
        k_zeta=DEMO_K_ETA,
        t1=0.001, t2=0.01, t3=0.001, t4=0.01,
        n_agents=net.n_nodes,
        n_inter=net.n_inter_clusters,
    )


def demo_system(k_u_scale: float = 0.5, net: ClusteredNetwork | None = None) -> EnsembleSystem:
    net = net or demo_network()
    return build_ensemble(net, demo_plant(), demo_gains(net, k_u_scale))


def seeded_initial_bows(n_agents: int, seed: int, box: float = 2.5) -> tuple[np.ndarray, np.ndarray]:
    """Random initial bow positions in a centered box plus random headings."""
    rng = np.random.default_rng(seed)
    bows = rng.uniform(-box, box, size=(n_agents, 2))
    headings = rng.uniform(-np.pi, np.pi, size=n_agents)
    return bows, headings


# -- rendezvous run --------------------------------------------------------

@dataclass
class RendezvousResult:
    trace: HybridTrace
    craft_times: np.ndarray
    craft_centers: np.ndarray      # (T, N, 2)
    craft_headings: np.ndarray     # (T, N)
    craft_bows: np.ndarray         # (T, N, 2)
    reference_positions: np.ndarray  # (T', N, 2) virtual plant positions on the fine grid
    reference_times: np.ndarray
    summary: dict


def rendezvous_run(
    sys: EnsembleSystem,
    initial_bows: np.ndarray,
    initial_headings: np.ndarray,
    horizon: float,
    length: float = DEMO_LENGTH,
    noise: NoiseModel | None = None,
    seed: int = 0,
    craft_dt: float = 1e-3,
    reset_policy: str = "uniform",
) -> RendezvousResult:
    """Drive the virtual plants into consensus and track them with crafts.

    The virtual plant of agent p starts at the craft's bow with zero
    velocity, so exact tracking keeps the bow on the reference for all time
    up to craft integration error.  Craft kinematics ride along the hybrid
    trace via fixed-step RK4 on the reference velocities, sampled at half
    the craft step.
    """
    n_agents = sys.n_agents
    initial_bows = np.asarray(initial_bows, dtype=float).reshape(n_agents, 2)
    initial_headings = np.asarray(initial_headings, dtype=float).reshape(n_agents)
    x0 = np.hstack([initial_bows, np.zeros((n_agents, 2))]).reshape(-1)
    init = make_initial(sys, x0)

    steps = round(horizon / craft_dt)
    if abs(steps * craft_dt - horizon) > 1e-9:
        raise ValueError("horizon must be an integer multiple of craft_dt")

    trace = simulate(
        sys, init, horizon,
        reset_policy=reset_policy,
        noise=noise,
        seed=seed,
        record_dt=craft_dt / 2.0,
        record_x=True,
    )

    states = trace.state_x.reshape(len(trace.state_times), n_agents, 4)
    positions = states[:, :, 0:2]
    velocities = states[:, :, 2:4]

    centers0 = initial_bows - length * np.stack(
        [np.cos(initial_headings), np.sin(initial_headings)], axis=1
    )
    step_times, centers, headings = integrate_crafts(
        trace.state_times, velocities, centers0, initial_headings, length
    )
    bows = np.stack(
        [bow_positions(centers[k], headings[k], length) for k in range(len(step_times))]
    )

    final_bows = bows[-1]
    spread = 0.0
    for p in range(n_agents):
        for q in range(p + 1, n_agents):
            spread = max(spread, float(np.linalg.norm(final_bows[p] - final_bows[q])))
    tracking = float(np.max(np.linalg.norm(bows - positions[::2], axis=2)))

    summary = {
        "final_bow_spread": spread,
        "max_tracking_error": tracking,
        "final_distance": trace.final_distance(),
        "final_disagreement": float(trace.samples.norm_x_dis[-1]),
        "fitted_decay_rate": trace.fit_decay_rate(),
        "horizon": horizon,
        "seed": seed,
    }
    return RendezvousResult(
        trace=trace,
        craft_times=step_times,
        craft_centers=centers,
        craft_headings=headings,
        craft_bows=bows,
        reference_positions=positions,
        reference_times=trace.state_times,
        summary=summary,
    )


def craft_trajectories_to_csv(result: RendezvousResult, path) -> None:
    """Per-step craft poses and reference positions, wide format."""
    n_agents = result.craft_centers.shape[1]
    ref = result.reference_positions[::2]
    with open(path, "w", encoding="utf-8") as fh:
        header = ["t"]
        for p in range(1, n_agents + 1):
            header += [f"c{p}_x", f"c{p}_y", f"theta{p}", f"b{p}_x", f"b{p}_y", f"ref{p}_x", f"ref{p}_y"]
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(result.craft_times):
            row = [f"{t:.17g}"]
            for p in range(n_agents):
                row += [
                    f"{result.craft_centers[k, p, 0]:.17g}",
                    f"{result.craft_centers[k, p, 1]:.17g}",
                    f"{result.craft_headings[k, p]:.17g}",
                    f"{result.craft_bows[k, p, 0]:.17g}",
                    f"{result.craft_bows[k, p, 1]:.17g}",
                    f"{ref[k, p, 0]:.17g}",
                    f"{ref[k, p, 1]:.17g}",
                ]
            fh.write(",".join(row) + "\n")


# -- Monte Carlo -----------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloConfig:
    """Defaults for the randomized robustness study.

    The random graphs are kept well connected (extra edge probability 0.75,
    at most 5 clusters): the identical broadcast noise injected at
    inter-cluster resets forces the disagreement with a floor scaling like
    amplitude * membership-count spread / algebraic connectivity, and
    weakly connected draws would let that floor dominate the study.
    """

    runs: int = 30
    seed: int = 0
    amplitude_range: tuple[float, float] = (0.0, 0.075)
    n_nodes: int = 14
    cluster_range: tuple[int, int] = (2, 5)
    extra_edge_prob: float = 0.75
    horizon: float = 30.0
    k_u_scale: float = 1.5
    record_dt: float = 0.01
    reset_policy: str = "uniform"
    initial_box: float = 2.5

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")


def monte_carlo(config: MonteCarloConfig, trace_sink=None) -> dict:
    """Randomized robustness study: fresh clustered network, fresh partition,
    fresh perturbation amplitude per run; everything derived from one master
    seed.  Runs are independent and keyed by index, so the aggregate is
    order-insensitive.  `trace_sink(run_index, trace)`, when given, receives
    each run's trace before it is discarded."""
    master = np.random.default_rng(config.seed)
    run_seeds = master.integers(0, 2 ** 62, size=(config.runs, 4))

    plant = demo_plant()
    results = []
    for run in range(config.runs):
        net_seed, init_seed, sim_seed, draw_seed = (int(s) for s in run_seeds[run])
        rng = np.random.default_rng(draw_seed)
        n_clusters = int(rng.integers(config.cluster_range[0], config.cluster_range[1] + 1))
        amplitude = float(rng.uniform(*config.amplitude_range))

        net = random_clustered_network(config.n_nodes, n_clusters, config.extra_edge_prob, seed=net_seed)
        gains = demo_gains(net, k_u_scale=config.k_u_scale)
        sys = build_ensemble(net, plant, gains)

        bows, _ = seeded_initial_bows(config.n_nodes, init_seed, box=config.initial_box)
        x0 = np.hstack([bows, np.zeros((config.n_nodes, 2))]).reshape(-1)
        spec = PerturbationSpec().scaled(amplitude, amplitude)
        noise = noise_model(spec, plant.m) if amplitude > 0 else None

        trace = simulate(
            sys, make_initial(sys, x0), config.horizon,
            reset_policy=config.reset_policy,
            noise=noise,
            seed=sim_seed,
            record_dt=config.record_dt,
            record_jump_scalars=False,
        )
        results.append({
            "run": run,
            "amplitude": amplitude,
            "n_clusters": net.n_clusters,
            "n_inter_clusters": net.n_inter_clusters,
            "final_disagreement": float(trace.samples.norm_x_dis[-1]),
            "final_distance": trace.final_distance(),
            "fitted_decay_rate": trace.fit_decay_rate("norm_x_dis"),
            "jumps": len(trace.jumps),
        })

    finals = np.array([r["final_disagreement"] for r in results])
    aggregate = {
        "config": {
            "runs": config.runs,
            "seed": config.seed,
            "amplitude_range": list(config.amplitude_range),
            "n_nodes": config.n_nodes,
            "cluster_range": list(config.cluster_range),
            "extra_edge_prob": config.extra_edge_prob,
            "horizon": config.horizon,
            "k_u_scale": config.k_u_scale,
        },
        "runs": results,
        "max_final_disagreement": float(finals.max()),
        "median_final_disagreement": float(np.median(finals)),
    }
    return aggregate


def monte_carlo_to_json(aggregate: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
