"""Event-exact execution of the closed-loop hybrid system.

Between timer events every coordinate flows linearly, so states are
propagated with the matrix exponential of the constant flow operator: no
integration error, which keeps Lyapunov monotonicity checks clean.  Timers
count down at unit rate and are reset into their interval when they hit
zero; an agent timer reset re-measures the same-cluster output sums into
that agent's estimator, an inter-cluster timer reset re-measures the
cross-edge sums for every member agent.  Measurement noise, when enabled,
is injected additively at those reset instants only.

Timers live on an integer grid: a common quantum dividing every reset bound
is derived from the bounds, and timer values, reset draws, record instants
and the horizon are all integer multiples of it.  Simultaneous events are
therefore exact (no floating-point straddling), and the set of distinct
flow durations stays small enough to cache one matrix exponential per
duration.  Resets drawn "uniformly" are uniform over the grid points inside
the reset interval, a valid selection from the set-valued reset map.

A single simulation is strictly sequential; concurrent simulations may
share the immutable system since each run owns its RNG and caches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .ensemble import EnsembleSystem

NANOSECONDS = 1_000_000_000

AGENT_TIMER = "agent"
INTER_TIMER = "inter"


class SimulationError(ValueError):
    pass


class EventSkipped(SimulationError):
    pass


class NotInJumpSet(SimulationError):
    pass


class TimerOutOfRange(SimulationError):
    pass


RESET_POLICIES = ("uniform", "midpoint", "max")


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise injected at reset instants.

    agent_signal(t, p) and inter_signal(t, p, r) return the m-vector added
    to agent p's intra-cluster measurement and to member p's inter-cluster-r
    measurement; both are functions of continuous time sampled at the jump.
    """

    agent_signal: Callable[[float, int], np.ndarray]
    inter_signal: Callable[[float, int, int], np.ndarray]
    enabled: bool = True

    @classmethod
    def shared(cls, agent_signal: Callable[[float], np.ndarray],
               inter_signal: Callable[[float], np.ndarray]) -> "NoiseModel":
        """Same signal for every agent / inter-cluster (time-dependent only)."""
        return cls(
            agent_signal=lambda t, p: agent_signal(t),
            inter_signal=lambda t, p, r: inter_signal(t),
        )


@dataclass
class HybridState:
    """Full hybrid state: physical coordinates plus countdown timers (seconds)."""

    x: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    tau: np.ndarray
    rho: np.ndarray

    def copy(self) -> "HybridState":
        return HybridState(self.x.copy(), self.eta.copy(), self.zeta.copy(),
                           self.tau.copy(), self.rho.copy())


def make_initial(
    sys: EnsembleSystem,
    x: np.ndarray,
    eta: np.ndarray | None = None,
    zeta: np.ndarray | None = None,
    tau: np.ndarray | float | None = None,
    rho: np.ndarray | float | None = None,
) -> HybridState:
    """Initial hybrid state; estimators default to zero and timers to zero.

    Zero timers make every estimator re-measure at t = 0, which also realizes
    the tightest hybrid-time bounds.  Inter-cluster estimator entries of
    non-member agents must be zero (they are identically zero in the model).
    """
    n, m = sys.plant.n, sys.plant.m
    N, ms = sys.n_agents, sys.n_inter
    x = np.asarray(x, dtype=float).reshape(N * n)
    eta = np.zeros(N * m) if eta is None else np.asarray(eta, dtype=float).reshape(N * m)
    zeta = np.zeros(ms * N * m) if zeta is None else np.asarray(zeta, dtype=float).reshape(ms * N * m)
    if ms:
        mask = _membership_mask(sys)
        nonmember = zeta.reshape(ms, N, m)[~mask]
        if np.any(nonmember != 0.0):
            raise SimulationError("inter-cluster estimator entries of non-member agents must be zero")
    tau = np.zeros(N) if tau is None else np.broadcast_to(np.asarray(tau, dtype=float), (N,)).copy()
    rho = np.zeros(ms) if rho is None else np.broadcast_to(np.asarray(rho, dtype=float), (ms,)).copy()
    if np.any(tau < 0) or np.any(tau > sys.gains.t2 + 1e-12):
        raise TimerOutOfRange("agent timers must start inside [0, t2]")
    if ms and (np.any(rho < 0) or np.any(rho > sys.gains.t4 + 1e-12)):
        raise TimerOutOfRange("inter-cluster timers must start inside [0, t4]")
    return HybridState(x=x, eta=eta, zeta=zeta, tau=tau, rho=rho)


def _membership_mask(sys: EnsembleSystem) -> np.ndarray:
    """(M*, N) boolean membership of agents in inter-clusters."""
    ms, N = sys.n_inter, sys.n_agents
    mask = np.zeros((ms, N), dtype=bool)
    for ic in sys.network.inter_clusters:
        for p in ic.nodes:
            mask[ic.index - 1, p - 1] = True
    return mask


@dataclass(frozen=True)
class TimerGrid:
    """Integer-tick timer representation with a common quantum (seconds)."""

    quantum: float
    quantum_ns: int
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    t4: np.ndarray

    @classmethod
    def from_gains(cls, gains, subdivision: int = 4) -> "TimerGrid":
        bounds = np.concatenate([gains.t1, gains.t2, gains.t3, gains.t4])
        bounds_ns = [round(float(b) * NANOSECONDS) for b in bounds]
        if any(b <= 0 for b in bounds_ns):
            raise SimulationError("timer bounds below 1 ns are not representable")
        g = 0
        for b in bounds_ns:
            g = math.gcd(g, b)
        k = 1
        for cand in range(min(subdivision, g), 0, -1):
            if g % cand == 0:
                k = cand
                break
        quantum_ns = g // k
        to_ticks = lambda arr: np.array([round(float(b) * NANOSECONDS) // quantum_ns for b in arr], dtype=np.int64)
        return cls(
            quantum=quantum_ns / NANOSECONDS,
            quantum_ns=quantum_ns,
            t1=to_ticks(gains.t1),
            t2=to_ticks(gains.t2),
            t3=to_ticks(gains.t3),
            t4=to_ticks(gains.t4),
        )

    def seconds_to_ticks(self, value: float) -> int:
        return max(0, round(float(value) / self.quantum))


@dataclass
class JumpLog:
    """Column-wise jump records."""

    t: np.ndarray
    j: np.ndarray
    kind: np.ndarray          # AGENT_TIMER / INTER_TIMER strings
    index: np.ndarray         # 1-based timer index
    reset_value: np.ndarray   # seconds
    v_pre: np.ndarray
    v_post: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class TraceSamples:
    """Column-wise (t, j)-indexed scalar records along the run."""

    t: np.ndarray
    j: np.ndarray
    dist: np.ndarray            # distance to the consensus set, ||z||
    norm_x_dis: np.ndarray
    norm_eta_err: np.ndarray
    norm_zeta_err: np.ndarray
    lyapunov: np.ndarray        # nan when no certificate was supplied
    trigger: np.ndarray         # "" for flow samples, "agent:p" / "inter:r" post-jump

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class HybridTrace:
    samples: TraceSamples
    jumps: JumpLog
    metadata: dict
    state_times: np.ndarray | None = None
    state_x: np.ndarray | None = None
    reduced_mismatch: float | None = None

    def final_distance(self) -> float:
        return float(self.samples.dist[-1])

    def fit_decay_rate(self, quantity: str = "dist") -> float:
        """Least-squares slope of ln(quantity) versus t over positive samples."""
        t = self.samples.t
        d = getattr(self.samples, quantity)
        keep = d > 0
        if keep.sum() < 2:
            return float("nan")
        coeffs = np.polyfit(t[keep], np.log(d[keep]), 1)
        return float(coeffs[0])

    def summary(self) -> dict:
        out = dict(self.metadata)
        out.update({
            "samples": len(self.samples),
            "jumps": len(self.jumps),
            "final_distance": self.final_distance(),
            "fitted_decay_rate": self.fit_decay_rate(),
        })
        if self.reduced_mismatch is not None:
            out["max_reduced_mismatch"] = self.reduced_mismatch
        return out


def next_event(state: HybridState) -> tuple[float, list[tuple[str, int]]]:
    """Time to the next timer event and the set of timers attaining it."""
    values = [(float(v), (AGENT_TIMER, p + 1)) for p, v in enumerate(state.tau)]
    values += [(float(v), (INTER_TIMER, r + 1)) for r, v in enumerate(state.rho)]
    dt = min(v for v, _ in values)
    tol = 1e-12 * max(1.0, dt)
    triggers = [trig for v, trig in values if v - dt <= tol]
    return dt, triggers


class _Propagator:
    """Cached exact propagation w(t + dt) = expm(op * dt) w(t)."""

    def __init__(self, operator: np.ndarray, quantum: float):
        self.operator = operator
        self.quantum = quantum
        self._cache: dict[int, np.ndarray] = {}

    def matrix(self, dt_ticks: int) -> np.ndarray:
        mat = self._cache.get(dt_ticks)
        if mat is None:
            mat = expm(self.operator * (dt_ticks * self.quantum))
            self._cache[dt_ticks] = mat
        return mat

    def apply(self, w: np.ndarray, dt_ticks: int) -> np.ndarray:
        if dt_ticks == 0:
            return w
        return self.matrix(dt_ticks) @ w


def flow(sys: EnsembleSystem, state: HybridState, dt: float) -> HybridState:
    """Exact flow over dt; raises EventSkipped if an event lies inside."""
    if dt < 0:
        raise SimulationError("dt must be non-negative")
    limit, _ = next_event(state)
    if dt > limit + 1e-12:
        raise EventSkipped(f"flow of {dt} s would skip an event due in {limit} s")
    w = np.concatenate([state.x, state.eta, state.zeta])
    w = expm(sys.full_flow_operator * dt) @ w if dt > 0 else w
    n_x = state.x.size
    n_eta = state.eta.size
    return HybridState(
        x=w[:n_x],
        eta=w[n_x:n_x + n_eta],
        zeta=w[n_x + n_eta:],
        tau=state.tau - dt,
        rho=state.rho - dt,
    )


def jump(
    sys: EnsembleSystem,
    state: HybridState,
    trigger: tuple[str, int],
    reset_policy: str = "max",
    noise: NoiseModel | None = None,
    t: float = 0.0,
    rng: np.random.Generator | None = None,
) -> HybridState:
    """Apply one jump for `trigger` = (kind, 1-based index)."""
    kind, idx = trigger
    out = state.copy()
    m = sys.plant.m
    N = sys.n_agents
    grid = TimerGrid.from_gains(sys.gains)
    rng = rng or np.random.default_rng(0)

    if kind == AGENT_TIMER:
        if abs(state.tau[idx - 1]) > 1e-12:
            raise NotInJumpSet(f"agent timer {idx} is not at zero")
        sums = sys.intra_output_sums(state.x)[idx - 1]
        if noise is not None and noise.enabled:
            sums = sums + np.asarray(noise.agent_signal(t, idx), dtype=float)
        out.eta[(idx - 1) * m: idx * m] = sums
        out.tau[idx - 1] = _draw_reset(grid.t1[idx - 1], grid.t2[idx - 1], reset_policy, rng) * grid.quantum
    elif kind == INTER_TIMER:
        if abs(state.rho[idx - 1]) > 1e-12:
            raise NotInJumpSet(f"inter-cluster timer {idx} is not at zero")
        sums = sys.inter_output_sums(state.x)[idx - 1]
        members = _membership_mask(sys)[idx - 1]
        block = np.zeros((N, m))
        block[members] = sums[members]
        if noise is not None and noise.enabled:
            for p in np.flatnonzero(members):
                block[p] += np.asarray(noise.inter_signal(t, p + 1, idx), dtype=float)
        out.zeta[(idx - 1) * N * m: idx * N * m] = block.reshape(-1)
        out.rho[idx - 1] = _draw_reset(grid.t3[idx - 1], grid.t4[idx - 1], reset_policy, rng) * grid.quantum
    else:
        raise SimulationError(f"unknown trigger kind {kind!r}")
    return out


def _draw_reset(lo: int, hi: int, policy: str, rng: np.random.Generator) -> int:
    if policy == "max":
        return int(hi)
    if policy == "midpoint":
        return int((lo + hi) // 2)
    if policy == "uniform":
        return int(rng.integers(lo, hi + 1))
    raise SimulationError(f"unknown reset policy {policy!r}; choose from {RESET_POLICIES}")


def distance_to_attractor(sys: EnsembleSystem, state: HybridState) -> float:
    """Distance of the hybrid state to the consensus set: ||z||."""
    return float(np.linalg.norm(sys.reduced_state(state.x, state.eta, state.zeta)))


def simulate(
    sys: EnsembleSystem,
    initial: HybridState,
    horizon: float,
    reset_policy: str = "uniform",
    noise: NoiseModel | None = None,
    seed: int = 0,
    record_dt: float = 1e-3,
    lyapunov=None,
    timer_subdivision: int = 4,
    track_reduced: bool = False,
    record_jump_scalars: bool = True,
    record_x: bool = False,
) -> HybridTrace:
    """Run the hybrid system from `initial` for `horizon` seconds.

    Event-exact: flows go precisely to the next timer zero (or record tick),
    all zero timers are then processed as individual jumps in fixed order
    (agents by ascending index, then inter-clusters), each incrementing j.
    Deterministic for a fixed (system, initial, seed, options).

    `lyapunov`, when given, must expose value(z, tau, rho) and
    jump_delta(z_pre, z_post, tau, rho, kind, index); per-sample values and
    per-jump pre/post values are then recorded.  `track_reduced` co-evolves
    the reduced coordinate under its own flow matrix and reports the maximum
    mismatch against the full simulation's derived z.
    """
    if horizon <= 0:
        raise SimulationError("horizon must be positive")
    if reset_policy not in RESET_POLICIES:
        raise SimulationError(f"unknown reset policy {reset_policy!r}")

    n, m = sys.plant.n, sys.plant.m
    N, ms = sys.n_agents, sys.n_inter
    grid = TimerGrid.from_gains(sys.gains, subdivision=timer_subdivision)
    rng = np.random.default_rng(seed)
    members = _membership_mask(sys)

    taus = np.array([grid.seconds_to_ticks(v) for v in initial.tau], dtype=np.int64)
    rhos = np.array([grid.seconds_to_ticks(v) for v in initial.rho], dtype=np.int64)
    if np.any(taus > grid.t2) or (ms and np.any(rhos > grid.t4)):
        raise TimerOutOfRange("initial timers exceed their reset bounds")

    horizon_ticks = max(1, round(horizon / grid.quantum))
    record_every = max(1, round(record_dt / grid.quantum))

    w = np.concatenate([initial.x, initial.eta, initial.zeta])
    n_x, n_eta = N * n, N * m
    propagator = _Propagator(sys.full_flow_operator, grid.quantum)

    z_reduced = None
    reduced_prop = None
    max_mismatch = 0.0
    if track_reduced:
        z_reduced = sys.reduced_state(initial.x, initial.eta, initial.zeta).copy()
        reduced_prop = _Propagator(sys.flow_matrix, grid.quantum)

    rec_t, rec_j, rec_dist = [], [], []
    rec_xd, rec_ed, rec_zd, rec_v, rec_trig = [], [], [], [], []
    jl_t, jl_j, jl_kind, jl_idx, jl_reset, jl_vpre, jl_vpost = [], [], [], [], [], [], []
    state_times, state_x = [], []

    t_ticks = 0
    j = 0
    last_record = None

    def split(vec):
        return vec[:n_x], vec[n_x:n_x + n_eta], vec[n_x + n_eta:]

    def derived_z(vec):
        xs, es, zs = split(vec)
        return sys.reduced_state(xs, es, zs)

    def record(trigger: str = "", force: bool = False):
        nonlocal last_record, max_mismatch
        key = (t_ticks, j)
        if not force and last_record == key:
            return
        last_record = key
        z = derived_z(w)
        if track_reduced:
            max_mismatch = max(max_mismatch, float(np.linalg.norm(z - z_reduced)))
        a = n * (N - 1)
        b = a + m * N
        t_now = t_ticks * grid.quantum
        rec_t.append(t_now)
        rec_j.append(j)
        rec_dist.append(float(np.linalg.norm(z)))
        rec_xd.append(float(np.linalg.norm(z[:a])))
        rec_ed.append(float(np.linalg.norm(z[a:b])))
        rec_zd.append(float(np.linalg.norm(z[b:])))
        if lyapunov is not None:
            rec_v.append(float(lyapunov.value(z, taus * grid.quantum, rhos * grid.quantum)))
        else:
            rec_v.append(float("nan"))
        rec_trig.append(trigger)

    def record_state():
        state_times.append(t_ticks * grid.quantum)
        state_x.append(w[:n_x].copy())

    def apply_jump(kind: str, idx0: int):
        """Apply jump for 0-based timer index idx0; returns (reset_ticks, label)."""
        nonlocal w, j, z_reduced
        t_now = t_ticks * grid.quantum
        xs, es, zs = split(w)
        v_pre = v_post = float("nan")
        if lyapunov is not None:
            z_pre = derived_z(w)
            v_pre = float(lyapunov.value(z_pre, taus * grid.quantum, rhos * grid.quantum))
        if kind == AGENT_TIMER:
            sums = sys.intra_output_sums(xs)[idx0]
            delta = None
            if noise is not None and noise.enabled:
                delta = np.asarray(noise.agent_signal(t_now, idx0 + 1), dtype=float)
                sums = sums + delta
            es[idx0 * m:(idx0 + 1) * m] = sums
            reset = _draw_reset(grid.t1[idx0], grid.t2[idx0], reset_policy, rng)
            taus[idx0] = reset
            if track_reduced:
                off = n * (N - 1) + idx0 * m
                z_reduced[off:off + m] = 0.0 if delta is None else delta
        else:
            sums = sys.inter_output_sums(xs)[idx0]
            mem = members[idx0]
            block = np.zeros((N, m))
            block[mem] = sums[mem]
            deltas = np.zeros((N, m))
            if noise is not None and noise.enabled:
                for p in np.flatnonzero(mem):
                    deltas[p] = np.asarray(noise.inter_signal(t_now, p + 1, idx0 + 1), dtype=float)
                block += deltas
            zs[idx0 * N * m:(idx0 + 1) * N * m] = block.reshape(-1)
            reset = _draw_reset(grid.t3[idx0], grid.t4[idx0], reset_policy, rng)
            rhos[idx0] = reset
            if track_reduced:
                off = n * (N - 1) + m * N + idx0 * N * m
                z_reduced[off:off + N * m] = deltas.reshape(-1)
        j += 1
        if lyapunov is not None:
            z_post = derived_z(w)
            v_post = float(lyapunov.value(z_post, taus * grid.quantum, rhos * grid.quantum))
        jl_t.append(t_now)
        jl_j.append(j)
        jl_kind.append(kind)
        jl_idx.append(idx0 + 1)
        jl_reset.append(reset * grid.quantum)
        jl_vpre.append(v_pre)
        jl_vpost.append(v_post)

    record()  # (0, 0) pre-jump state
    if record_x:
        record_state()

    while True:
        due_agents = np.flatnonzero(taus == 0)
        due_inters = np.flatnonzero(rhos == 0) if ms else np.array([], dtype=int)
        if due_agents.size or due_inters.size:
            if record_jump_scalars:
                record()  # pre-jump sample at (t, j)
            for idx0 in due_agents:
                apply_jump(AGENT_TIMER, int(idx0))
                if record_jump_scalars:
                    record(trigger=f"{AGENT_TIMER}:{idx0 + 1}")
            for idx0 in due_inters:
                apply_jump(INTER_TIMER, int(idx0))
                if record_jump_scalars:
                    record(trigger=f"{INTER_TIMER}:{idx0 + 1}")

        if t_ticks >= horizon_ticks:
            break

        dt = int(taus.min()) if N else horizon_ticks
        if ms:
            dt = min(dt, int(rhos.min()))
        ticks_to_record = record_every - (t_ticks % record_every)
        dt = min(dt, ticks_to_record, horizon_ticks - t_ticks)

        w = propagator.apply(w, dt)
        if track_reduced:
            z_reduced = reduced_prop.apply(z_reduced, dt)
        t_ticks += dt
        taus -= dt
        if ms:
            rhos -= dt

        if t_ticks % record_every == 0 or t_ticks == horizon_ticks:
            record()
            if record_x:
                record_state()

    record(force=False)  # final state (no-op if already recorded)

    samples = TraceSamples(
        t=np.array(rec_t), j=np.array(rec_j, dtype=np.int64), dist=np.array(rec_dist),
        norm_x_dis=np.array(rec_xd), norm_eta_err=np.array(rec_ed),
        norm_zeta_err=np.array(rec_zd), lyapunov=np.array(rec_v),
        trigger=np.array(rec_trig, dtype=object),
    )
    jumps = JumpLog(
        t=np.array(jl_t), j=np.array(jl_j, dtype=np.int64),
        kind=np.array(jl_kind, dtype=object), index=np.array(jl_idx, dtype=np.int64),
        reset_value=np.array(jl_reset), v_pre=np.array(jl_vpre), v_post=np.array(jl_vpost),
    )
    metadata = {
        "seed": seed,
        "horizon": horizon_ticks * grid.quantum,
        "reset_policy": reset_policy,
        "noise": bool(noise is not None and noise.enabled),
        "timer_quantum": grid.quantum,
        "n_agents": N,
        "n_inter": ms,
        "t_min": float(min(sys.gains.t1.min(), sys.gains.t3.min()) if ms else sys.gains.t1.min()),
        "t_max": float(max(sys.gains.t2.max(), sys.gains.t4.max()) if ms else sys.gains.t2.max()),
        "agent_jumps": int(sum(1 for k in jl_kind if k == AGENT_TIMER)),
        "inter_jumps": int(sum(1 for k in jl_kind if k == INTER_TIMER)),
    }
    return HybridTrace(
        samples=samples,
        jumps=jumps,
        metadata=metadata,
        state_times=np.array(state_times) if record_x else None,
        state_x=np.array(state_x) if record_x else None,
        reduced_mismatch=max_mismatch if track_reduced else None,
    )


# -- exports ------------------------------------------------------------

def trace_to_csv(trace: HybridTrace, path) -> None:
    """Sample rows with full decimal precision (17 significant digits)."""
    s = trace.samples
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,j,trigger,dist,lyapunov,norm_x_dis,norm_eta_err,norm_zeta_err\n")
        for i in range(len(s)):
            fh.write(
                f"{s.t[i]:.17g},{s.j[i]},{s.trigger[i]},{s.dist[i]:.17g},"
                f"{s.lyapunov[i]:.17g},{s.norm_x_dis[i]:.17g},"
                f"{s.norm_eta_err[i]:.17g},{s.norm_zeta_err[i]:.17g}\n"
            )


def jumps_to_csv(trace: HybridTrace, path) -> None:
    jl = trace.jumps
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,j,kind,index,reset_value,v_pre,v_post\n")
        for i in range(len(jl)):
            fh.write(
                f"{jl.t[i]:.17g},{jl.j[i]},{jl.kind[i]},{jl.index[i]},"
                f"{jl.reset_value[i]:.17g},{jl.v_pre[i]:.17g},{jl.v_post[i]:.17g}\n"
            )


def summary_to_json(trace: HybridTrace, path, extra: dict | None = None) -> None:
    data = trace.summary()
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
