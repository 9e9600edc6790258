"""Exponential-stability certificates for the hybrid consensus system.

A certificate consists of a decay constant sigma and symmetric positive
definite blocks (P1 for the disagreement coordinate, one m x m block per
agent estimator error, one mN x mN block per inter-cluster estimator error).
The estimator blocks are scaled by exp(sigma * timer), giving the
timer-dependent quadratic form

    V(xi) = z^T P(tau, rho) z,
    P(tau, rho)  = diag(P1, P2(tau), P3(rho)),
    Pdot(tau, rho) = -sigma * diag(0, P2(tau), P3(rho)).

V decays along flows iff  M(tau, rho) = F^T P + P F + Pdot  is negative
definite on the timer box.  Because exp(sigma w) is a convex combination of
its endpoint values with weights continuous in w, negative definiteness at
the two box corners (all timers zero; all timers at their maxima) already
implies it on the whole box, so certification reduces to two eigenvalue
tests.  The derived constants bound every solution:

    alpha1 ||z||^2 <= V <= alpha2 ||z||^2,   Vdot <= -(mu/alpha2) V,
    dist(t, j) <= kappa exp(-alpha (t+j)) dist(0, 0),

and, under bounded measurement noise injected at jumps, the ISS bound
    dist(t, j) <= max{2 kappa exp(-alpha (t+j)) dist(0,0), 2 kappa2 sup||delta||}.

The supremum mu over the timer box is estimated on a Latin-hypercube grid
(the sign of M is certified by the corner test; mu only scales constants,
and the estimate is reported as such).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .ensemble import EnsembleSystem
from .hybridsim import AGENT_TIMER, INTER_TIMER, HybridTrace, TimerOutOfRange


class CertificateError(ValueError):
    pass


class NotPositiveDefinite(CertificateError):
    pass


class NoCertificate(CertificateError):
    pass


class OmegaTooLarge(CertificateError):
    pass


class Infeasible(CertificateError):
    """Restricted-family search failed; carries the best margin found."""

    def __init__(self, message: str, best_margin: float, best_params=None):
        super().__init__(message)
        self.best_margin = best_margin
        self.best_params = best_params


@dataclass(frozen=True)
class CertificateParams:
    """Certificate data: decay constant, P blocks, and the split constant
    epsilon in (0, 1) used when trading continuous for hybrid time."""

    sigma: float
    p1: np.ndarray
    p2_blocks: np.ndarray    # (N, m, m)
    p3_blocks: np.ndarray    # (M*, mN, mN)
    epsilon: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "p1", np.atleast_2d(np.asarray(self.p1, dtype=float)))
        object.__setattr__(self, "p2_blocks", np.asarray(self.p2_blocks, dtype=float))
        object.__setattr__(self, "p3_blocks", np.asarray(self.p3_blocks, dtype=float))
        if not 0.0 < self.epsilon < 1.0:
            raise CertificateError("epsilon must lie strictly inside (0, 1)")
        if self.sigma <= 0:
            raise CertificateError("sigma must be positive")

    def require_positive_definite(self) -> None:
        for name, blocks in (("p1", self.p1[None]), ("p2", self.p2_blocks), ("p3", self.p3_blocks)):
            for k, block in enumerate(blocks):
                if np.abs(block - block.T).max() > 1e-10 * max(1.0, np.abs(block).max()):
                    raise NotPositiveDefinite(f"{name} block {k} is not symmetric")
                if block.size and np.linalg.eigvalsh(block).min() <= 0:
                    raise NotPositiveDefinite(f"{name} block {k} is not positive definite")

    def save(self, path) -> None:
        data = {
            "sigma": self.sigma,
            "epsilon": self.epsilon,
            "p1": self.p1.tolist(),
            "p2_blocks": self.p2_blocks.tolist(),
            "p3_blocks": self.p3_blocks.tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh)

    @classmethod
    def load(cls, path) -> "CertificateParams":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            sigma=float(data["sigma"]),
            p1=np.array(data["p1"]),
            p2_blocks=np.array(data["p2_blocks"]),
            p3_blocks=np.array(data["p3_blocks"]),
            epsilon=float(data.get("epsilon", 0.5)),
        )


class LyapunovEvaluator:
    """Fast block-diagonal evaluation of V(xi) = z^T P(tau, rho) z."""

    def __init__(self, sys: EnsembleSystem, params: CertificateParams):
        self.sys = sys
        self.params = params
        self.n_split = sys.plant.n * (sys.n_agents - 1)
        self.m = sys.plant.m
        self.block_zeta = sys.plant.m * sys.n_agents

    def value(self, z: np.ndarray, tau: np.ndarray, rho: np.ndarray) -> float:
        p = self.params
        a = self.n_split
        x_dis = z[:a]
        total = float(x_dis @ p.p1 @ x_dis)
        for k in range(self.sys.n_agents):
            blk = z[a + k * self.m: a + (k + 1) * self.m]
            total += math.exp(p.sigma * tau[k]) * float(blk @ p.p2_blocks[k] @ blk)
        b = a + self.m * self.sys.n_agents
        for r in range(self.sys.n_inter):
            blk = z[b + r * self.block_zeta: b + (r + 1) * self.block_zeta]
            total += math.exp(p.sigma * rho[r]) * float(blk @ p.p3_blocks[r] @ blk)
        return total


def _check_timers(sys: EnsembleSystem, tau: np.ndarray, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (sys.n_agents,))
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (sys.n_inter,))
    if np.any(tau < -1e-15) or np.any(tau > sys.gains.t2 + 1e-12):
        raise TimerOutOfRange("agent timers outside [0, t2]")
    if sys.n_inter and (np.any(rho < -1e-15) or np.any(rho > sys.gains.t4 + 1e-12)):
        raise TimerOutOfRange("inter-cluster timers outside [0, t4]")
    return tau, rho


def eval_P(sys: EnsembleSystem, params: CertificateParams, tau, rho):
    """P(tau, rho) and its flow derivative Pdot(tau, rho), both varrho x varrho."""
    tau, rho = _check_timers(sys, tau, rho)
    n, m = sys.plant.n, sys.plant.m
    N, ms = sys.n_agents, sys.n_inter
    a = n * (N - 1)
    varrho = sys.varrho
    p_mat = np.zeros((varrho, varrho))
    p_mat[:a, :a] = params.p1
    for k in range(N):
        lo = a + k * m
        p_mat[lo:lo + m, lo:lo + m] = params.p2_blocks[k] * math.exp(params.sigma * tau[k])
    b = a + m * N
    blk = m * N
    for r in range(ms):
        lo = b + r * blk
        p_mat[lo:lo + blk, lo:lo + blk] = params.p3_blocks[r] * math.exp(params.sigma * rho[r])
    p_dot = -params.sigma * p_mat
    p_dot[:a, :a] = 0.0
    return p_mat, p_dot


def eval_M(sys: EnsembleSystem, params: CertificateParams, tau, rho) -> np.ndarray:
    """M(tau, rho) = F^T P + P F + Pdot, symmetrized against roundoff skew."""
    p_mat, p_dot = eval_P(sys, params, tau, rho)
    f = sys.flow_matrix
    m_mat = f.T @ p_mat + p_mat @ f + p_dot
    return 0.5 * (m_mat + m_mat.T)


def convex_weight(sigma: float, w: float, t_end: float) -> float:
    """Endpoint weight gamma(w) = (e^{sigma w} - e^{sigma T}) / (1 - e^{sigma T});
    gamma(0) = 1 and gamma(T) = 0, so exp(sigma w) is the convex combination
    gamma * 1 + (1 - gamma) * e^{sigma T}."""
    return (math.exp(sigma * w) - math.exp(sigma * t_end)) / (1.0 - math.exp(sigma * t_end))


@dataclass
class CertificateReport:
    """Corner-test outcome and all derived stability constants."""

    corner_ok: tuple[bool, bool]
    corner_max_eigs: tuple[float, float]
    margin: float
    mu: float
    mu_is_estimate: bool
    grid_samples: int
    grid_max_eig: float
    alpha1: float
    alpha2: float
    kappa: float
    alpha: float
    p_max: float
    kappa2: float
    n_star: int
    t_min: float
    t_max: float
    sigma: float
    epsilon: float
    varrho: int
    f11_hurwitz: bool

    @property
    def certified(self) -> bool:
        return bool(self.corner_ok[0] and self.corner_ok[1])

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, tuple):
                out[key] = list(value)
            elif isinstance(value, (np.floating, np.integer)):
                out[key] = value.item()
            else:
                out[key] = value
        out["certified"] = self.certified
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _latin_hypercube(rng: np.random.Generator, count: int, dims: int) -> np.ndarray:
    """count x dims samples in [0,1]^dims, one per row/stratum per dimension."""
    u = rng.random((count, dims))
    out = np.empty_like(u)
    for d in range(dims):
        perm = rng.permutation(count)
        out[:, d] = (perm + u[:, d]) / count
    return out


def corner_check(
    sys: EnsembleSystem,
    params: CertificateParams,
    grid_samples: int = 1000,
    margin: float = 1e-9,
    seed: int = 0,
) -> CertificateReport:
    """Evaluate the two-corner negative-definiteness test and all constants.

    Corner failure is reported, not raised; NotPositiveDefinite is raised if
    a P block is invalid.  mu is the (conservative, sample-based) estimate of
    the supremum decay margin over the timer box.
    """
    params.require_positive_definite()
    t2, t4 = sys.gains.t2, sys.gains.t4
    zeros_tau = np.zeros(sys.n_agents)
    zeros_rho = np.zeros(sys.n_inter)

    eig_low = float(np.linalg.eigvalsh(eval_M(sys, params, zeros_tau, zeros_rho)).max())
    eig_high = float(np.linalg.eigvalsh(eval_M(sys, params, t2, t4)).max())
    corner_ok = (eig_low < -margin, eig_high < -margin)

    rng = np.random.default_rng(seed)
    dims = sys.n_agents + sys.n_inter
    unit = _latin_hypercube(rng, grid_samples, dims)
    upper = np.concatenate([t2, t4])
    grid_max = max(eig_low, eig_high)
    for row in unit:
        point = row * upper
        m_eig = float(np.linalg.eigvalsh(eval_M(sys, params, point[:sys.n_agents], point[sys.n_agents:])).max())
        grid_max = max(grid_max, m_eig)
    mu = -grid_max

    p_low, _ = eval_P(sys, params, zeros_tau, zeros_rho)
    p_high, _ = eval_P(sys, params, t2, t4)
    alpha1 = float(np.linalg.eigvalsh(p_low).min())
    alpha2 = float(np.linalg.eigvalsh(p_high).max())

    t_min = float(min(sys.gains.t1.min(), sys.gains.t3.min())) if sys.n_inter else float(sys.gains.t1.min())
    t_max = float(max(sys.gains.t2.max(), sys.gains.t4.max())) if sys.n_inter else float(sys.gains.t2.max())
    n_star = sys.n_agents + sys.n_inter

    eps = params.epsilon
    if mu > 0 and alpha1 > 0:
        kappa = math.sqrt((alpha2 / alpha1) * math.exp((1 - eps) * mu * t_min / alpha2))
        alpha = 0.5 * min(eps * mu / alpha2, (1 - eps) * mu * t_min / (alpha2 * n_star))
    else:
        kappa = float("nan")
        alpha = float("nan")

    p_max = 0.0
    for k in range(sys.n_agents):
        p_max = max(p_max, float(np.linalg.eigvalsh(params.p2_blocks[k]).max()) * math.exp(params.sigma * t2[k]))
    for r in range(sys.n_inter):
        p_max = max(p_max, float(np.linalg.eigvalsh(params.p3_blocks[r]).max()) * math.exp(params.sigma * t4[r]))

    if mu > 0 and alpha1 > 0:
        q = math.exp(-mu * t_min / alpha2)
        kappa2 = math.sqrt(p_max * n_star * (2.0 - q) / (alpha1 * (1.0 - q)))
    else:
        kappa2 = float("nan")

    f11_hurwitz = bool(np.max(np.linalg.eigvals(sys.f11).real) < 0)

    return CertificateReport(
        corner_ok=corner_ok,
        corner_max_eigs=(eig_low, eig_high),
        margin=-max(eig_low, eig_high),
        mu=mu,
        mu_is_estimate=True,
        grid_samples=grid_samples,
        grid_max_eig=grid_max,
        alpha1=alpha1,
        alpha2=alpha2,
        kappa=kappa,
        alpha=alpha,
        p_max=p_max,
        kappa2=kappa2,
        n_star=n_star,
        t_min=t_min,
        t_max=t_max,
        sigma=params.sigma,
        epsilon=eps,
        varrho=sys.varrho,
        f11_hurwitz=f11_hurwitz,
    )


@dataclass(frozen=True)
class FamilySpec:
    """Restricted certificate family searched by coordinate descent.

    P1 is a positive multiple of the Lyapunov-equation solution of the
    disagreement block (identity when that block is not Hurwitz); the
    estimator blocks are positive multiples of the identity.  The three
    log-scales are optimized one at a time on a shrinking grid.
    """

    sweeps: int = 4
    grid_points: int = 13
    log_range: tuple[float, float] = (-5.0, 5.0)
    epsilon: float = 0.5


def search_P(
    sys: EnsembleSystem,
    sigma: float,
    family: FamilySpec | None = None,
    margin: float = 1e-9,
) -> tuple[CertificateParams, CertificateReport]:
    """Search the restricted family for a certificate passing the corner test.

    Deterministic.  Raises Infeasible (with the best margin found) when the
    family contains no certificate for this system and sigma.
    """
    family = family or FamilySpec()
    n, m = sys.plant.n, sys.plant.m
    N, ms = sys.n_agents, sys.n_inter

    f11_hurwitz = bool(np.max(np.linalg.eigvals(sys.f11).real) < 0)
    if f11_hurwitz:
        p1_base = solve_continuous_lyapunov(sys.f11.T, -np.eye(sys.f11.shape[0]))
        p1_base = 0.5 * (p1_base + p1_base.T)
        if np.linalg.eigvalsh(p1_base).min() <= 0:
            p1_base = np.eye(sys.f11.shape[0])
    else:
        p1_base = np.eye(sys.f11.shape[0])

    def build(scales: np.ndarray) -> CertificateParams:
        s1, s2, s3 = 10.0 ** scales
        return CertificateParams(
            sigma=sigma,
            p1=s1 * p1_base,
            p2_blocks=np.broadcast_to(s2 * np.eye(m), (N, m, m)).copy(),
            p3_blocks=np.broadcast_to(s3 * np.eye(m * N), (ms, m * N, m * N)).copy(),
            epsilon=family.epsilon,
        )

    def objective(scales: np.ndarray) -> float:
        params = build(scales)
        zeros_tau = np.zeros(N)
        zeros_rho = np.zeros(ms)
        low = np.linalg.eigvalsh(eval_M(sys, params, zeros_tau, zeros_rho)).max()
        high = np.linalg.eigvalsh(eval_M(sys, params, sys.gains.t2, sys.gains.t4)).max()
        return float(max(low, high))

    scales = np.zeros(3)
    lo, hi = family.log_range
    best = objective(scales)
    for _ in range(family.sweeps):
        for coord in range(3):
            span_lo, span_hi = lo, hi
            for _ in range(4):  # shrink the 1-d grid around the best point
                candidates = np.linspace(span_lo, span_hi, family.grid_points)
                values = []
                for cand in candidates:
                    trial = scales.copy()
                    trial[coord] = cand
                    values.append(objective(trial))
                k = int(np.argmin(values))
                if values[k] < best:
                    best = values[k]
                    scales[coord] = candidates[k]
                step = candidates[1] - candidates[0]
                span_lo = scales[coord] - step
                span_hi = scales[coord] + step

    params = build(scales)
    report = corner_check(sys, params)
    if not report.certified:
        raise Infeasible(
            f"no certificate in the restricted family (best corner margin {-best:.3e}"
            f"{'' if f11_hurwitz else '; disagreement block not Hurwitz'})",
            best_margin=-best,
            best_params=params,
        )
    return params, report


# -- envelopes and trace checks ------------------------------------------

def ges_envelope(report: CertificateReport, initial_distance: float, t: float, j: float) -> float:
    """Exponential envelope kappa * exp(-alpha (t+j)) * initial distance."""
    if not report.certified:
        raise NoCertificate("corner test did not pass")
    return report.kappa * math.exp(-report.alpha * (t + j)) * initial_distance


def iss_envelope(
    report: CertificateReport, initial_distance: float, delta_sup: float, t: float, j: float
) -> float:
    """max of the doubled decay term and the noise floor 2 kappa2 sup||delta||."""
    if not report.certified:
        raise NoCertificate("corner test did not pass")
    decay = 2.0 * report.kappa * math.exp(-report.alpha * (t + j)) * initial_distance
    return max(decay, 2.0 * report.kappa2 * delta_sup)


def t_star(report: CertificateReport, initial_distance: float, omega: float) -> float:
    """Continuous time after which the distance is guaranteed below omega."""
    if not report.certified:
        raise NoCertificate("corner test did not pass")
    bound = math.sqrt(report.alpha2 / report.alpha1) * initial_distance
    if not 0.0 < omega < bound:
        raise OmegaTooLarge(f"omega must lie in (0, {bound:.6g})")
    return (2.0 * report.alpha2 / report.mu) * math.log(bound / omega)


def check_ges_envelope(trace: HybridTrace, report: CertificateReport) -> dict:
    """Verify every trace sample lies below the exponential envelope."""
    d0 = float(trace.samples.dist[0])
    env = report.kappa * np.exp(-report.alpha * (trace.samples.t + trace.samples.j)) * d0
    violations = int(np.sum(trace.samples.dist > env + 1e-12))
    ratio = trace.samples.dist / np.maximum(env, 1e-300)
    return {"violations": violations, "max_ratio": float(ratio.max()), "initial_distance": d0}


def check_iss_envelope(trace: HybridTrace, report: CertificateReport, delta_sup: float) -> dict:
    d0 = float(trace.samples.dist[0])
    decay = 2.0 * report.kappa * np.exp(-report.alpha * (trace.samples.t + trace.samples.j)) * d0
    env = np.maximum(decay, 2.0 * report.kappa2 * delta_sup)
    violations = int(np.sum(trace.samples.dist > env + 1e-12))
    ratio = trace.samples.dist / np.maximum(env, 1e-300)
    return {"violations": violations, "max_ratio": float(ratio.max()), "initial_distance": d0}


def check_hybrid_time_bounds(trace: HybridTrace) -> dict:
    """Check (j/(N+M*) - 1) T_min <= t <= (j/(N+M*)) T_max at every sample.

    Uses the trace metadata for N, M*, T_min, T_max.  Diagnostic: returns the
    violation count and worst slacks instead of raising.
    """
    meta = trace.metadata
    n_star = meta["n_agents"] + meta["n_inter"]
    t_min, t_max = meta["t_min"], meta["t_max"]
    t = trace.samples.t
    j = trace.samples.j
    lower = (j / n_star - 1.0) * t_min
    upper = (j / n_star) * t_max
    tol = 1e-9
    bad = (t < lower - tol) | (t > upper + tol)
    return {
        "passed": bool(not bad.any()),
        "violations": int(bad.sum()),
        "min_upper_slack": float((upper - t).min()) if len(t) else 0.0,
        "min_lower_slack": float((t - lower).min()) if len(t) else 0.0,
    }


def check_jump_gaps(trace: HybridTrace, gains) -> dict:
    """Per-timer inter-jump gaps lie inside the reset interval after the
    first reset of that timer."""
    jl = trace.jumps
    worst = 0.0
    violations = 0
    for kind, bounds in ((AGENT_TIMER, (gains.t1, gains.t2)), (INTER_TIMER, (gains.t3, gains.t4))):
        lo_arr, hi_arr = bounds
        for idx in range(1, lo_arr.size + 1):
            mask = (jl.kind == kind) & (jl.index == idx)
            times = jl.t[mask]
            if times.size < 2:
                continue
            gaps = np.diff(times)
            lo, hi = lo_arr[idx - 1], hi_arr[idx - 1]
            bad = (gaps < lo - 1e-9) | (gaps > hi + 1e-9)
            violations += int(bad.sum())
            if gaps.size:
                worst = max(worst, float(np.max(np.maximum(lo - gaps, gaps - hi))))
    return {"passed": violations == 0, "violations": violations, "worst_excess": worst}


def jump_series_bound_check(trace: HybridTrace, report: CertificateReport) -> dict:
    """Recompute the jump-accumulation series along the actual jump log and
    verify it never exceeds the closed-form geometric-series bound."""
    rate = report.mu / report.alpha2
    times = trace.jumps.t
    bound = report.n_star * (2.0 - math.exp(-rate * report.t_min)) / (1.0 - math.exp(-rate * report.t_min))
    worst = 0.0
    # running sum of exp(-rate (t_j - t_s)) over s <= j, updated incrementally
    running = 0.0
    prev_t = None
    for t_j in times:
        if prev_t is not None:
            running *= math.exp(-rate * (t_j - prev_t))
        running += 1.0
        prev_t = t_j
        worst = max(worst, running)
    return {"passed": worst <= bound + 1e-9, "max_series": worst, "bound": bound}
