"""Classical driven pendulum: trajectories, Poincare sections, map iteration, ensembles.

Equations of motion in rescaled time, with the drive folded into the
potential argument:

    theta' = p,   p' = -lam sin(theta - xi_d sin t)

The stepper is a second-order symplectic Strang splitting (half-kick, drift,
half-kick) with the time-dependent kick force evaluated at the step midpoint
time, so each step is palindromic and the stroboscopic map over one period
T = 2 pi is applied exactly identically every period.  Ensemble loops are
numba kernels; trajectories are independent and per-trajectory randomness
comes from counter-based streams keyed by (seed, trajectory index), so
results do not depend on execution order or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from numba import njit

from .errors import (
    ConvergenceError,
    IntegrationFailureError,
    InvalidParameterError,
)
from .params import TAU

__all__ = [
    "PhasePoint",
    "EnsembleSpec",
    "MomentumStats",
    "Histogram",
    "CrossingTrace",
    "GaussianCloudSampler",
    "ExplicitSampler",
    "coherent_cloud",
    "integrate",
    "poincare_section",
    "standard_map_iterate",
    "ensemble_momentum_stats",
    "momentum_histogram",
    "resonance_crossing_trace",
    "check_short_time_convergence",
]

DEFAULT_DT = TAU / 1000.0
MAX_DT = TAU / 200.0


@dataclass(frozen=True)
class PhasePoint:
    """A pendulum phase-space sample; theta is stored unwrapped."""

    theta: float
    p: float
    t: float = 0.0

    def __post_init__(self) -> None:
        for name in ("theta", "p", "t"):
            v = getattr(self, name)
            if not isinstance(v, (int, float, np.floating, np.integer)) or not math.isfinite(v):
                raise InvalidParameterError(f"PhasePoint.{name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))

    @property
    def theta_wrapped(self) -> float:
        return self.theta % TAU


class Sampler(Protocol):
    def sample(self, seed: int, n: int) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class GaussianCloudSampler:
    """Gaussian cloud of initial conditions around (theta0, p0).

    Draws use one counter-based stream per trajectory index, so trajectory i
    gets the same initial condition whatever the ensemble size or worker
    layout.
    """

    theta0: float
    p0: float
    sigma_theta: float
    sigma_p: float

    def __post_init__(self) -> None:
        if self.sigma_theta < 0 or self.sigma_p < 0:
            raise InvalidParameterError("cloud widths must be nonnegative")

    def sample(self, seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        theta = np.empty(n)
        p = np.empty(n)
        for i in range(n):
            rng = _trajectory_rng(seed, i)
            z = rng.standard_normal(2)
            theta[i] = self.theta0 + self.sigma_theta * z[0]
            p[i] = self.p0 + self.sigma_p * z[1]
        return theta, p


@dataclass(frozen=True)
class ExplicitSampler:
    """Fixed list of initial conditions; the ensemble size must match."""

    points: tuple

    def sample(self, seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        if n != len(self.points):
            raise InvalidParameterError(
                f"explicit sampler holds {len(self.points)} points, ensemble wants {n}"
            )
        theta = np.array([q.theta for q in self.points])
        p = np.array([q.p for q in self.points])
        return theta, p


def coherent_cloud(lam: float, hbar_eff: float, theta0: float = 0.0, p0: float = 0.0) -> GaussianCloudSampler:
    """Cloud with the phase-space footprint of the quantum ground coherent state.

    Sampling the Husimi density of a minimum-uncertainty state centered at
    (theta0, p0) gives sigma_theta^2 = hbar_eff/sqrt(lam) and
    sigma_p^2 = hbar_eff*sqrt(lam); this is how classical ensembles mirror
    the quantum initial state.
    """
    if lam <= 0 or hbar_eff <= 0:
        raise InvalidParameterError("coherent_cloud needs lam > 0 and hbar_eff > 0")
    return GaussianCloudSampler(
        theta0=theta0,
        p0=p0,
        sigma_theta=math.sqrt(hbar_eff / math.sqrt(lam)),
        sigma_p=math.sqrt(hbar_eff * math.sqrt(lam)),
    )


@dataclass(frozen=True)
class EnsembleSpec:
    n_traj: int
    seed: int
    sampler: Sampler

    def __post_init__(self) -> None:
        if isinstance(self.n_traj, bool) or not isinstance(self.n_traj, (int, np.integer)):
            raise InvalidParameterError("n_traj must be an integer")
        if self.n_traj < 1:
            raise InvalidParameterError(f"n_traj must be >= 1, got {self.n_traj}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise InvalidParameterError("seed must be an integer")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError("seed must fit in 64 bits")
        if not hasattr(self.sampler, "sample"):
            raise InvalidParameterError("sampler must provide sample(seed, n)")


@dataclass(frozen=True)
class MomentumStats:
    """Stroboscopic ensemble momentum statistics and the long-time average."""

    times: np.ndarray
    mean_p: np.ndarray
    std_p: np.ndarray
    sigma_bar: float


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray


@dataclass(frozen=True)
class CrossingTrace:
    """Fine-grained trajectory with the times where p crosses xi_d cos t."""

    trajectory: list
    crossing_times: np.ndarray
    crossing_p: np.ndarray


def _trajectory_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _validate_model(lam: float, xi_d: float) -> tuple[float, float]:
    lam = float(lam)
    xi_d = float(xi_d)
    if not math.isfinite(lam) or lam < 0:
        raise InvalidParameterError(f"lam must be finite and >= 0, got {lam}")
    if not math.isfinite(xi_d) or xi_d < 0:
        raise InvalidParameterError(f"xi_d must be finite and >= 0, got {xi_d}")
    return lam, xi_d


def _validate_dt(dt: float) -> float:
    dt = float(dt)
    if not (0.0 < dt <= MAX_DT):
        raise InvalidParameterError(f"dt must be in (0, T/200], got {dt}")
    return dt


def _steps_per_period(dt: float) -> int:
    spp = int(round(TAU / dt))
    if abs(spp * dt - TAU) > 1e-9 * TAU:
        raise InvalidParameterError("stroboscopic sampling needs dt dividing T = 2 pi")
    return spp


@njit(cache=True)
def _record_steps(theta0, p0, t0, lam, xi_d, dt, n_steps):  # pragma: no cover - jit
    thetas = np.empty(n_steps + 1)
    ps = np.empty(n_steps + 1)
    thetas[0] = theta0
    ps[0] = p0
    th = theta0
    pp = p0
    half = 0.5 * dt * lam
    for j in range(n_steps):
        drive = xi_d * math.sin(t0 + (j + 0.5) * dt)
        pp -= half * math.sin(th - drive)
        th += dt * pp
        pp -= half * math.sin(th - drive)
        thetas[j + 1] = th
        ps[j + 1] = pp
    return thetas, ps


@njit(cache=True)
def _strobe_ensemble(theta, p, t0, lam, xi_d, dt, spp, n_periods, rec_theta, rec_p):  # pragma: no cover - jit
    # rec_theta may have zero rows to skip angle recording
    drive = np.empty(spp)
    for s in range(spp):
        drive[s] = xi_d * math.sin(t0 + (s + 0.5) * dt)
    keep_theta = rec_theta.shape[0] > 0
    half = 0.5 * dt * lam
    for i in range(theta.size):
        th = theta[i]
        pp = p[i]
        rec_p[0, i] = pp
        if keep_theta:
            rec_theta[0, i] = th
        for k in range(n_periods):
            for s in range(spp):
                pp -= half * math.sin(th - drive[s])
                th += dt * pp
                pp -= half * math.sin(th - drive[s])
            rec_p[k + 1, i] = pp
            if keep_theta:
                rec_theta[k + 1, i] = th
        theta[i] = th
        p[i] = pp


def _first_invalid(*arrays: np.ndarray) -> int | None:
    """Index of the first row where any array goes non-finite, or None."""
    bad = None
    for arr in arrays:
        finite = np.isfinite(arr)
        if arr.ndim == 2:
            finite = finite.all(axis=1)
        nz = np.flatnonzero(~finite)
        if nz.size:
            bad = nz[0] if bad is None else min(bad, nz[0])
    return None if bad is None else int(bad)


def integrate(lam: float, xi_d: float, ic: PhasePoint, t_end: float, dt: float = DEFAULT_DT) -> list:
    """Integrate one trajectory from ic over a span t_end, sampled every dt.

    t_end must be a whole number of steps.  Returns n_steps + 1 phase points
    including the initial one; a non-finite state aborts with the last valid
    time attached.
    """
    lam, xi_d = _validate_model(lam, xi_d)
    dt = _validate_dt(dt)
    t_end = float(t_end)
    if t_end <= 0 or not math.isfinite(t_end):
        raise InvalidParameterError(f"t_end must be positive, got {t_end}")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(t_end, 1.0):
        raise InvalidParameterError("t_end must be a whole number of steps")
    thetas, ps = _record_steps(ic.theta, ic.p, ic.t, lam, xi_d, dt, n_steps)
    bad = _first_invalid(thetas, ps)
    if bad is not None:
        last_valid = ic.t + (bad - 1) * dt if bad > 0 else ic.t
        raise IntegrationFailureError(
            f"state became non-finite at t = {ic.t + bad * dt:.6g}", last_valid_time=last_valid
        )
    return [PhasePoint(thetas[j], ps[j], ic.t + j * dt) for j in range(n_steps + 1)]


def _run_strobes(
    lam: float,
    xi_d: float,
    theta: np.ndarray,
    p: np.ndarray,
    t0: float,
    n_periods: int,
    dt: float,
    keep_theta: bool,
) -> tuple[np.ndarray, np.ndarray]:
    dt = _validate_dt(dt)
    spp = _steps_per_period(dt)
    n = theta.size
    rec_p = np.empty((n_periods + 1, n))
    rec_theta = np.empty((n_periods + 1, n) if keep_theta else (0, n))
    _strobe_ensemble(theta.copy(), p.copy(), t0, lam, xi_d, dt, spp, n_periods, rec_theta, rec_p)
    bad = _first_invalid(rec_theta, rec_p)
    if bad is not None:
        last = t0 + (bad - 1) * TAU if bad > 0 else t0
        raise IntegrationFailureError(
            f"ensemble state became non-finite near period {bad}", last_valid_time=last
        )
    return rec_theta, rec_p


def poincare_section(
    lam: float,
    xi_d: float,
    ics: Sequence[PhasePoint],
    n_periods: int,
    dt: float = DEFAULT_DT,
) -> list:
    """Stroboscopic samples at t = t0 + n T, angles reported mod 2 pi.

    Points are ordered by (initial condition, period).  All initial
    conditions must share the same start time so a single drive phase grid
    applies.
    """
    lam, xi_d = _validate_model(lam, xi_d)
    if n_periods < 0:
        raise InvalidParameterError("n_periods must be >= 0")
    if not ics:
        raise InvalidParameterError("need at least one initial condition")
    t0 = ics[0].t
    if any(q.t != t0 for q in ics):
        raise InvalidParameterError("all section initial conditions must share a start time")
    theta = np.array([q.theta for q in ics])
    p = np.array([q.p for q in ics])
    if n_periods == 0:
        return [PhasePoint(q.theta % TAU, q.p, q.t) for q in ics]
    rec_theta, rec_p = _run_strobes(lam, xi_d, theta, p, t0, n_periods, dt, keep_theta=True)
    out = []
    for i in range(theta.size):
        for k in range(n_periods + 1):
            out.append(PhasePoint(rec_theta[k, i] % TAU, rec_p[k, i], t0 + k * TAU))
    return out


def standard_map_iterate(k: float, start: PhasePoint, n: int) -> list:
    """Iterate the kicked map p' = p - k sin theta, theta' = theta + T p'.

    Returns start plus n iterates, stamped at successive periods.
    """
    k = float(k)
    if not math.isfinite(k):
        raise InvalidParameterError("k must be finite")
    if n < 0:
        raise InvalidParameterError("n must be >= 0")
    out = [start]
    th, pp = start.theta, start.p
    for j in range(1, n + 1):
        pp = pp - k * math.sin(th)
        th = th + TAU * pp
        out.append(PhasePoint(th, pp, start.t + j * TAU))
    return out


def ensemble_momentum_stats(
    lam: float,
    xi_d: float,
    ens: EnsembleSpec,
    n_periods: int,
    dt: float = DEFAULT_DT,
    t0: float = 0.0,
) -> MomentumStats:
    """Stroboscopic ensemble mean/std of p, and sigma_bar averaged over the final 50%.

    sigma_bar is the time average of std_p over strobe indices
    n_periods//2 .. n_periods, the asymptotic window.
    """
    lam, xi_d = _validate_model(lam, xi_d)
    if n_periods < 1:
        raise InvalidParameterError("n_periods must be >= 1")
    theta, p = ens.sampler.sample(ens.seed, ens.n_traj)
    _, rec_p = _run_strobes(lam, xi_d, theta, p, t0, n_periods, dt, keep_theta=False)
    times = t0 + TAU * np.arange(n_periods + 1)
    mean_p = rec_p.mean(axis=1)
    std_p = rec_p.std(axis=1)
    sigma_bar = float(std_p[n_periods // 2 :].mean())
    return MomentumStats(times=times, mean_p=mean_p, std_p=std_p, sigma_bar=sigma_bar)


def momentum_histogram(
    lam: float,
    xi_d: float,
    ens: EnsembleSpec,
    t_snapshot: float,
    bins,
    dt: float = DEFAULT_DT,
) -> Histogram:
    """Probability-normalized histogram of p at a stroboscopic snapshot time."""
    lam, xi_d = _validate_model(lam, xi_d)
    n_periods = int(round(t_snapshot / TAU))
    if n_periods < 0 or abs(n_periods * TAU - t_snapshot) > 1e-9 * max(t_snapshot, 1.0):
        raise InvalidParameterError("t_snapshot must be a whole number of periods")
    theta, p = ens.sampler.sample(ens.seed, ens.n_traj)
    if n_periods > 0:
        _, rec_p = _run_strobes(lam, xi_d, theta, p, 0.0, n_periods, dt, keep_theta=False)
        p = rec_p[-1]
    counts, edges = np.histogram(p, bins=bins)
    total = counts.sum()
    if total == 0:
        raise InvalidParameterError("no ensemble point falls inside the histogram range")
    return Histogram(edges=edges, mass=counts / total)


def resonance_crossing_trace(
    lam: float,
    xi_d: float,
    ic: PhasePoint,
    n_periods: int,
    dt: float = DEFAULT_DT,
) -> CrossingTrace:
    """Trajectory with markers where p crosses the resonance line xi_d cos t.

    Crossing times come from linear interpolation of p - xi_d cos t between
    steps.  An undriven run has no resonance line, so no crossings are
    recorded.
    """
    lam, xi_d = _validate_model(lam, xi_d)
    if n_periods < 1:
        raise InvalidParameterError("n_periods must be >= 1")
    traj = integrate(lam, xi_d, ic, n_periods * TAU, dt)
    if xi_d == 0.0:
        return CrossingTrace(traj, np.empty(0), np.empty(0))
    t = ic.t + dt * np.arange(len(traj))
    p = np.array([q.p for q in traj])
    f = p - xi_d * np.cos(t)
    sign_change = np.flatnonzero((f[:-1] == 0.0) | (np.sign(f[:-1]) != np.sign(f[1:])))
    frac = np.where(
        f[sign_change + 1] != f[sign_change],
        f[sign_change] / (f[sign_change] - f[sign_change + 1]),
        0.0,
    )
    t_cross = t[sign_change] + frac * dt
    p_cross = p[sign_change] + frac * (p[sign_change + 1] - p[sign_change])
    return CrossingTrace(traj, t_cross, p_cross)


def check_short_time_convergence(
    lam: float,
    xi_d: float,
    theta: np.ndarray,
    p: np.ndarray,
    dt: float,
    t0: float = 0.0,
    n_periods: int = 2,
    subsample: float = 0.01,
    tol: float = 1e-4,
) -> None:
    """Step-halving check on a trajectory subsample, raising on disagreement.

    The comparison window is a couple of periods: inside it, halving the
    step moves each trajectory by O(dt^2), so ensemble mean/std of p must
    agree to tol.  Past the Lyapunov horizon trajectories at dt and dt/2
    decorrelate no matter how small dt is, which would only measure Monte
    Carlo noise, so short windows are the meaningful ones.
    """
    lam, xi_d = _validate_model(lam, xi_d)
    n = theta.size
    m = max(1, int(round(subsample * n)))
    stride = max(1, n // m)
    th_s = np.ascontiguousarray(theta[::stride])
    p_s = np.ascontiguousarray(p[::stride])
    _, coarse = _run_strobes(lam, xi_d, th_s, p_s, t0, n_periods, dt, keep_theta=False)
    _, fine = _run_strobes(lam, xi_d, th_s, p_s, t0, n_periods, dt / 2.0, keep_theta=False)
    d_mean = abs(coarse[-1].mean() - fine[-1].mean())
    d_std = abs(coarse[-1].std() - fine[-1].std())
    if d_mean > tol or d_std > tol:
        raise ConvergenceError(
            f"step-halving disagreement: |d mean_p| = {d_mean:.3e}, |d std_p| = {d_std:.3e} > {tol}"
        )
