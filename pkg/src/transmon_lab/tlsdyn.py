"""TLS noise spectroscopy on the strongly driven transmon.

A probe two-level system (TLS) couples to the transmon charge through
sigma_x, turning the transmon's chaotic charge dynamics into an effective
noise source.  Three drive models feed the same probe:

* the full coupled quantum evolution (transmon tensor TLS),
* the classical chaotic pendulum driving a semiclassical TLS,
* the reflected-Brownian-motion surrogate driving the same TLS.

From the resulting Bloch-vector traces this module extracts relaxation
rates, dephasing envelopes, and the long-time plateau of <sigma_z> that the
quantum model alone develops, via the Floquet decomposition of the coupled
system.

Conventions: the TLS basis is ordered (|g>, |e>) with sigma_z = diag(-1, +1),
so theta = 0 initializes the excited state and <sigma_z> starts at +1.  All
times are rescaled (drive period T = 2*pi); rates are per rescaled time.
Ensembles average in fixed index order, and every stochastic unit derives
its own counter-based stream from (seed, unit index), so results do not
depend on chunking or worker layout.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import (
    AccuracyError,
    EmptyLayerError,
    InsufficientDataError,
    InvalidParameterError,
)
from .params import TAU, ModelParams
from .pendulum import coherent_cloud
from .qtransmon import (
    TransmonBasis,
    build_basis,
    period_step_kernels,
    propagator_modes,
)
from .rbm import NoisePath, RbmParams, fold
from .records import TimeSeriesRecord

__all__ = [
    "TlsInit",
    "DecayFit",
    "PlateauEstimate",
    "evolve_coupled_quantum",
    "evolve_semiclassical",
    "classical_tls_ensemble",
    "rbm_tls_ensemble",
    "extract_rate",
    "upper_envelope",
    "plateau_floquet",
    "coupled_period_propagator",
    "ipr",
    "is_drive_resonant",
]

MIN_DRIVE_STEPS_PER_PERIOD = 50
DEFAULT_CLASSICAL_STEPS = 1000
DEFAULT_ENSEMBLE_SIZE = 5000
MIN_RATE_POINTS = 20
RATE_FLOOR = 1e-6
_TRAJ_CHUNK = 1000
_PATH_CHUNK = 128

# TLS drive frequencies within this margin of a harmonic of the transmon
# drive hybridize resonantly instead of relaxing at the golden-rule rate.
RESONANT_HARMONICS = (0.5, 1.0, 1.5, 2.0)


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class TlsInit:
    """Bloch-sphere initialization sin(theta/2)|g> + e^{i phi} cos(theta/2)|e>.

    theta = 0 is the excited state |e>, theta = pi the ground state |g>;
    phi fixes the equatorial phase of superpositions.
    """

    theta: float
    phi: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi) or not math.isfinite(self.theta):
            raise InvalidParameterError(
                f"theta must lie in [0, pi], got {self.theta}"
            )
        if not (0.0 <= self.phi < TAU) or not math.isfinite(self.phi):
            raise InvalidParameterError(
                f"phi must lie in [0, 2*pi), got {self.phi}"
            )

    @property
    def amplitudes(self) -> tuple:
        """(c_g, c_e) amplitudes of the initial TLS state."""
        return (
            complex(math.sin(0.5 * self.theta)),
            cmath.exp(1j * self.phi) * math.cos(0.5 * self.theta),
        )


@dataclass(frozen=True)
class DecayFit:
    """Exponential-decay regression of a stroboscopic |<sigma_z>| trace."""

    rate: float
    intercept: float
    r_squared: float
    window: int

    def __post_init__(self):
        if self.window < MIN_RATE_POINTS:
            raise InvalidParameterError(
                f"window of {self.window} points is below the minimum "
                f"{MIN_RATE_POINTS}"
            )


@dataclass(frozen=True)
class PlateauEstimate:
    """Long-time <sigma_z> plateau estimates from coupled Floquet modes.

    ``z_ss_dressed2`` is the diagonal Floquet sum over all modes (the exact
    infinite-time average of the dephased dynamics); ``z_ss_l_alpha``
    restricts it to chaotic modes through the overlap weights l_alpha;
    ``z_ss_uniform`` replaces the overlaps by the uniform 1/N_ch estimate;
    ``z_ss_var`` is the variance-form prediction sum_a z_a^2 / (2 N_ch) with
    N_ch the transmon-side chaotic count (initialization-independent; equals
    the uniform estimate at theta = 0).  ``n_chaotic`` counts coupled
    chaotic modes (mean over offset charges).
    """

    z_ss_dressed2: float
    z_ss_l_alpha: float
    z_ss_uniform: float
    z_ss_var: float
    n_chaotic: float

    def __post_init__(self):
        for name in ("z_ss_dressed2", "z_ss_l_alpha", "z_ss_uniform", "z_ss_var"):
            val = getattr(self, name)
            if not math.isfinite(val) or abs(val) > 1.0 + 1e-9:
                raise InvalidParameterError(
                    f"{name}={val!r} outside the physical range [-1, 1]"
                )
        if self.n_chaotic <= 0:
            raise InvalidParameterError(
                f"n_chaotic must be positive, got {self.n_chaotic}"
            )


def is_drive_resonant(omega_q_t: float, margin: float = 0.02) -> bool:
    """True when the TLS frequency sits within ``margin`` of a drive harmonic.

    Near omega_q_t in {1/2, 1, 3/2, 2} the TLS exchanges energy coherently
    with the drive and rate extraction is not meaningful; sweeps use this
    flag to exclude those points.
    """
    if omega_q_t < 0 or not math.isfinite(omega_q_t):
        raise InvalidParameterError(f"omega_q_t must be >= 0, got {omega_q_t}")
    if margin <= 0 or not math.isfinite(margin):
        raise InvalidParameterError(f"margin must be positive, got {margin}")
    return any(abs(omega_q_t - h) <= margin for h in RESONANT_HARMONICS)


# ---------------------------------------------------------------------------
# Coupled quantum evolution

class _CoupledStepper:
    """Strang steps for the transmon-TLS system in the retained subspace.

    Each period step is exp(-i dt/2 C) * S_m * exp(-i dt/2 C) where S_m is
    the transmon midpoint kernel of step m (shared with the bare Floquet
    construction) and C = (omega_q_t/2) sigma_z + g_t * p_d sigma_x couples
    the TLS to the projected charge operator.  Coupled vectors are flat
    (2d,) arrays laid out [g-block; e-block].
    """

    def __init__(self, params: ModelParams, basis: TransmonBasis,
                 n_steps: int):
        d = basis.d
        self.d = d
        self.n_steps = n_steps
        self.dt = TAU / n_steps
        self.kernels = period_step_kernels(params, basis, n_steps)
        B = basis.transform
        charges = basis.parent.charges
        p_d = params.hbar_eff * (B.T @ (charges[:, None] * B))
        p_d = 0.5 * (p_d + p_d.T)
        C = np.zeros((2 * d, 2 * d))
        C[:d, :d] = -0.5 * params.omega_q_t * np.eye(d)
        C[d:, d:] = +0.5 * params.omega_q_t * np.eye(d)
        C[:d, d:] = params.g_t * p_d
        C[d:, :d] = params.g_t * p_d
        w, V = np.linalg.eigh(C)
        self.c_half = (V * np.exp(-0.5j * w * self.dt)) @ V.T
        self.c_full = (V * np.exp(-1.0j * w * self.dt)) @ V.T

    def _apply_transmon(self, m: int, block: np.ndarray) -> np.ndarray:
        """Apply kernel m to the transmon factor of (2d, k) or (2d,) data."""
        flat = block.ndim == 1
        cols = 1 if flat else block.shape[1]
        pages = block.reshape(2, self.d, cols)
        out = np.matmul(self.kernels[m], pages)
        return out.reshape(2 * self.d) if flat else out.reshape(2 * self.d, cols)

    def u_period(self) -> np.ndarray:
        """One-period propagator of the coupled system, (2d, 2d)."""
        U = self._apply_transmon(0, self.c_half.copy())
        for m in range(1, self.n_steps):
            U = self._apply_transmon(m, self.c_full @ U)
        return self.c_half @ U

    def evolve_sampled(self, y: np.ndarray, n_periods: int,
                       stride: int) -> np.ndarray:
        """Step a state vector, recording every ``stride`` sub-steps.

        Returns shape (n_periods*n_steps//stride + 1, 2d) including t=0.
        """
        n_rows = n_periods * self.n_steps // stride + 1
        out = np.empty((n_rows, 2 * self.d), dtype=np.complex128)
        out[0] = y
        row = 1
        for k in range(n_periods):
            for m in range(self.n_steps):
                y = self.c_half @ y
                y = self._apply_transmon(m, y)
                y = self.c_half @ y
                if (k * self.n_steps + m + 1) % stride == 0:
                    out[row] = y
                    row += 1
            y /= np.linalg.norm(y)
        return out


def coupled_period_propagator(
    params: ModelParams,
    basis: TransmonBasis,
    n_steps: int = 512,
) -> np.ndarray:
    """One-period propagator of the transmon-TLS system over the subspace.

    Layout: flat (2d, 2d) over [g-block; e-block] coupled vectors.  At
    g_t = 0 it factorizes into the TLS phase rotation and the bare transmon
    propagator, which is how the reference basis for chaotic-mode selection
    is defined.
    """
    _validate_coupling(params)
    n_steps = _validate_steps(n_steps)
    return _CoupledStepper(params, basis, n_steps).u_period()


def _validate_coupling(params: ModelParams) -> None:
    if params.omega_q_t <= 0:
        raise InvalidParameterError(
            f"coupled evolution needs omega_q_t > 0, got {params.omega_q_t}"
        )


def _validate_steps(n_steps: int) -> int:
    if isinstance(n_steps, bool) or not isinstance(n_steps, (int, np.integer)):
        raise InvalidParameterError(f"n_steps must be an integer, got {n_steps!r}")
    n_steps = int(n_steps)
    if n_steps < 4:
        raise InvalidParameterError(f"n_steps must be >= 4, got {n_steps}")
    return n_steps


def _validate_n_g_list(n_g_list) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(n_g_list, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0 or np.any(~np.isfinite(arr)):
        raise InvalidParameterError("n_g_list must be a nonempty list of finite values")
    return arr


def _bloch_columns(states: np.ndarray, d: int) -> np.ndarray:
    """(rows, 2d) coupled amplitudes -> (rows, 3) of <sz>, <sx>, <sy>."""
    g = states[:, :d]
    e = states[:, d:]
    norm_g = np.einsum("ij,ij->i", g.conj(), g).real
    norm_e = np.einsum("ij,ij->i", e.conj(), e).real
    cross = np.einsum("ij,ij->i", g.conj(), e)
    total = norm_g + norm_e
    return np.column_stack([
        (norm_e - norm_g) / total,
        2.0 * cross.real / total,
        2.0 * cross.imag / total,
    ])


def evolve_coupled_quantum(
    params: ModelParams,
    basis: TransmonBasis,
    tls: TlsInit,
    n_g_list,
    n_periods: int,
    samples_per_period: int = 1,
    n_steps: int = 512,
) -> TimeSeriesRecord:
    """Bloch-vector trace of the TLS coupled to the driven transmon.

    The transmon starts in its ground state, the TLS in ``tls``; the joint
    state evolves under the drive plus the sigma_x charge coupling, and the
    three Pauli expectations are averaged over ``n_g_list`` offset charges.
    ``basis`` fixes the truncation sizes (D, d); the retained basis itself is
    rebuilt per offset charge.  With ``samples_per_period`` = 1 only strobes
    are recorded and the run uses repeated applications of the one-period
    propagator; larger values record inside the period as well.
    """
    _validate_coupling(params)
    n_steps = _validate_steps(n_steps)
    n_gs = _validate_n_g_list(n_g_list)
    if n_periods < 1:
        raise InvalidParameterError(f"n_periods must be >= 1, got {n_periods}")
    if samples_per_period < 1 or n_steps % samples_per_period != 0:
        raise InvalidParameterError(
            f"samples_per_period={samples_per_period} must divide n_steps={n_steps}"
        )
    D = basis.parent.D
    d = basis.d
    c_g, c_e = tls.amplitudes
    n_rows = n_periods * samples_per_period + 1
    acc = np.zeros((n_rows, 3))
    for ng in n_gs:
        local = params.replace(n_g=float(ng))
        local_basis = build_basis(local, D, d)
        stepper = _CoupledStepper(local, local_basis, n_steps)
        y0 = np.zeros(2 * d, dtype=np.complex128)
        y0[0] = c_g
        y0[d] = c_e
        if samples_per_period == 1:
            U = stepper.u_period()
            states = np.empty((n_rows, 2 * d), dtype=np.complex128)
            states[0] = y0
            y = y0
            for k in range(1, n_rows):
                y = U @ y
                y /= np.linalg.norm(y)
                states[k] = y
        else:
            stride = n_steps // samples_per_period
            states = stepper.evolve_sampled(y0, n_periods, stride)
        acc += _bloch_columns(states, d)
    acc /= n_gs.size
    times = np.arange(n_rows) * (TAU / samples_per_period)
    return TimeSeriesRecord(
        times=times,
        columns=("sz", "sx", "sy"),
        values=acc,
        meta={
            "model": "quantum",
            "lam": params.lam,
            "xi_d": params.xi_d,
            "hbar_eff": params.hbar_eff,
            "omega_q_t": params.omega_q_t,
            "g_t": params.g_t,
            "theta": tls.theta,
            "phi": tls.phi,
            "D": D,
            "d": d,
            "n_steps": n_steps,
            "n_g_count": int(n_gs.size),
            "samples_per_period": samples_per_period,
        },
    )


# ---------------------------------------------------------------------------
# Semiclassical TLS under a supplied momentum signal

def _drive_grid(drive) -> tuple:
    """Extract (times, values) from a noise path, trajectory, or array pair.

    Accepts a NoisePath, any object with ``times``/``values`` arrays, a
    sequence of pendulum phase points (``t``/``p`` attributes), or a plain
    (times, values) pair.
    """
    if isinstance(drive, NoisePath):
        times, values = drive.times, drive.values
    elif hasattr(drive, "times") and hasattr(drive, "values"):
        times, values = drive.times, np.asarray(drive.values).ravel()
    elif (isinstance(drive, (list, tuple)) and drive
          and hasattr(drive[0], "t") and hasattr(drive[0], "p")):
        times = np.array([pt.t for pt in drive])
        values = np.array([pt.p for pt in drive])
    else:
        try:
            times, values = drive
        except (TypeError, ValueError):
            raise InvalidParameterError(
                "drive must be a NoisePath, an object with times/values, "
                "a sequence of phase points, or a (times, values) pair"
            ) from None
    times = np.ascontiguousarray(times, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if times.ndim != 1 or times.size < 2 or times.shape != values.shape:
        raise InvalidParameterError(
            "drive grid needs matching 1-D times and values with >= 2 samples"
        )
    steps = np.diff(times)
    dt = steps[0]
    if dt <= 0 or np.any(np.abs(steps - dt) > 1e-9 * dt):
        raise InvalidParameterError("drive times must be a uniform increasing grid")
    if dt > TAU / MIN_DRIVE_STEPS_PER_PERIOD + 1e-12:
        raise AccuracyError(
            f"drive grid spacing {dt:.3e} is coarser than T/"
            f"{MIN_DRIVE_STEPS_PER_PERIOD}; the piecewise-constant "
            "approximation would not resolve the TLS precession"
        )
    return times, values, float(dt)


def _rotation_coefficients(half_omega: float, b: np.ndarray, dt: float):
    """Exact 2x2 propagator pieces for H = half_omega*sigma_z + b*sigma_x."""
    r = np.hypot(half_omega, b)
    ang = r * dt
    cos_t = np.cos(ang)
    sinc = np.where(r > 0.0, np.sin(ang) / np.where(r > 0.0, r, 1.0), dt)
    return cos_t, half_omega * sinc, b * sinc


def _rotate(cg, ce, cos_t, az, bz):
    """One exact TLS step; az, bz are the sigma_z / sigma_x sine terms."""
    new_g = (cos_t + 1j * az) * cg - 1j * bz * ce
    new_e = (cos_t - 1j * az) * ce - 1j * bz * cg
    return new_g, new_e


def evolve_semiclassical(
    omega_q_t: float,
    g_t: float,
    drive,
    tls: TlsInit,
    sample_stride: int = 1,
) -> TimeSeriesRecord:
    """Semiclassical TLS trace along one supplied momentum signal.

    Integrates i d|psi>/dt = [(omega_q_t/2) sigma_z + g_t p(t) sigma_x] |psi>
    with p piecewise-constant on the drive grid (the left sample on each
    interval) and one exact 2x2 exponential per interval.  The trace is
    recorded every ``sample_stride`` grid points.  Ensemble averages over
    drives are built by :func:`classical_tls_ensemble` and
    :func:`rbm_tls_ensemble`.
    """
    if omega_q_t < 0 or not math.isfinite(omega_q_t):
        raise InvalidParameterError(f"omega_q_t must be >= 0, got {omega_q_t}")
    if not math.isfinite(g_t):
        raise InvalidParameterError(f"g_t must be finite, got {g_t}")
    if sample_stride < 1:
        raise InvalidParameterError(f"sample_stride must be >= 1, got {sample_stride}")
    times, values, dt = _drive_grid(drive)
    n_steps = times.size - 1
    half_omega = 0.5 * omega_q_t
    cg, ce = tls.amplitudes
    cos_t, az, bz = _rotation_coefficients(half_omega, g_t * values[:-1], dt)
    keep = np.arange(0, n_steps + 1, sample_stride)
    out = np.empty((keep.size, 3))
    row = 0
    for j in range(n_steps + 1):
        if j == keep[min(row, keep.size - 1)] and row < keep.size:
            ov = np.conj(cg) * ce
            out[row] = (abs(ce) ** 2 - abs(cg) ** 2, 2 * ov.real, 2 * ov.imag)
            row += 1
        if j < n_steps:
            cg, ce = _rotate(cg, ce, cos_t[j], az[j], bz[j])
    return TimeSeriesRecord(
        times=times[keep],
        columns=("sz", "sx", "sy"),
        values=out,
        meta={
            "model": "semiclassical",
            "omega_q_t": omega_q_t,
            "g_t": g_t,
            "theta": tls.theta,
            "phi": tls.phi,
            "dt": dt,
            "sample_stride": sample_stride,
        },
    )


# ---------------------------------------------------------------------------
# Classical-pendulum ensemble (fused trajectory + TLS kernel)

@njit(cache=True)
def _pendulum_tls_chunk(theta, p, lam, xi_d, dt, spp, n_periods,
                        half_omega, g_t, stride, cg0, ce0, out):  # pragma: no cover - jit
    drive = np.empty(spp)
    for s in range(spp):
        drive[s] = xi_d * math.sin((s + 0.5) * dt)
    half = 0.5 * dt * lam
    for i in range(theta.size):
        th = theta[i]
        pp = p[i]
        cg = cg0
        ce = ce0
        ov = cg.conjugate() * ce
        out[i, 0, 0] = (ce.real * ce.real + ce.imag * ce.imag
                        - cg.real * cg.real - cg.imag * cg.imag)
        out[i, 0, 1] = 2.0 * ov.real
        out[i, 0, 2] = 2.0 * ov.imag
        row = 1
        step = 0
        for _ in range(n_periods):
            for s in range(spp):
                pp -= half * math.sin(th - drive[s])
                th += dt * pp
                # half-step momentum = the midpoint sample of p(t) this step
                b = g_t * pp
                r = math.sqrt(half_omega * half_omega + b * b)
                ang = r * dt
                cos_t = math.cos(ang)
                sinc = math.sin(ang) / r if r > 0.0 else dt
                az = half_omega * sinc
                bz = b * sinc
                new_g = (cos_t + 1j * az) * cg - 1j * bz * ce
                new_e = (cos_t - 1j * az) * ce - 1j * bz * cg
                cg = new_g
                ce = new_e
                pp -= half * math.sin(th - drive[s])
                step += 1
                if step % stride == 0:
                    ov = cg.conjugate() * ce
                    out[i, row, 0] = (ce.real * ce.real + ce.imag * ce.imag
                                      - cg.real * cg.real - cg.imag * cg.imag)
                    out[i, row, 1] = 2.0 * ov.real
                    out[i, row, 2] = 2.0 * ov.imag
                    row += 1


def classical_tls_ensemble(
    params: ModelParams,
    tls: TlsInit,
    n_periods: int,
    n_traj: int = DEFAULT_ENSEMBLE_SIZE,
    seed: int = 0,
    samples_per_period: int = 1,
    steps_per_period: int = DEFAULT_CLASSICAL_STEPS,
) -> TimeSeriesRecord:
    """Ensemble-averaged TLS trace driven by classical pendulum momenta.

    Initial conditions are sampled from the phase-space footprint of the
    quantum ground state; each trajectory is integrated with the symplectic
    pendulum step and the TLS is rotated once per step with the half-step
    (midpoint) momentum, fusing trajectory generation and TLS evolution so
    no momentum signal is ever stored.  Trajectory i derives its own draw
    stream from (seed, i); partial sums accumulate in fixed chunk order.
    """
    _require_tls_run_args(n_periods, n_traj, samples_per_period)
    if steps_per_period < MIN_DRIVE_STEPS_PER_PERIOD:
        raise AccuracyError(
            f"steps_per_period={steps_per_period} is coarser than T/"
            f"{MIN_DRIVE_STEPS_PER_PERIOD}; the piecewise-constant "
            "momentum would not resolve the TLS precession"
        )
    if steps_per_period % samples_per_period != 0:
        raise InvalidParameterError(
            f"samples_per_period={samples_per_period} must divide "
            f"steps_per_period={steps_per_period}"
        )
    dt = TAU / steps_per_period
    stride = steps_per_period // samples_per_period
    cloud = coherent_cloud(params.lam, params.hbar_eff)
    theta0, p0 = cloud.sample(seed, n_traj)
    cg0, ce0 = tls.amplitudes
    n_rows = n_periods * samples_per_period + 1
    total = np.zeros((n_rows, 3))
    for lo in range(0, n_traj, _TRAJ_CHUNK):
        hi = min(lo + _TRAJ_CHUNK, n_traj)
        out = np.empty((hi - lo, n_rows, 3))
        _pendulum_tls_chunk(
            theta0[lo:hi], p0[lo:hi], params.lam, params.xi_d, dt,
            steps_per_period, n_periods, 0.5 * params.omega_q_t,
            params.g_t, stride, cg0, ce0, out,
        )
        total += out.sum(axis=0)
    total /= n_traj
    times = np.arange(n_rows) * (TAU / samples_per_period)
    return TimeSeriesRecord(
        times=times,
        columns=("sz", "sx", "sy"),
        values=total,
        meta={
            "model": "classical",
            "lam": params.lam,
            "xi_d": params.xi_d,
            "hbar_eff": params.hbar_eff,
            "omega_q_t": params.omega_q_t,
            "g_t": params.g_t,
            "theta": tls.theta,
            "phi": tls.phi,
            "n_traj": n_traj,
            "seed": int(seed),
            "steps_per_period": steps_per_period,
            "samples_per_period": samples_per_period,
        },
    )


def _require_tls_run_args(n_periods: int, n_units: int,
                          samples_per_period: int) -> None:
    if n_periods < 1:
        raise InvalidParameterError(f"n_periods must be >= 1, got {n_periods}")
    if n_units < 1:
        raise InvalidParameterError(f"ensemble size must be >= 1, got {n_units}")
    if samples_per_period < 1:
        raise InvalidParameterError(
            f"samples_per_period must be >= 1, got {samples_per_period}"
        )


# ---------------------------------------------------------------------------
# RBM-driven ensemble

def _path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one stochastic unit; layout-independent."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def rbm_tls_ensemble(
    omega_q_t: float,
    g_t: float,
    noise: RbmParams,
    tls: TlsInit,
    n_periods: int,
    n_paths: int = 2000,
    seed: int = 0,
    samples_per_period: int = 1,
    initial_p: float | None = 0.0,
) -> TimeSeriesRecord:
    """Ensemble-averaged TLS trace driven by reflected-Brownian momenta.

    Each path starts at ``initial_p`` (default 0, the center of the
    ground-state phase-space footprint; pass None for a draw from the
    stationary uniform law) and accumulates Gaussian increments folded at
    the walls; the TLS rotates with the left-point momentum on each grid
    interval, matching :func:`evolve_semiclassical`.  Path i derives its
    stream from (seed, i); reductions run in fixed chunk order.
    """
    if omega_q_t < 0 or not math.isfinite(omega_q_t):
        raise InvalidParameterError(f"omega_q_t must be >= 0, got {omega_q_t}")
    if not math.isfinite(g_t):
        raise InvalidParameterError(f"g_t must be finite, got {g_t}")
    if initial_p is not None and (
        not math.isfinite(initial_p) or abs(initial_p) > noise.p_bar
    ):
        raise InvalidParameterError(
            f"initial_p={initial_p!r} must lie within [-p_bar, p_bar]"
        )
    _require_tls_run_args(n_periods, n_paths, samples_per_period)
    steps_float = TAU / noise.dt
    steps_per_period = int(round(steps_float))
    if abs(steps_float - steps_per_period) > 1e-9 * steps_per_period:
        raise InvalidParameterError(
            f"noise dt={noise.dt!r} must divide the drive period"
        )
    if steps_per_period < MIN_DRIVE_STEPS_PER_PERIOD:
        raise AccuracyError(
            f"noise dt={noise.dt:.3e} is coarser than T/"
            f"{MIN_DRIVE_STEPS_PER_PERIOD}; the piecewise-constant "
            "momentum would not resolve the TLS precession"
        )
    if steps_per_period % samples_per_period != 0:
        raise InvalidParameterError(
            f"samples_per_period={samples_per_period} must divide "
            f"steps_per_period={steps_per_period}"
        )
    stride = steps_per_period // samples_per_period
    n_steps = n_periods * steps_per_period
    half_omega = 0.5 * omega_q_t
    sigma = math.sqrt(noise.D * noise.dt)
    cg0, ce0 = tls.amplitudes
    n_rows = n_periods * samples_per_period + 1
    total = np.zeros((n_rows, 3))
    sample_steps = np.arange(0, n_steps + 1, stride)
    for lo in range(0, n_paths, _PATH_CHUNK):
        hi = min(lo + _PATH_CHUNK, n_paths)
        width = hi - lo
        r = np.empty((width, n_steps + 1))
        for k in range(width):
            rng = _path_rng(seed, lo + k)
            if initial_p is None:
                r[k, 0] = rng.uniform(-noise.p_bar, noise.p_bar)
            else:
                r[k, 0] = initial_p
            np.cumsum(rng.normal(0.0, sigma, n_steps), out=r[k, 1:])
            r[k, 1:] += r[k, 0]
        p = fold(r, noise.p_bar)
        cg = np.full(width, cg0, dtype=np.complex128)
        ce = np.full(width, ce0, dtype=np.complex128)
        chunk_rows = np.empty((n_rows, width, 3))
        row = 0
        for j in range(n_steps + 1):
            if row < n_rows and j == sample_steps[row]:
                ov = np.conj(cg) * ce
                chunk_rows[row, :, 0] = np.abs(ce) ** 2 - np.abs(cg) ** 2
                chunk_rows[row, :, 1] = 2.0 * ov.real
                chunk_rows[row, :, 2] = 2.0 * ov.imag
                row += 1
            if j < n_steps:
                cos_t, az, bz = _rotation_coefficients(
                    half_omega, g_t * p[:, j], noise.dt
                )
                cg, ce = _rotate(cg, ce, cos_t, az, bz)
        total += chunk_rows.sum(axis=1)
    total /= n_paths
    times = np.arange(n_rows) * (TAU / samples_per_period)
    return TimeSeriesRecord(
        times=times,
        columns=("sz", "sx", "sy"),
        values=total,
        meta={
            "model": "rbm",
            "omega_q_t": omega_q_t,
            "g_t": g_t,
            "theta": tls.theta,
            "phi": tls.phi,
            "D": noise.D,
            "p_bar": noise.p_bar,
            "dt": noise.dt,
            "n_paths": n_paths,
            "seed": int(seed),
            "samples_per_period": samples_per_period,
            "initial_p": "stationary" if initial_p is None else float(initial_p),
        },
    )


# ---------------------------------------------------------------------------
# Rate extraction and envelopes

def extract_rate(
    trace: TimeSeriesRecord,
    n_periods: int = 200,
    column: str = "sz",
) -> DecayFit:
    """Exponential decay rate of |<sigma_z>| at strobes over ``n_periods``.

    Least-squares regression of log|trace| against time over the strobes in
    [0, n_periods*T]; points at or below 1e-6 in magnitude (and everything
    after the first such point) are dropped as numerically empty.  Raises
    :class:`InsufficientDataError` with fewer than 20 usable points.
    """
    if n_periods < 1:
        raise InvalidParameterError(f"n_periods must be >= 1, got {n_periods}")
    strobes = trace.strobes(TAU)
    mask = strobes.times <= n_periods * TAU * (1 + 1e-12)
    times = strobes.times[mask]
    vals = np.abs(strobes.column(column)[mask])
    dead = np.nonzero(vals <= RATE_FLOOR)[0]
    if dead.size:
        times = times[: dead[0]]
        vals = vals[: dead[0]]
    if times.size < MIN_RATE_POINTS:
        raise InsufficientDataError(
            f"only {times.size} usable stroboscopic points "
            f"(need >= {MIN_RATE_POINTS}) for rate regression"
        )
    logs = np.log(vals)
    slope, intercept = np.polyfit(times, logs, 1)
    fitted = slope * times + intercept
    ss_res = float(np.sum((logs - fitted) ** 2))
    mean = float(logs.mean())
    ss_tot = float(np.sum((logs - mean) ** 2))
    # a spread at the rounding scale of the mean means a constant target;
    # report a perfect fit instead of the 0/0 ratio
    degenerate = ss_tot <= 1e-20 * logs.size * max(1.0, mean * mean)
    r_sq = 1.0 if degenerate else 1.0 - ss_res / ss_tot
    return DecayFit(
        rate=float(-slope),
        intercept=float(intercept),
        r_squared=float(r_sq),
        window=int(times.size),
    )


def upper_envelope(
    trace: TimeSeriesRecord,
    column: str = "sx",
    fit_periods: int = 50,
) -> TimeSeriesRecord:
    """Upper envelope of a damped oscillation trace.

    The oscillation frequency (the shifted TLS precession) is read from the
    discrete Fourier peak of the first ``fit_periods`` drive periods; the
    trace is then scanned in consecutive windows of one oscillation period,
    and the window maxima are linearly interpolated back onto the full time
    grid.  Needs intra-period sampling; a flat trace raises
    :class:`InsufficientDataError`.
    """
    if fit_periods < 1:
        raise InvalidParameterError(f"fit_periods must be >= 1, got {fit_periods}")
    x = trace.column(column)
    times = trace.times
    if times.size < 8:
        raise InsufficientDataError("envelope extraction needs >= 8 samples")
    dt = float(times[1] - times[0])
    if np.any(np.abs(np.diff(times) - dt) > 1e-9 * dt):
        raise InvalidParameterError("envelope extraction needs a uniform grid")
    if float(np.max(np.abs(x))) < 1e-12:
        raise InsufficientDataError("trace has no oscillation to demodulate")
    head = x[times <= fit_periods * TAU * (1 + 1e-12)]
    if head.size < 8:
        head = x
    spectrum = np.abs(np.fft.rfft(head - head.mean()))
    if spectrum.size < 2:
        raise InsufficientDataError("trace too short to locate the precession line")
    k_peak = int(np.argmax(spectrum[1:])) + 1
    omega = TAU * k_peak / (head.size * dt)
    window = max(int(round(TAU / omega / dt)), 1)
    starts = np.arange(0, times.size, window)
    t_peaks = np.empty(starts.size)
    v_peaks = np.empty(starts.size)
    for i, s in enumerate(starts):
        block = x[s:s + window]
        j = int(np.argmax(block))
        t_peaks[i] = times[s + j]
        v_peaks[i] = block[j]
    env = np.interp(times, t_peaks, v_peaks)
    return TimeSeriesRecord(
        times=times,
        columns=("envelope",),
        values=env[:, None],
        meta=dict(trace.meta, source_column=column,
                  demodulation_omega=float(omega)),
    )


# ---------------------------------------------------------------------------
# Long-time plateau from the coupled Floquet decomposition

def ipr(mode: np.ndarray, reference_basis: np.ndarray) -> float:
    """Inverse participation ratio of ``mode`` over reference columns.

    Computes sum_j |<ref_j|mode>|^4 after normalizing the mode; 1 for a
    mode equal to a reference vector, 1/N for a uniform superposition over
    N of them.  Small values mark modes hybridized across many reference
    states (the chaotic ones).
    """
    mode = np.asarray(mode, dtype=np.complex128).ravel()
    ref = np.asarray(reference_basis, dtype=np.complex128)
    if ref.ndim != 2 or ref.shape[0] != mode.size:
        raise InvalidParameterError(
            f"reference shape {ref.shape} does not match mode length {mode.size}"
        )
    nrm = np.linalg.norm(mode)
    if nrm == 0:
        raise InvalidParameterError("mode vector is zero")
    overlaps = ref.conj().T @ (mode / nrm)
    return float(np.sum(np.abs(overlaps) ** 4))


def _plateau_single(params: ModelParams, D: int, d: int, tls: TlsInit,
                    ipr_cut: float, n_steps: int):
    """Per-offset-charge plateau estimates; returns the four values + count."""
    local_basis = build_basis(params, D, d)
    U = _CoupledStepper(params, local_basis, n_steps).u_period()
    _, modes, _ = propagator_modes(U)
    g_block = modes[:d, :]
    e_block = modes[d:, :]
    r_g_sq = np.einsum("ij,ij->j", g_block.conj(), g_block).real
    r_e_sq = np.einsum("ij,ij->j", e_block.conj(), e_block).real
    z = r_e_sq - r_g_sq
    # chaotic selection: participation over the decoupled reference basis of
    # TLS states x static transmon eigenstates (the retained coordinates),
    # where chaotic-layer modes are delocalized and island modes are not
    ipr_vals = (np.abs(modes) ** 4).sum(axis=0)
    chaotic = ipr_vals < ipr_cut
    n_cha = int(np.count_nonzero(chaotic))
    if n_cha == 0:
        raise EmptyLayerError(
            f"no chaotic coupled modes below IPR cut {ipr_cut} at "
            f"n_g={params.n_g}"
        )
    # overlap weights with (transmon ground) x (tls); ground state is
    # coordinate 0 of the retained basis
    c_g, c_e = tls.amplitudes
    amp = np.conj(g_block[0, :]) * c_g + np.conj(e_block[0, :]) * c_e
    weights = np.abs(amp) ** 2
    dressed2 = float(np.dot(weights, z))
    # the same diagonal sum restricted to chaotic modes, written through the
    # block-overlap form (division-free: r^2 |d|^2 = |block[0]|^2)
    g0 = np.conj(g_block[0, chaotic])
    e0 = e_block[0, chaotic]
    cross = g0 * e0
    l_alpha = (
        math.sin(tls.theta) * (cmath.exp(-1j * tls.phi) * cross).real
        + math.sin(0.5 * tls.theta) ** 2 * np.abs(g0) ** 2
        + math.cos(0.5 * tls.theta) ** 2 * np.abs(e0) ** 2
    )
    z_cha = z[chaotic]
    l_form = float(np.dot(l_alpha, z_cha))
    # uniform-overlap estimate: every chaotic overlap ~ 1/sqrt(N_ch) with a
    # random sign; N_ch is the transmon-side count, half the coupled count
    n_ch_transmon = 0.5 * n_cha
    mag = np.abs(cross)
    cos_rel = np.divide(cross.real, mag, out=np.zeros_like(mag), where=mag > 0)
    r_ge = np.sqrt(r_g_sq[chaotic] * r_e_sq[chaotic])
    uniform = (
        math.sin(0.5 * tls.theta) ** 2 * np.dot(r_g_sq[chaotic], z_cha)
        + math.cos(0.5 * tls.theta) ** 2 * np.dot(r_e_sq[chaotic], z_cha)
        + math.sin(tls.theta) * math.cos(tls.phi)
        * np.dot(cos_rel * r_ge, z_cha)
    ) / n_ch_transmon
    # variance-form prediction sum_a z_a^2 / (2 N_ch); the polarizations sum
    # to zero over the chaotic set, so this is their variance on the
    # transmon-count normalization (and the uniform estimate at theta = 0)
    var_form = float(np.dot(z_cha, z_cha)) / (2.0 * n_ch_transmon)
    return dressed2, l_form, float(uniform), var_form, n_cha


def plateau_floquet(
    params: ModelParams,
    basis: TransmonBasis,
    tls: TlsInit,
    n_g_list,
    ipr_cut: float = 0.3,
    n_steps: int = 512,
) -> PlateauEstimate:
    """Long-time <sigma_z> plateau estimates, averaged over offset charges.

    Decomposes the coupled one-period propagator per offset charge; each
    mode contributes its TLS polarization z_alpha weighted by its overlap
    with the initial state.  Chaotic modes are selected by IPR < ``ipr_cut``
    against the decoupled reference basis of TLS states tensored with static
    transmon eigenstates, over which chaotic-layer modes are delocalized
    (IPR ~ 1/N_ch) while island and confined modes stay concentrated.
    Returns the diagonal sum over all modes, its chaotic-only overlap form,
    the uniform-overlap estimate, and Var(z_alpha)/2.
    """
    _validate_coupling(params)
    n_steps = _validate_steps(n_steps)
    if not (0 < ipr_cut <= 1):
        raise InvalidParameterError(f"ipr_cut must lie in (0, 1], got {ipr_cut}")
    n_gs = _validate_n_g_list(n_g_list)
    D = basis.parent.D
    d = basis.d
    sums = np.zeros(5)
    for ng in n_gs:
        vals = _plateau_single(params.replace(n_g=float(ng)), D, d, tls,
                               ipr_cut, n_steps)
        sums += np.asarray(vals, dtype=np.float64)
    sums /= n_gs.size
    return PlateauEstimate(
        z_ss_dressed2=float(sums[0]),
        z_ss_l_alpha=float(sums[1]),
        z_ss_uniform=float(np.clip(sums[2], -1.0, 1.0)),
        z_ss_var=float(sums[3]),
        n_chaotic=float(sums[4]),
    )
