"""Reflected Brownian motion surrogate for momentum diffusion in the chaotic layer.

Chaotic transport confines |p| below the layer edge p_bar while resonance
kicks randomize it, so the cheap stand-in for the full dynamics is a Wiener
process with diffusion rate D folded into [-p_bar, p_bar] by reflecting
walls.  Paths are built by folding the unfolded coordinate r_t = r_0 +
sqrt(D) W_t, which makes every sample exact in distribution for any step
size (no reflection discretization error).

Correlation and spectral functions come from the eigenfunction expansion of
the reflected diffusion over its invariant (uniform) measure.  Only odd
modes contribute: mode n carries weight A_n = 32 p_bar^2 / (pi^4 n^4) and
relaxes at rate a_n = n^2 a with a = pi^2 D / (8 p_bar^2).  The commonly
quoted two-term closed forms are kept verbatim as the *_paper variants;
their coefficients do not follow from the series term-by-term (the n=3
spectral weight is off by 81x, the rate formula's omega^2 coefficients by
64x), so both routes stay visible and comparable instead of being silently
merged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .params import TAU

__all__ = [
    "RbmParams",
    "NoisePath",
    "fold",
    "generate_path",
    "correlation",
    "psd",
    "psd_paper_two_term",
    "fgr_rates",
    "fgr_paper",
]


def _require_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise InvalidParameterError(f"{name} must be positive and finite, got {value!r}")
    return value


def _require_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise InvalidParameterError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InvalidParameterError(f"seed must fit in 64 bits, got {seed}")
    return seed


def _require_terms(n_terms: int) -> int:
    if isinstance(n_terms, bool) or not isinstance(n_terms, (int, np.integer)):
        raise InvalidParameterError(f"n_terms must be an integer, got {n_terms!r}")
    if n_terms < 1:
        raise InvalidParameterError(f"n_terms must be >= 1, got {n_terms}")
    return int(n_terms)


def _mode_rate(D: float, p_bar: float) -> float:
    """Base relaxation rate a = pi^2 D / (8 p_bar^2); mode n decays at n^2 a."""
    return math.pi**2 * D / (8.0 * p_bar**2)


@dataclass(frozen=True)
class RbmParams:
    """Reflected-diffusion parameters: rate D, wall position p_bar, sampling step dt.

    dt defaults to T/200 with T = 2 pi the drive period, fine enough to
    resolve TLS splittings up to omega_q_t ~ 2 when the path drives a qubit.
    """

    D: float
    p_bar: float
    dt: float = TAU / 200.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "D", _require_positive("D", self.D))
        object.__setattr__(self, "p_bar", _require_positive("p_bar", self.p_bar))
        object.__setattr__(self, "dt", _require_positive("dt", self.dt))
        object.__setattr__(self, "seed", _require_seed(self.seed))


@dataclass(frozen=True)
class NoisePath:
    """A sampled momentum path p(t) on a uniform grid, confined to [-p_bar, p_bar]."""

    times: np.ndarray
    values: np.ndarray
    seed: int
    params: RbmParams

    def __post_init__(self) -> None:
        if self.times.shape != self.values.shape:
            raise InvalidParameterError("times and values must have matching shapes")
        if np.any(np.abs(self.values) > self.params.p_bar):
            raise InvalidParameterError("path values exceed the reflecting walls")


def fold(r, p_bar: float):
    """Fold an unfolded coordinate into [-p_bar, p_bar] with reflecting walls.

    Piecewise, with period 4 p_bar:
      r - 4k p_bar           on [(4k-1) p_bar, (4k+1) p_bar]
      (4k+2) p_bar - r       on [(4k+1) p_bar, (4k+3) p_bar]

    Accepts scalars or arrays; the identity on [-p_bar, p_bar].
    """
    p_bar = _require_positive("p_bar", p_bar)
    arr = np.asarray(r, dtype=float)
    # shift so the rising branch starts at 0, then mirror the upper half
    s = np.mod(arr + p_bar, 4.0 * p_bar)
    out = np.where(s <= 2.0 * p_bar, s - p_bar, 3.0 * p_bar - s)
    if np.ndim(r) == 0:
        return float(out)
    return out


def generate_path(params: RbmParams, t_end: float, initial_p: float = 0.0) -> NoisePath:
    """Sample p_t = fold(r_0 + sqrt(D) W_t) on the grid 0, dt, ..., ~t_end.

    The unfolded coordinate accumulates Gaussian increments of variance
    D*dt and is folded on output, so the joint law at the sample times is
    exact whatever dt is.  Deterministic for a given params.seed.
    """
    t_end = _require_positive("t_end", t_end)
    initial_p = float(initial_p)
    if abs(initial_p) > params.p_bar:
        raise InvalidParameterError(
            f"initial_p={initial_p} outside the layer [-{params.p_bar}, {params.p_bar}]"
        )
    n_steps = int(round(t_end / params.dt))
    if n_steps < 1:
        raise InvalidParameterError("t_end shorter than one step")
    rng = np.random.Generator(np.random.Philox(params.seed))
    increments = rng.normal(0.0, math.sqrt(params.D * params.dt), size=n_steps)
    r = np.empty(n_steps + 1)
    r[0] = initial_p
    np.cumsum(increments, out=r[1:])
    r[1:] += initial_p
    times = np.arange(n_steps + 1) * params.dt
    return NoisePath(times=times, values=fold(r, params.p_bar), seed=params.seed, params=params)


def correlation(D: float, p_bar: float, tau, n_terms: int = 41):
    """Stationary autocorrelation C(tau) = sum over odd n <= n_terms of A_n exp(-n^2 a |tau|).

    n_terms = 3 keeps modes n = 1, 3 and reproduces the usual two-term
    approximation, C(0) = (32/pi^4)(1 + 1/81) p_bar^2 ~ 0.33257 p_bar^2;
    the full series sums to p_bar^2 / 3.
    """
    D = _require_positive("D", D)
    p_bar = _require_positive("p_bar", p_bar)
    n_terms = _require_terms(n_terms)
    a = _mode_rate(D, p_bar)
    abs_tau = np.abs(np.asarray(tau, dtype=float))
    total = np.zeros_like(abs_tau)
    for n in range(1, n_terms + 1, 2):
        amp = 32.0 * p_bar**2 / (math.pi**4 * n**4)
        total += amp * np.exp(-(n * n * a) * abs_tau)
    if np.ndim(tau) == 0:
        return float(total)
    return total


def psd(D: float, p_bar: float, omega, n_terms: int = 41):
    """Two-sided spectral density: sum over odd n <= n_terms of A_n * 2 a_n / (omega^2 + a_n^2).

    This is the Fourier transform of correlation() term by term, so the sum
    rule integral S d omega / (2 pi) = C(0) holds at any truncation.  Even
    in omega.
    """
    D = _require_positive("D", D)
    p_bar = _require_positive("p_bar", p_bar)
    n_terms = _require_terms(n_terms)
    a = _mode_rate(D, p_bar)
    w2 = np.square(np.asarray(omega, dtype=float))
    total = np.zeros_like(w2)
    for n in range(1, n_terms + 1, 2):
        amp = 32.0 * p_bar**2 / (math.pi**4 * n**4)
        a_n = n * n * a
        total += amp * 2.0 * a_n / (w2 + a_n * a_n)
    if np.ndim(omega) == 0:
        return float(total)
    return total


def psd_paper_two_term(D: float, p_bar: float, omega):
    """Quoted two-term closed form, kept verbatim for comparison:

        S[omega] = (32 p_bar^2 / pi^4) [ 2a/(omega^2 + a^2) + 18a/(omega^2 + (9a)^2) ]

    The series weight for the n=3 Lorentzian is 2a/9, not 18a, so this form
    overweights the second mode by 81x.  Use psd() for quantitative work.
    """
    D = _require_positive("D", D)
    p_bar = _require_positive("p_bar", p_bar)
    a = _mode_rate(D, p_bar)
    w2 = np.square(np.asarray(omega, dtype=float))
    out = (32.0 * p_bar**2 / math.pi**4) * (
        2.0 * a / (w2 + a * a) + 18.0 * a / (w2 + 81.0 * a * a)
    )
    if np.ndim(omega) == 0:
        return float(out)
    return out


def fgr_rates(g_t: float, omega_q_t: float, D: float, p_bar: float) -> tuple[float, float]:
    """Golden-rule decay and excitation rates of a TLS driven by the folded process.

    gamma_down = gamma_up = g_t^2 S(omega_q_t) with the two-mode spectral
    density (n_terms = 3); the symmetry is exact because S is even and the
    noise is classical.
    """
    g_t = float(g_t)
    rate = g_t**2 * psd(D, p_bar, float(omega_q_t), n_terms=3)
    return rate, rate


def fgr_paper(g_t: float, omega_q_t: float, D: float, p_bar: float) -> tuple[float, float]:
    """Quoted closed-form rates, kept verbatim for comparison:

        gamma = (512/pi^2) [ g^2 p_bar^4 D / (omega_q^2 p_bar^4 + pi^4 D^2)
                           + g^2 p_bar^4 D / (omega_q^2 p_bar^4 / 9 + 9 pi^4 D^2) ]

    Substituting a = pi^2 D / (8 p_bar^2) into g^2 S(omega) gives omega^2
    coefficients 64x larger than these, so this form does not agree with
    fgr_rates; both are exposed and the Monte Carlo decay test arbitrates.
    """
    g_t = float(g_t)
    omega_q_t = float(omega_q_t)
    D = _require_positive("D", D)
    p_bar = _require_positive("p_bar", p_bar)
    num = g_t**2 * p_bar**4 * D
    rate = (512.0 / math.pi**2) * (
        num / (omega_q_t**2 * p_bar**4 + math.pi**4 * D**2)
        + num / (omega_q_t**2 * p_bar**4 / 9.0 + 9.0 * math.pi**4 * D**2)
    )
    return rate, rate
