"""Analytic chaos criteria for the harmonically driven pendulum.

Everything here is closed-form analysis in the dimensionless model units
(drive period T = 2*pi): nonlinear-resonance separatrices, the Chirikov
overlap scan that bounds the chaotic layer at |p| <= p_bar, the lower/upper
drive thresholds for chaos around p = 0, the momentum diffusion rate, the
quantum localization length, and the asymptotic momentum-fluctuation levels
with their crossing point (the localization threshold).

Conventions:

* The m-th nonlinear resonance is centred at p = m (upper half-plane; the
  lower half-plane is the mirror image) and has separatrix half-width
  2*sqrt(lam*|J_m(xi_d)|) at strobe phase zero, so its full width is
  Delta p_m = 4*sqrt(lam*|J_m(xi_d)|).
* Adjacent resonances m and m+1 "overlap" when p_m^+(0) > p_{m+1}^-(0)
  strictly; the chaotic layer extends to p_bar = p_{m_bar}^+(0) where m_bar
  is the last index of an unbroken overlap chain starting at m = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy import special

from .errors import InvalidParameterError, RangeError
from .params import TAU

# Validated evaluation envelope for bessel_j.
BESSEL_M_MAX = 200
BESSEL_X_MAX = 1000.0

# A resonance with |J_m(xi_d)| below this is treated as absent: zero-width
# resonances cannot mediate overlap (and J_1(0) = 0 would otherwise make the
# undriven pendulum look marginal).
EPS_WIDTH = 1e-8

# Overlap margins smaller than this are resolved as non-overlap and flagged,
# so ties break deterministically.
NEAR_TANGENT = 1e-9

# Global maximum of J_1: location and value (used for the existence check of
# the lower threshold; bisection never relies on these beyond bracketing).
J1_ARGMAX = 1.8411837813406593
J1_MAX = 0.5818652242815964


def bessel_j(m: int, x: float) -> float:
    """Bessel function J_m(x) on the validated envelope.

    Absolute error < 1e-10 for integer 0 <= m <= 200 and real 0 <= x <= 1000.
    Arguments outside that envelope raise RangeError.
    """
    if not isinstance(m, (int,)) or isinstance(m, bool):
        raise RangeError(f"order must be an integer, got {m!r}")
    if m < 0 or m > BESSEL_M_MAX:
        raise RangeError(f"order {m} outside validated range [0, {BESSEL_M_MAX}]")
    if not math.isfinite(x) or x < 0.0 or x > BESSEL_X_MAX:
        raise RangeError(f"argument {x} outside validated range [0, {BESSEL_X_MAX}]")
    return float(special.jv(m, x))


@dataclass(frozen=True)
class ResonanceCurve:
    """Separatrix data for one nonlinear resonance (upper half-plane)."""

    m: int
    width: float
    upper_at_zero: float
    lower_at_zero: float


@dataclass(frozen=True)
class ChaoticLayer:
    """Result of the overlap scan bounding the chaotic layer."""

    p_bar: float
    m_bar: int | None
    overlaps: tuple[bool, ...]
    near_tangent: bool = False
    lam: float = 0.0
    xi_d: float = 0.0


def _half_width(lam: float, m: int, xi_d: float) -> float:
    return 2.0 * math.sqrt(lam * abs(bessel_j(m, xi_d)))


def resonance_curves(lam: float, xi_d: float, m_max: int) -> list[ResonanceCurve]:
    """Separatrix curves p_m^{+/-}(0) for 0 <= m <= m_max."""
    if not (lam > 0.0):
        raise InvalidParameterError(f"lam must be positive, got {lam}")
    if xi_d < 0.0:
        raise InvalidParameterError(f"xi_d must be >= 0, got {xi_d}")
    if m_max < 0 or m_max > BESSEL_M_MAX:
        raise RangeError(f"m_max {m_max} outside [0, {BESSEL_M_MAX}]")
    out = []
    for m in range(m_max + 1):
        h = _half_width(lam, m, xi_d)
        out.append(
            ResonanceCurve(
                m=m, width=2.0 * h, upper_at_zero=m + h, lower_at_zero=m - h
            )
        )
    return out


def chaotic_layer_bound(
    lam: float, xi_d: float, m_max: int = 100, half: str = "upper"
) -> ChaoticLayer:
    """Chirikov overlap scan: chaotic-layer bound p_bar and last index m_bar.

    m_bar is the largest integer such that every adjacent pair (m, m+1) with
    0 <= m < m_bar overlaps strictly and both members have |J_m(xi_d)| >=
    EPS_WIDTH; p_bar = m_bar + 2*sqrt(lam*|J_{m_bar}(xi_d)|). If the 0<->1
    pair already fails, p_bar = 0 and m_bar is None (empty layer). xi_d = 0
    returns the empty layer (the undriven pendulum is integrable), not an
    error. half="lower" runs the mirror scan and returns the negated bound.
    """
    if not (lam > 0.0):
        raise InvalidParameterError(f"lam must be positive, got {lam}")
    if xi_d < 0.0:
        raise InvalidParameterError(f"xi_d must be >= 0, got {xi_d}")
    if half not in ("upper", "lower"):
        raise InvalidParameterError(f"half must be 'upper' or 'lower', got {half!r}")

    sign = 1.0 if half == "upper" else -1.0
    if xi_d == 0.0:
        return ChaoticLayer(
            p_bar=0.0, m_bar=None, overlaps=(), lam=lam, xi_d=xi_d
        )

    overlaps: list[bool] = []
    near_tangent = False
    m_bar: int | None = None
    h_prev = _half_width(lam, 0, xi_d)
    present_prev = abs(bessel_j(0, xi_d)) >= EPS_WIDTH
    for m in range(m_max):
        h_next = _half_width(lam, m + 1, xi_d)
        present_next = abs(bessel_j(m + 1, xi_d)) >= EPS_WIDTH
        margin = h_prev + h_next - 1.0  # p_m^+(0) - p_{m+1}^-(0)
        if abs(margin) < NEAR_TANGENT:
            overlaps.append(False)
            near_tangent = True
            break
        if margin > 0.0 and present_prev and present_next:
            overlaps.append(True)
            m_bar = m + 1
            h_prev = h_next
            present_prev = present_next
        else:
            overlaps.append(False)
            break
    else:
        raise RangeError(
            f"overlap chain did not terminate within m_max={m_max}; "
            "increase m_max"
        )

    if m_bar is None:
        return ChaoticLayer(
            p_bar=0.0,
            m_bar=None,
            overlaps=tuple(overlaps),
            near_tangent=near_tangent,
            lam=lam,
            xi_d=xi_d,
        )
    p_bar = m_bar + _half_width(lam, m_bar, xi_d)
    return ChaoticLayer(
        p_bar=sign * p_bar,
        m_bar=int(sign) * m_bar,
        overlaps=tuple(overlaps),
        near_tangent=near_tangent,
        lam=lam,
        xi_d=xi_d,
    )


# Root finding for the drive thresholds: bracketed bisection on [X_LO, X_HI]
# with a 0.02 scan step. The step doubles as a cusp filter: residuals built
# from sqrt(|J|) dip through zero in slivers of width ~1e-4 around Bessel
# zeros, which are artifacts of the |.| cusp rather than physical overlap
# boundaries; a 0.02 grid cannot bracket them.
X_LO = 1e-3
X_HI = 20.0
SCAN_STEP = 0.02
ROOT_TOL = 1e-6


def _bisect(f, lo: float, hi: float, tol: float = ROOT_TOL) -> float:
    flo = f(lo)
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if (flo <= 0.0) == (fmid <= 0.0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def threshold_lower(lam: float) -> float | None:
    """Drive amplitude where the m=1 separatrix first reaches p = 0.

    Smallest positive root of 1 - 2*sqrt(lam*|J_1(x)|) = 0, located by
    bisection of lam*J_1(x) - 1/4 on the rising branch [X_LO, argmax J_1]
    (J_1 is monotone there, so the first root is guaranteed; this also
    resolves the tangency case, where the root sits at the argmax itself).
    Returns None when 4*lam*max|J_1| < 1: the separatrix never reaches p=0.
    """
    if not (lam > 0.0):
        raise InvalidParameterError(f"lam must be positive, got {lam}")
    target = 0.25

    def g(x: float) -> float:
        return lam * bessel_j(1, x) - target

    if g(J1_ARGMAX) < 0.0:
        return None  # documented no-threshold result
    if g(X_LO) >= 0.0:
        return X_LO
    return _bisect(lambda x: -g(x), X_LO, J1_ARGMAX)


def threshold_upper(lam: float) -> float | None:
    """Drive amplitude where the central regular island reappears.

    Lowest positive robust root of 1 - 2*sqrt(lam*|J_1(x)|) -
    2*sqrt(lam*|J_0(x)|) = 0, from a 0.02 bracketing scan over [X_LO, X_HI]
    followed by bisection to 1e-6. Returns None when no bracket is found.
    """
    if not (lam > 0.0):
        raise InvalidParameterError(f"lam must be positive, got {lam}")

    def w(x: float) -> float:
        return (
            1.0
            - 2.0 * math.sqrt(lam * abs(bessel_j(1, x)))
            - 2.0 * math.sqrt(lam * abs(bessel_j(0, x)))
        )

    x_prev = X_LO
    w_prev = w(x_prev)
    x = X_LO + SCAN_STEP
    while x <= X_HI + 1e-12:
        w_cur = w(x)
        if (w_prev <= 0.0) != (w_cur <= 0.0):
            return _bisect(w, x_prev, x)
        x_prev, w_prev = x, w_cur
        x += SCAN_STEP
    return None


def diffusion_rate(lam: float, xi_d: float) -> float:
    """Quasilinear momentum diffusion rate D = lam^2 / xi_d (Var p = D*t)."""
    if not (lam >= 0.0) or not math.isfinite(lam):
        raise InvalidParameterError(f"lam must be >= 0, got {lam}")
    if xi_d == 0.0:
        raise InvalidParameterError("xi_d = 0: diffusion rate undefined")
    if not (xi_d > 0.0):
        raise InvalidParameterError(f"xi_d must be positive, got {xi_d}")
    return lam * lam / xi_d


@dataclass(frozen=True)
class StandardMapParams:
    """Kick strength and derived quantities of the reduced standard map."""

    k: float
    T: float = field(default=TAU)

    @property
    def K(self) -> float:
        return self.k * self.T

    @property
    def chaotic(self) -> bool:
        # Critical stochasticity parameter taken as 1 (order-of-magnitude
        # criterion; the exact critical value is slightly below).
        return self.K > 1.0

    @property
    def D(self) -> float:
        return self.k * self.k / (2.0 * self.T)


def standard_map_k(lam: float, xi_d: float) -> StandardMapParams:
    """Kick strength k = 2*sqrt(pi)*lam/sqrt(xi_d) of the reduced map."""
    if not (lam >= 0.0) or not math.isfinite(lam):
        raise InvalidParameterError(f"lam must be >= 0, got {lam}")
    if not (xi_d > 0.0):
        raise InvalidParameterError(f"xi_d must be positive, got {xi_d}")
    return StandardMapParams(k=2.0 * math.sqrt(math.pi) * lam / math.sqrt(xi_d))


def localization_length(D: float, hbar_eff: float) -> float:
    """Charge localization length l_n = T*D/hbar_eff^2 with T = 2*pi."""
    if D < 0.0 or not math.isfinite(D):
        raise InvalidParameterError(f"D must be >= 0, got {D}")
    if not (hbar_eff > 0.0):
        raise InvalidParameterError(f"hbar_eff must be positive, got {hbar_eff}")
    return TAU * D / (hbar_eff * hbar_eff)


def sigma_star_classical(p_bar: float) -> float:
    """Asymptotic classical momentum fluctuation: uniform on [-p_bar, p_bar]."""
    return abs(p_bar) / math.sqrt(3.0)


def sigma_star_quantum(hbar_eff: float, l_n: float) -> float:
    """Asymptotic quantum momentum fluctuation of the localized state."""
    if not (hbar_eff > 0.0):
        raise InvalidParameterError(f"hbar_eff must be positive, got {hbar_eff}")
    if l_n < 0.0:
        raise InvalidParameterError(f"l_n must be >= 0, got {l_n}")
    return hbar_eff * l_n / math.sqrt(2.0)


def localization_threshold(lam: float, hbar_eff: float) -> float:
    """Drive amplitude where classical and quantum fluctuation levels cross.

    Closed form xi_d* = sqrt(sqrt(6)*pi*lam^2/hbar_eff), obtained from
    sigma_star_classical(p_bar ~= xi_d) = sigma_star_quantum at the same
    xi_d (the coarse identification p_bar ~= xi_d is part of the definition
    and of the self-consistency test).
    """
    if not (lam > 0.0):
        raise InvalidParameterError(f"lam must be positive, got {lam}")
    if not (hbar_eff > 0.0):
        raise InvalidParameterError(f"hbar_eff must be positive, got {hbar_eff}")
    return math.sqrt(math.sqrt(6.0) * math.pi * lam * lam / hbar_eff)
