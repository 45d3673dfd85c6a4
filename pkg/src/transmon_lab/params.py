"""Parameter containers and unit conversion.

Two equivalent descriptions of the driven circuit are used throughout:

* :class:`CircuitParams` holds laboratory quantities. Energies ``E_J`` and
  ``E_C`` are stored as E/h in GHz; ``eps_d``, ``omega_d``, ``omega_q`` and
  ``g`` are angular frequencies in rad/s.
* :class:`ModelParams` holds the dimensionless quantities the dynamics is
  actually solved in, after time is rescaled by the drive frequency
  (one drive period is 2*pi):

  - ``lam``       = (omega_p / omega_d)^2 with omega_p = sqrt(8 E_J E_C)/hbar,
  - ``hbar_eff``  = 8 E_C / (hbar omega_d), the effective Planck constant,
  - ``xi_d``      = eps_d / omega_d, the dimensionless drive amplitude,
  - ``omega_q_t`` = omega_q / omega_d,
  - ``g_t``       = hbar g / (8 E_C),
  - ``n_g``       = offset charge, stored mod 1.

In these units the chaotic layer, diffusion constants and all spectra are
functions of (lam, xi_d, hbar_eff) alone, so the whole laboratory works in
:class:`ModelParams`; :func:`rescale` and :func:`reconstruct_circuit` convert
back and forth losslessly (up to the free choice of E_C).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import InvalidParameterError

TAU = 2.0 * math.pi
# E/h in GHz -> angular frequency in rad/s
GHZ_H_TO_RAD_S = TAU * 1e9


@dataclass(frozen=True)
class CircuitParams:
    """Laboratory description of the driven circuit.

    E_J, E_C are E/h in GHz; eps_d, omega_d, omega_q, g in rad/s.
    """

    E_J: float
    E_C: float
    eps_d: float
    omega_d: float
    omega_q: float
    g: float
    n_g: float = 0.0

    def __post_init__(self):
        if not (self.E_J > 0.0) or not math.isfinite(self.E_J):
            raise InvalidParameterError(f"E_J must be positive, got {self.E_J}")
        if not (self.E_C > 0.0) or not math.isfinite(self.E_C):
            raise InvalidParameterError(f"E_C must be positive, got {self.E_C}")
        if not (self.omega_d > 0.0) or not math.isfinite(self.omega_d):
            raise InvalidParameterError(
                f"omega_d must be positive, got {self.omega_d}"
            )
        if self.eps_d < 0.0 or not math.isfinite(self.eps_d):
            raise InvalidParameterError(f"eps_d must be >= 0, got {self.eps_d}")
        if self.omega_q < 0.0 or not math.isfinite(self.omega_q):
            raise InvalidParameterError(f"omega_q must be >= 0, got {self.omega_q}")
        if not math.isfinite(self.g):
            raise InvalidParameterError(f"g must be finite, got {self.g}")
        if not math.isfinite(self.n_g):
            raise InvalidParameterError(f"n_g must be finite, got {self.n_g}")
        object.__setattr__(self, "n_g", self.n_g % 1.0)

    @property
    def omega_p(self) -> float:
        """Plasma frequency sqrt(8 E_J E_C)/hbar in rad/s."""
        return math.sqrt(8.0 * self.E_J * self.E_C) * GHZ_H_TO_RAD_S

    @property
    def anharmonicity(self) -> float:
        """Leading-order anharmonicity -E_C, as E/h in GHz."""
        return -self.E_C

    def to_dict(self) -> dict:
        return {
            "E_J": self.E_J,
            "E_C": self.E_C,
            "eps_d": self.eps_d,
            "omega_d": self.omega_d,
            "omega_q": self.omega_q,
            "g": self.g,
            "n_g": self.n_g,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitParams":
        try:
            return cls(**{k: float(d[k]) for k in
                          ("E_J", "E_C", "eps_d", "omega_d", "omega_q", "g")},
                       n_g=float(d.get("n_g", 0.0)))
        except KeyError as exc:
            raise InvalidParameterError(f"missing circuit field {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "CircuitParams":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class ModelParams:
    """Dimensionless model parameters (drive period = 2*pi)."""

    lam: float
    xi_d: float
    hbar_eff: float
    omega_q_t: float = 0.0
    g_t: float = 0.0
    n_g: float = 0.0

    def __post_init__(self):
        if not (self.lam > 0.0) or not math.isfinite(self.lam):
            raise InvalidParameterError(f"lam must be positive, got {self.lam}")
        if not (self.hbar_eff > 0.0) or not math.isfinite(self.hbar_eff):
            raise InvalidParameterError(
                f"hbar_eff must be positive, got {self.hbar_eff}"
            )
        if self.xi_d < 0.0 or not math.isfinite(self.xi_d):
            raise InvalidParameterError(f"xi_d must be >= 0, got {self.xi_d}")
        if self.omega_q_t < 0.0 or not math.isfinite(self.omega_q_t):
            raise InvalidParameterError(
                f"omega_q_t must be >= 0, got {self.omega_q_t}"
            )
        if not math.isfinite(self.g_t):
            raise InvalidParameterError(f"g_t must be finite, got {self.g_t}")
        if not math.isfinite(self.n_g):
            raise InvalidParameterError(f"n_g must be finite, got {self.n_g}")
        object.__setattr__(self, "n_g", self.n_g % 1.0)

    def replace(self, **kw) -> "ModelParams":
        import dataclasses

        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        # JSON field name is "lambda"; the attribute avoids the keyword.
        return {
            "lambda": self.lam,
            "xi_d": self.xi_d,
            "hbar_eff": self.hbar_eff,
            "omega_q_t": self.omega_q_t,
            "g_t": self.g_t,
            "n_g": self.n_g,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if "lambda" not in d:
            raise InvalidParameterError("missing model field 'lambda'")
        return cls(
            lam=float(d["lambda"]),
            xi_d=float(d.get("xi_d", 0.0)),
            hbar_eff=float(d["hbar_eff"]),
            omega_q_t=float(d.get("omega_q_t", 0.0)),
            g_t=float(d.get("g_t", 0.0)),
            n_g=float(d.get("n_g", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "ModelParams":
        return cls.from_dict(json.loads(s))


def rescale(c: CircuitParams) -> ModelParams:
    """Convert laboratory circuit parameters to dimensionless model parameters."""
    ec_rad = c.E_C * GHZ_H_TO_RAD_S  # E_C/hbar in rad/s
    ej_rad = c.E_J * GHZ_H_TO_RAD_S
    lam = 8.0 * ej_rad * ec_rad / (c.omega_d * c.omega_d)
    hbar_eff = 8.0 * ec_rad / c.omega_d
    return ModelParams(
        lam=lam,
        xi_d=c.eps_d / c.omega_d,
        hbar_eff=hbar_eff,
        omega_q_t=c.omega_q / c.omega_d,
        g_t=c.g / (8.0 * ec_rad),
        n_g=c.n_g,
    )


def reconstruct_circuit(m: ModelParams, E_C: float) -> CircuitParams:
    """Invert :func:`rescale` for a chosen charging energy E_C (E/h in GHz)."""
    if not (E_C > 0.0) or not math.isfinite(E_C):
        raise InvalidParameterError(f"E_C must be positive, got {E_C}")
    ec_rad = E_C * GHZ_H_TO_RAD_S
    omega_d = 8.0 * ec_rad / m.hbar_eff
    E_J = m.lam * omega_d * omega_d / (8.0 * ec_rad * GHZ_H_TO_RAD_S)
    return CircuitParams(
        E_J=E_J,
        E_C=E_C,
        eps_d=m.xi_d * omega_d,
        omega_d=omega_d,
        omega_q=m.omega_q_t * omega_d,
        g=m.g_t * 8.0 * ec_rad,
        n_g=m.n_g,
    )


def bound_state_count(m: ModelParams) -> float:
    """Semiclassical count of drive-dressed bound levels, 2*sqrt(lam)/hbar_eff."""
    return 2.0 * math.sqrt(m.lam) / m.hbar_eff


REFERENCE_MODEL = ModelParams(
    lam=0.47, xi_d=2.5, hbar_eff=0.16, omega_q_t=1.0 / math.sqrt(2.0), g_t=0.01
)
