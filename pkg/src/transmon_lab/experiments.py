"""Experiment runner: JSON configurations in, CSV artifacts and a manifest out.

Each experiment resolves a JSON configuration into deterministic engine
calls, writes CSV files with documented headers into the output directory,
and finishes with a ``manifest.json`` recording everything needed to
reproduce the run: the fully resolved configuration, the software version,
the seed, the fixed protocol constants, and the convergence-check results.

Determinism contract: the same configuration and seed produce byte-identical
CSV files, independent of the worker-thread count.  Worker threads only ever
split independent units (sweep points, offset charges, Bloch-trace engines);
results are collected in fixed unit order and every stochastic unit derives
its own counter-based stream, so no reduction depends on scheduling.

Configuration shape (UTF-8 JSON, unknown keys rejected)::

    {
      "experiment":  "relax",                   # or given by the subcommand
      "model":    {"lambda": 0.47, "xi_d": 2.5, "hbar_eff": 0.16,
                   "omega_q_t": 0.7071, "g_t": 0.01, "n_g": 0.0},
      # ... or "circuit": {"E_J": ..., "E_C": ..., "eps_d": ...,
      #                    "omega_d": ..., "omega_q": ..., "g": ...}
      "tls":      {"theta": 0.0, "phi": 0.0},
      "sweep":    {"variable": "xi_d", "from": 1.5, "to": 5.0, "count": 8},
      "ensemble": {"n_traj": 5000, "seed": 11, "sampler": "husimi",
                   "n_paths": 2000},
      "numerics": {"D": 200, "d": 100, "steps_per_period": 512,
                   "dt": 0.0062832, "n_periods": 200, "n_g_count": 50},
      "output_dir": "out",
      "seed": 0
    }

Exactly one of "model" / "circuit" must be present (an empty "model" block
selects the reference parameter point).  Every other block is optional and
falls back to per-experiment defaults.  Without "sweep" the run is a single
point at the configured parameters.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import __version__, chaoscrit
from .errors import (
    ConvergenceError,
    EmptyLayerError,
    InsufficientDataError,
    InvalidParameterError,
)
from .params import REFERENCE_MODEL, TAU, CircuitParams, ModelParams, rescale
from .pendulum import (
    EnsembleSpec,
    ExplicitSampler,
    PhasePoint,
    check_short_time_convergence,
    coherent_cloud,
    ensemble_momentum_stats,
    momentum_histogram,
    poincare_section,
    resonance_crossing_trace,
)
from .qtransmon import (
    WaveState,
    build_basis,
    floquet,
    momentum_distribution,
    offset_charge_sweep,
    one_period_propagator,
    propagator_modes,
    weighted_matrix_elements,
)
from .rbm import RbmParams, fgr_rates, generate_path, psd, psd_paper_two_term
from .records import write_manifest, write_table
from .tlsdyn import (
    TlsInit,
    classical_tls_ensemble,
    coupled_period_propagator,
    evolve_coupled_quantum,
    extract_rate,
    is_drive_resonant,
    plateau_floquet,
    rbm_tls_ensemble,
    upper_envelope,
)

__all__ = [
    "EXPERIMENTS",
    "CSV_SCHEMAS",
    "SweepSpec",
    "NumericsSpec",
    "ExperimentConfig",
    "Manifest",
    "derived_seed",
    "run",
]

EXPERIMENTS = (
    "poincare",
    "pdist",
    "sigma-p",
    "crossings",
    "relax",
    "rates",
    "plateau",
    "dephase",
    "chaotic-layer",
    "rmatrix",
    "rbm-psd",
    "rbm-path",
    "floquet-spectrum",
)

#: One-line CSV schema per experiment, quoted verbatim in the CLI help.
CSV_SCHEMAS = {
    "poincare": (
        "poincare.csv: t, theta, p — stroboscopic samples at t = k*T, theta"
        " reported mod 2*pi, one block per initial condition"
    ),
    "pdist": (
        "pdist_classical.csv: p, prob — late-time ensemble momentum"
        " histogram (bin centers); pdist_quantum.csv: n, p, prob —"
        " offset-charge-averaged charge distribution of the strobed ground"
        " state"
    ),
    "sigma-p": (
        "sigma_p.csv: xi_d, sigma_p_classical, sigma_star_C — asymptotic"
        " ensemble momentum spread vs the p_bar/sqrt(3) uniform-layer value"
    ),
    "crossings": (
        "crossings.csv: t, theta, p — fine-grained trajectory;"
        " crossing_markers.csv: t, p — times and momenta where p crosses"
        " the resonance line xi_d*cos(t)"
    ),
    "relax": (
        "relax.csv: t, sz_qm, sz_cm, sz_rbm — stroboscopic <sigma_z> from"
        " the coupled quantum model, the classical-pendulum ensemble, and"
        " the reflected-Brownian-motion ensemble"
    ),
    "rates": (
        "rates.csv: omega_q_t, gamma_qm_up, gamma_qm_down, gamma_cm,"
        " gamma_rbm, gamma_fgr — measured decay rates of |<sigma_z>| (the"
        " quantum pair starts from the ground / excited state) and the"
        " golden-rule prediction 2*g_t^2*S(omega_q_t)"
    ),
    "plateau": (
        "plateau.csv: <sweep variable, default g_t>, z_ss_dressed2,"
        " z_ss_l_alpha, z_ss_uniform, z_ss_var, n_chaotic — long-time"
        " <sigma_z> plateau estimates from the coupled one-period"
        " propagator (n_chaotic counts coupled chaotic modes, averaged"
        " over offset charges)"
    ),
    "dephase": (
        "dephase.csv: t, sx_qm, sx_cm, sx_rbm, env_qm, env_cm, env_rbm —"
        " <sigma_x> precession traces and their upper envelopes on a"
        " common 16-samples-per-period grid"
    ),
    "chaotic-layer": (
        "chaotic_layer.csv: xi_d, m_bar, p_bar — chaotic-layer bound from"
        " the resonance-overlap scan (m_bar = -1 marks an empty layer);"
        " resonances.csv: xi_d, m, p_lower, p_upper — separatrix bounds"
        " per resonance"
    ),
    "rmatrix": (
        "rmatrix.csv: n_g, alpha, beta, k, Delta, R_sq — weighted Floquet"
        " matrix elements; rows with R_sq < 1e-10 are omitted"
    ),
    "rbm-psd": (
        "rbm_psd.csv: omega, psd_series, psd_paper_two_term — spectral"
        " density of the reflected-diffusion momentum (mode series vs the"
        " quoted two-term closed form)"
    ),
    "rbm-path": "rbm_path.csv: t, p — one sampled reflected-diffusion path",
    "floquet-spectrum": (
        "floquet_spectrum.csv: n_g, index, quasienergy, ipr_static —"
        " folded quasienergies of the driven transmon and each mode's"
        " inverse participation ratio over the static eigenbasis"
    ),
}

_PARAM_VARIABLES = ("lam", "xi_d", "hbar_eff", "omega_q_t", "g_t", "n_g")

# ---------------------------------------------------------------------------
# fixed protocol constants (recorded in every manifest under
# metadata["protocol"]; changing one changes the emitted numbers)

RBM_STROBE_DT = TAU / 100.0     # noise grid for strobe-sampled Bloch traces
RBM_DEPHASE_DT = TAU / 192.0    # noise grid for the 16-sample dephasing grid
DEPHASE_SAMPLES_PER_PERIOD = 16
KEEP_STRIDE = 10                # strobe thinning for long-run distributions
R_SQ_FLOOR = 1e-10              # matrix-element weight below which rows drop
K_MAX = 8                       # harmonic cutoff for matrix elements
N_T = 64                        # period samples for matrix elements
IPR_CUT = 0.3                   # chaotic-mode participation cut
PSD_TERMS = 41                  # mode-series truncation for the PSD
PSD_PROBE_TOL = 1e-4            # allowed relative truncation error of the PSD
PROBE_PERIODS = 4               # step-doubling probe window (periods)
PROBE_TOL_SZ = 1e-3             # probe tolerance on <sigma_z>
PROBE_TOL_SX = 5e-3             # probe tolerance on <sigma_x>
HIST_BINS = 100                 # momentum-histogram bin count


def derived_seed(seed: int, index: int) -> int:
    """64-bit stream seed for unit ``index``, from a counter-based generator.

    The (seed, index) pair keys a Philox block cipher, so unit seeds are
    independent, reproducible, and free of birthday collisions whatever the
    unit count.
    """
    if not 0 <= int(seed) < 2**64:
        raise InvalidParameterError("seed must fit in 64 bits")
    if index < 0:
        raise InvalidParameterError(f"unit index must be >= 0, got {index}")
    key = np.array([int(seed), int(index)], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return int(gen.integers(0, 2**63, dtype=np.uint64))


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class SweepSpec:
    """Linear sweep of one variable: ``count`` points from ``start`` to ``stop``."""

    variable: str
    start: float
    stop: float
    count: int

    def __post_init__(self) -> None:
        if self.variable == "lambda":
            object.__setattr__(self, "variable", "lam")
        if self.variable not in _PARAM_VARIABLES + ("omega",):
            raise InvalidParameterError(
                f"sweep variable {self.variable!r} not one of "
                f"{('lambda',) + _PARAM_VARIABLES[1:] + ('omega',)}"
            )
        for name in ("start", "stop"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise InvalidParameterError(
                    f"sweep {name} must be finite, got {v!r}"
                )
        if isinstance(self.count, bool) or not isinstance(self.count, int):
            raise InvalidParameterError("sweep count must be an integer")
        if self.count < 1:
            raise InvalidParameterError(
                f"sweep count must be >= 1, got {self.count}"
            )

    def values(self) -> np.ndarray:
        return np.linspace(float(self.start), float(self.stop), self.count)

    def to_dict(self) -> dict:
        return {
            "variable": "lambda" if self.variable == "lam" else self.variable,
            "from": float(self.start),
            "to": float(self.stop),
            "count": self.count,
        }


@dataclass(frozen=True)
class NumericsSpec:
    """Resolved discretization sizes shared by the engines.

    ``D`` is the charge-lattice half-width (2D+1 states), ``d`` the retained
    low-energy dimension, ``steps_per_period`` the quantum split-step count,
    ``dt`` the classical integrator / noise-grid step, ``n_periods`` the run
    length, ``n_g_count`` the offset-charge average size.
    """

    D: int
    d: int
    steps_per_period: int
    dt: float
    n_periods: int
    n_g_count: int

    def __post_init__(self) -> None:
        for name in ("D", "d", "steps_per_period", "n_periods", "n_g_count"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise InvalidParameterError(f"numerics {name} must be an integer")
            if v < 1:
                raise InvalidParameterError(
                    f"numerics {name} must be >= 1, got {v}"
                )
        if self.d > 2 * self.D + 1:
            raise InvalidParameterError(
                f"d={self.d} exceeds the lattice size 2*D+1={2 * self.D + 1}"
            )
        if self.steps_per_period < 4:
            raise InvalidParameterError(
                f"steps_per_period must be >= 4, got {self.steps_per_period}"
            )
        if not isinstance(self.dt, (int, float)) or not (
            math.isfinite(self.dt) and self.dt > 0
        ):
            raise InvalidParameterError(f"numerics dt must be > 0, got {self.dt!r}")

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "d": self.d,
            "steps_per_period": self.steps_per_period,
            "dt": float(self.dt),
            "n_periods": self.n_periods,
            "n_g_count": self.n_g_count,
        }


_BASE_NUMERICS = {
    "D": 200,
    "d": 100,
    "steps_per_period": 512,
    "dt": TAU / 1000.0,
    "n_periods": 200,
    "n_g_count": 50,
}

# per-experiment defaults for keys the configuration leaves out
_NUMERICS_OVERRIDES = {
    "poincare": {"n_periods": 1000},
    "pdist": {"n_periods": 1000},
    "sigma-p": {"n_periods": 1000},
    "crossings": {"n_periods": 20},
    "rates": {"n_g_count": 10},
    "plateau": {"n_g_count": 10},
    "dephase": {"n_g_count": 10, "dt": TAU / 1600.0},
    "floquet-spectrum": {"n_g_count": 10},
    "rbm-path": {"dt": TAU / 200.0},
}

_ENSEMBLE_DEFAULT_N = {
    "poincare": 20,
    "pdist": 5000,
    "sigma-p": 5000,
    "crossings": 1,
    "relax": 5000,
    "rates": 5000,
    "dephase": 5000,
}

_TLS_DEFAULT_THETA = {"dephase": math.pi / 2.0}

_DEFAULT_N_PATHS = 2000


def _require_mapping(block, name: str) -> dict:
    if not isinstance(block, Mapping):
        raise InvalidParameterError(f"{name} must be a JSON object, got {block!r}")
    return dict(block)


def _reject_unknown(block: dict, allowed, name: str) -> None:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise InvalidParameterError(
            f"unknown {name} key(s) {unknown}; allowed: {sorted(allowed)}"
        )


def _parse_model(block) -> ModelParams:
    block = _require_mapping(block, "model")
    merged = {**REFERENCE_MODEL.to_dict(), **block}
    _reject_unknown(merged, REFERENCE_MODEL.to_dict().keys(), "model")
    return ModelParams.from_dict(merged)


def _parse_circuit(block) -> CircuitParams:
    block = _require_mapping(block, "circuit")
    fields = {f.name for f in dataclasses.fields(CircuitParams)}
    _reject_unknown(block, fields, "circuit")
    missing = sorted(fields - set(block) - {"n_g"})
    if missing:
        raise InvalidParameterError(f"circuit block is missing {missing}")
    return CircuitParams(**block)


def _parse_tls(block, experiment: str) -> TlsInit:
    theta = _TLS_DEFAULT_THETA.get(experiment, 0.0)
    phi = 0.0
    if block is not None:
        block = _require_mapping(block, "tls")
        _reject_unknown(block, ("theta", "phi"), "tls")
        theta = block.get("theta", theta)
        phi = block.get("phi", phi)
    return TlsInit(theta=float(theta), phi=float(phi))


def _parse_sweep(block) -> SweepSpec | None:
    if block is None:
        return None
    block = _require_mapping(block, "sweep")
    if not block:
        return None
    _reject_unknown(block, ("variable", "from", "to", "count"), "sweep")
    missing = sorted({"variable", "from", "to", "count"} - set(block))
    if missing:
        raise InvalidParameterError(f"sweep block is missing {missing}")
    return SweepSpec(
        variable=block["variable"],
        start=block["from"],
        stop=block["to"],
        count=block["count"],
    )


def _parse_sampler(spec, model: ModelParams):
    if spec is None or spec == "husimi":
        return coherent_cloud(model.lam, model.hbar_eff)
    if isinstance(spec, Mapping):
        block = dict(spec)
        _reject_unknown(block, ("theta", "p"), "ensemble sampler")
        missing = sorted({"theta", "p"} - set(block))
        if missing:
            raise InvalidParameterError(f"explicit sampler is missing {missing}")
        theta = np.asarray(block["theta"], dtype=np.float64)
        p = np.asarray(block["p"], dtype=np.float64)
        if theta.ndim != 1 or theta.shape != p.shape or theta.size == 0:
            raise InvalidParameterError(
                "explicit sampler needs equal-length, nonempty theta and p lists"
            )
        points = tuple(
            PhasePoint(float(th), float(pp), 0.0) for th, pp in zip(theta, p)
        )
        return ExplicitSampler(points)
    raise InvalidParameterError(
        f"sampler must be 'husimi' or an object with theta/p lists, got {spec!r}"
    )


def _parse_ensemble(block, experiment: str, model: ModelParams,
                    seed: int) -> tuple[EnsembleSpec, int]:
    n_traj = _ENSEMBLE_DEFAULT_N.get(experiment, 1)
    ens_seed = None
    sampler_spec = None
    n_paths = _DEFAULT_N_PATHS
    if block is not None:
        block = _require_mapping(block, "ensemble")
        _reject_unknown(block, ("n_traj", "seed", "sampler", "n_paths"), "ensemble")
        sampler_spec = block.get("sampler")
        if "n_traj" in block:
            n_traj = block["n_traj"]
        elif isinstance(sampler_spec, Mapping) and "theta" in sampler_spec:
            n_traj = len(sampler_spec["theta"])
        ens_seed = block.get("seed")
        n_paths = block.get("n_paths", n_paths)
    if isinstance(n_paths, bool) or not isinstance(n_paths, int) or n_paths < 1:
        raise InvalidParameterError(f"n_paths must be an integer >= 1, got {n_paths!r}")
    sampler = _parse_sampler(sampler_spec, model)
    if ens_seed is None:
        ens_seed = derived_seed(seed, 0)
    spec = EnsembleSpec(n_traj=n_traj, seed=ens_seed, sampler=sampler)
    return spec, n_paths


def _parse_numerics(block, experiment: str) -> NumericsSpec:
    resolved = dict(_BASE_NUMERICS)
    resolved.update(_NUMERICS_OVERRIDES.get(experiment, {}))
    if block is not None:
        block = _require_mapping(block, "numerics")
        _reject_unknown(block, resolved.keys(), "numerics")
        resolved.update(block)
    return NumericsSpec(**resolved)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved description of one experiment run."""

    experiment: str
    params: ModelParams
    circuit: CircuitParams | None
    tls: TlsInit
    sweep: SweepSpec | None
    ensemble: EnsembleSpec
    n_paths: int
    numerics: NumericsSpec
    output_dir: str
    seed: int

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise InvalidParameterError(
                f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}"
            )
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise InvalidParameterError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError("seed must fit in 64 bits")
        if self.sweep is not None and self.sweep.variable == "omega" and (
            self.experiment != "rbm-psd"
        ):
            raise InvalidParameterError(
                "sweep variable 'omega' is only meaningful for rbm-psd"
            )

    @classmethod
    def from_dict(cls, data: Mapping, experiment: str | None = None
                  ) -> "ExperimentConfig":
        """Build a config from a parsed JSON object.

        ``experiment`` (from the CLI subcommand) fills a missing
        "experiment" key and must match an explicit one.
        """
        data = _require_mapping(data, "configuration")
        _reject_unknown(
            data,
            ("experiment", "model", "circuit", "tls", "sweep", "ensemble",
             "numerics", "output_dir", "seed"),
            "configuration",
        )
        named = data.get("experiment")
        if named is None and experiment is None:
            raise InvalidParameterError("configuration names no experiment")
        if named is not None and experiment is not None and named != experiment:
            raise InvalidParameterError(
                f"configuration says experiment {named!r} but the subcommand"
                f" is {experiment!r}"
            )
        exp = named if named is not None else experiment
        if exp not in EXPERIMENTS:
            raise InvalidParameterError(
                f"unknown experiment {exp!r}; choose from {EXPERIMENTS}"
            )
        if ("model" in data) == ("circuit" in data):
            raise InvalidParameterError(
                "exactly one of 'model' or 'circuit' must be present"
            )
        circuit = None
        if "circuit" in data:
            circuit = _parse_circuit(data["circuit"])
            model = rescale(circuit)
        else:
            model = _parse_model(data["model"])
        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise InvalidParameterError(f"seed must be an integer, got {seed!r}")
        ensemble, n_paths = _parse_ensemble(data.get("ensemble"), exp, model, seed)
        output_dir = data.get("output_dir", ".")
        if not isinstance(output_dir, str) or not output_dir:
            raise InvalidParameterError(
                f"output_dir must be a nonempty string, got {output_dir!r}"
            )
        return cls(
            experiment=exp,
            params=model,
            circuit=circuit,
            tls=_parse_tls(data.get("tls"), exp),
            sweep=_parse_sweep(data.get("sweep")),
            ensemble=ensemble,
            n_paths=n_paths,
            numerics=_parse_numerics(data.get("numerics"), exp),
            output_dir=output_dir,
            seed=seed,
        )

    def resolved_dict(self) -> dict:
        """Echo of the fully resolved configuration for the manifest."""
        sampler = self.ensemble.sampler
        if isinstance(sampler, ExplicitSampler):
            sampler_echo: object = {
                "theta": [q.theta for q in sampler.points],
                "p": [q.p for q in sampler.points],
            }
        else:
            sampler_echo = "husimi"
        return {
            "experiment": self.experiment,
            "model": self.params.to_dict(),
            "circuit": dataclasses.asdict(self.circuit) if self.circuit else None,
            "tls": {"theta": self.tls.theta, "phi": self.tls.phi},
            "sweep": self.sweep.to_dict() if self.sweep else None,
            "ensemble": {
                "n_traj": self.ensemble.n_traj,
                "seed": int(self.ensemble.seed),
                "sampler": sampler_echo,
                "n_paths": self.n_paths,
            },
            "numerics": self.numerics.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Manifest:
    """Result of one run: output directory, emitted files, manifest payload."""

    directory: str
    files: tuple
    payload: dict


# ---------------------------------------------------------------------------
# runner infrastructure


def _map_ordered(fn: Callable, items, threads: int) -> list:
    """Apply ``fn`` to every item, results in input order.

    With more than one worker the items run on a thread pool;
    ``ThreadPoolExecutor.map`` already yields results in submission order,
    which is what keeps reductions independent of scheduling.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def resolve_threads(threads: int | None) -> int:
    """Worker count: explicit value, 0 = auto (CPU count), None = 1."""
    if threads is None:
        return 1
    if isinstance(threads, bool) or not isinstance(threads, int):
        raise InvalidParameterError(f"threads must be an integer, got {threads!r}")
    if threads < 0:
        raise InvalidParameterError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


@dataclass
class _Ctx:
    cfg: ExperimentConfig
    out: Path
    threads: int
    files: list
    convergence: dict
    metadata: dict

    def emit(self, name: str, columns, arrays) -> None:
        write_table(self.out / name, columns, arrays)
        self.files.append(name)


def _sweep_points(cfg: ExperimentConfig, default_var: str):
    """(display name, (value, params) pairs) for the sweep or single point."""
    if cfg.sweep is None:
        return default_var, [(getattr(cfg.params, default_var), cfg.params)]
    var = cfg.sweep.variable
    display = "lambda" if var == "lam" else var
    vals = cfg.sweep.values()
    if var == "omega":
        return display, [(float(v), cfg.params) for v in vals]
    return display, [
        (float(v), cfg.params.replace(**{var: float(v)})) for v in vals
    ]


def _point_name(base: str, index: int, swept: bool) -> str:
    return f"{base}_{index:03d}.csv" if swept else f"{base}.csv"


def _layer(mp: ModelParams) -> tuple[float, float]:
    """(p_bar, diffusion rate) of the chaotic layer; empty layer raises."""
    layer = chaoscrit.chaotic_layer_bound(mp.lam, mp.xi_d)
    if layer.p_bar <= 0.0:
        raise EmptyLayerError(
            f"no chaotic layer at lam={mp.lam}, xi_d={mp.xi_d}; the"
            " momentum noise surrogate is undefined there"
        )
    return layer.p_bar, chaoscrit.diffusion_rate(mp.lam, mp.xi_d)


def _short_time_entry(ctx: _Ctx, name: str, mp: ModelParams,
                      theta: np.ndarray, p: np.ndarray) -> bool:
    """Step-halving gate on a trajectory subsample; records the outcome."""
    entry = {
        "check": "step-halving on a trajectory subsample",
        "dt": float(ctx.cfg.numerics.dt),
        "tol": 1e-4,
    }
    try:
        check_short_time_convergence(mp.lam, mp.xi_d, theta, p,
                                     ctx.cfg.numerics.dt)
        entry["pass"] = True
    except ConvergenceError as exc:
        entry["pass"] = False
        entry["detail"] = str(exc)
    ctx.convergence[name] = entry
    return entry["pass"]


def _probe_entry(ctx: _Ctx, name: str, column: str, coarse, fine,
                 tol: float) -> bool:
    """Step-doubling probe on a Bloch trace; records the max difference."""
    a = coarse.column(column)
    b = fine.column(column)
    k = min(a.size, b.size)
    diff = float(np.max(np.abs(a[:k] - b[:k])))
    entry = {
        "check": f"step-doubling on <{column}> over {PROBE_PERIODS} periods",
        "value": diff,
        "tol": tol,
        "pass": diff <= tol,
    }
    ctx.convergence[name] = entry
    return entry["pass"]


# ---------------------------------------------------------------------------
# engines shared by several experiments


def _qm_trace(mp: ModelParams, num: NumericsSpec, tls: TlsInit,
              samples_per_period: int = 1, n_steps: int | None = None,
              n_gs=None, n_periods: int | None = None):
    basis = build_basis(mp, num.D, num.d)
    return evolve_coupled_quantum(
        mp,
        basis,
        tls,
        offset_charge_sweep(num.n_g_count) if n_gs is None else n_gs,
        num.n_periods if n_periods is None else n_periods,
        samples_per_period=samples_per_period,
        n_steps=num.steps_per_period if n_steps is None else n_steps,
    )


def _cm_trace(mp: ModelParams, num: NumericsSpec, tls: TlsInit, n_traj: int,
              seed: int, samples_per_period: int = 1,
              steps_per_period: int | None = None,
              n_periods: int | None = None):
    if steps_per_period is None:
        steps_per_period = int(round(TAU / num.dt))
    return classical_tls_ensemble(
        mp,
        tls,
        num.n_periods if n_periods is None else n_periods,
        n_traj=n_traj,
        seed=seed,
        samples_per_period=samples_per_period,
        steps_per_period=steps_per_period,
    )


def _rbm_trace(mp: ModelParams, num: NumericsSpec, tls: TlsInit, n_paths: int,
               seed: int, samples_per_period: int = 1,
               noise_dt: float = RBM_STROBE_DT, n_periods: int | None = None):
    p_bar, diff = _layer(mp)
    noise = RbmParams(D=diff, p_bar=p_bar, dt=noise_dt)
    return rbm_tls_ensemble(
        mp.omega_q_t,
        mp.g_t,
        noise,
        tls,
        num.n_periods if n_periods is None else n_periods,
        n_paths=n_paths,
        seed=seed,
        samples_per_period=samples_per_period,
        initial_p=0.0,
    )


def _qm_probe(ctx: _Ctx, mp: ModelParams, tls: TlsInit,
              samples_per_period: int, column: str, tol: float) -> bool:
    num = ctx.cfg.numerics
    first_ng = [float(offset_charge_sweep(num.n_g_count)[0])]
    coarse = _qm_trace(mp, num, tls, samples_per_period,
                       n_gs=first_ng, n_periods=PROBE_PERIODS)
    fine = _qm_trace(mp, num, tls, samples_per_period,
                     n_steps=2 * num.steps_per_period,
                     n_gs=first_ng, n_periods=PROBE_PERIODS)
    return _probe_entry(ctx, "quantum", column, coarse, fine, tol)


def _cm_probe(ctx: _Ctx, mp: ModelParams, tls: TlsInit,
              samples_per_period: int, steps_per_period: int, column: str,
              tol: float) -> bool:
    n_sub = min(ctx.cfg.ensemble.n_traj, 64)
    seed = int(ctx.cfg.ensemble.seed)
    num = ctx.cfg.numerics
    coarse = _cm_trace(mp, num, tls, n_sub, seed, samples_per_period,
                       steps_per_period, n_periods=PROBE_PERIODS)
    fine = _cm_trace(mp, num, tls, n_sub, seed, samples_per_period,
                     2 * steps_per_period, n_periods=PROBE_PERIODS)
    return _probe_entry(ctx, "classical", column, coarse, fine, tol)


def _rbm_dt_entry(ctx: _Ctx, noise_dt: float) -> None:
    ctx.convergence["rbm"] = {
        "check": "exact-law path sampling; dt only limits the TLS rotation grid",
        "dt": float(noise_dt),
        "pass": True,
    }


# ---------------------------------------------------------------------------
# experiment runners


def _run_poincare(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    ens = cfg.ensemble
    theta0, p0 = ens.sampler.sample(ens.seed, ens.n_traj)
    ics = [PhasePoint(float(th), float(pp), 0.0) for th, pp in zip(theta0, p0)]
    _, points = _sweep_points(cfg, "xi_d")
    swept = cfg.sweep is not None
    for k, (val, mp) in enumerate(points):
        if not _short_time_entry(ctx, f"point_{k:03d}", mp, theta0, p0):
            ctx.metadata["aborted"] = f"convergence gate failed at point {k}"
            return
        pts = poincare_section(mp.lam, mp.xi_d, ics, num.n_periods, num.dt)
        ctx.emit(
            _point_name("poincare", k, swept),
            ("t", "theta", "p"),
            (
                np.array([q.t for q in pts]),
                np.array([q.theta for q in pts]),
                np.array([q.p for q in pts]),
            ),
        )
    ctx.metadata["n_ics"] = ens.n_traj
    ctx.metadata["points"] = [val for val, _ in points]


def _long_run_distribution(ctx: _Ctx, mp: ModelParams):
    """Offset-averaged charge distribution of the strobed ground state."""
    num = ctx.cfg.numerics
    n_gs = offset_charge_sweep(num.n_g_count)
    half = num.n_periods // 2

    def one(ng: float) -> np.ndarray:
        local = mp.replace(n_g=float(ng))
        basis = build_basis(local, num.D, num.d)
        U = one_period_propagator(local, num.D, num.steps_per_period)
        c = basis.state(0).amplitudes.astype(np.complex128)
        states = []
        for k in range(1, num.n_periods + 1):
            c = U @ c
            if k > half and k % KEEP_STRIDE == 0:
                states.append(WaveState(c / np.linalg.norm(c), k * TAU, basis))
        if not states:
            states.append(
                WaveState(c / np.linalg.norm(c), num.n_periods * TAU, basis)
            )
        return momentum_distribution(local, states).probs

    probs = _map_ordered(one, [float(g) for g in n_gs], ctx.threads)
    return np.mean(probs, axis=0)


def _run_pdist(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    ens = cfg.ensemble
    _, points = _sweep_points(cfg, "xi_d")
    swept = cfg.sweep is not None
    theta0, p0 = ens.sampler.sample(ens.seed, ens.n_traj)
    meta_points = []
    for k, (val, mp) in enumerate(points):
        if not _short_time_entry(ctx, f"classical_{k:03d}", mp, theta0, p0):
            ctx.metadata["aborted"] = f"convergence gate failed at point {k}"
            return
        layer = chaoscrit.chaotic_layer_bound(mp.lam, mp.xi_d)
        span = max(layer.p_bar + 2.0, 3.0)
        edges = np.linspace(-span, span, HIST_BINS + 1)
        hist = momentum_histogram(
            mp.lam, mp.xi_d, ens, num.n_periods * TAU, edges, num.dt
        )
        centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
        ctx.emit(_point_name("pdist_classical", k, swept),
                 ("p", "prob"), (centers, hist.mass))

        # quantum branch: unitarity of the strobe propagator is the gate
        local0 = mp.replace(n_g=float(offset_charge_sweep(num.n_g_count)[0]))
        U = one_period_propagator(local0, num.D, num.steps_per_period)
        dev = float(np.abs(U.conj().T @ U - np.eye(U.shape[0])).max())
        ctx.convergence[f"quantum_{k:03d}"] = {
            "check": "one-period propagator unitarity",
            "value": dev,
            "tol": 1e-8,
            "pass": dev <= 1e-8,
        }
        if dev > 1e-8:
            ctx.metadata["aborted"] = f"unitarity gate failed at point {k}"
            return
        probs = _long_run_distribution(ctx, mp)
        charges = np.arange(-num.D, num.D + 1, dtype=np.float64)
        ctx.emit(_point_name("pdist_quantum", k, swept),
                 ("n", "p", "prob"),
                 (charges, mp.hbar_eff * charges, probs))
        inside = np.abs(mp.hbar_eff * charges) <= layer.p_bar
        meta_points.append({
            "value": val,
            "p_bar": layer.p_bar,
            "quantum_layer_mass": float(probs[inside].sum()),
        })
    ctx.metadata["points"] = meta_points


def _run_sigma_p(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    ens = cfg.ensemble
    _, points = _sweep_points(cfg, "xi_d")
    theta0, p0 = ens.sampler.sample(ens.seed, ens.n_traj)

    for k, (val, mp) in enumerate(points):
        if not _short_time_entry(ctx, f"point_{k:03d}", mp, theta0, p0):
            ctx.metadata["aborted"] = f"convergence gate failed at point {k}"
            return

    def one(item):
        _, mp = item
        stats = ensemble_momentum_stats(mp.lam, mp.xi_d, ens,
                                        num.n_periods, num.dt)
        p_bar = chaoscrit.chaotic_layer_bound(mp.lam, mp.xi_d).p_bar
        return stats.sigma_bar, chaoscrit.sigma_star_classical(p_bar)

    rows = _map_ordered(one, points, ctx.threads)
    ctx.emit(
        "sigma_p.csv",
        ("xi_d", "sigma_p_classical", "sigma_star_C"),
        (
            np.array([mp.xi_d for _, mp in points]),
            np.array([r[0] for r in rows]),
            np.array([r[1] for r in rows]),
        ),
    )


def _run_crossings(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    ens = cfg.ensemble
    theta0, p0 = ens.sampler.sample(ens.seed, ens.n_traj)
    ic = PhasePoint(float(theta0[0]), float(p0[0]), 0.0)
    _, points = _sweep_points(cfg, "xi_d")
    swept = cfg.sweep is not None
    n_cross = []
    for k, (val, mp) in enumerate(points):
        if not _short_time_entry(ctx, f"point_{k:03d}", mp,
                                 theta0[:1], p0[:1]):
            ctx.metadata["aborted"] = f"convergence gate failed at point {k}"
            return
        trace = resonance_crossing_trace(mp.lam, mp.xi_d, ic,
                                         num.n_periods, num.dt)
        traj = trace.trajectory
        ctx.emit(
            _point_name("crossings", k, swept),
            ("t", "theta", "p"),
            (
                np.array([q.t for q in traj]),
                np.array([q.theta for q in traj]),
                np.array([q.p for q in traj]),
            ),
        )
        ctx.emit(
            _point_name("crossing_markers", k, swept),
            ("t", "p"),
            (trace.crossing_times, trace.crossing_p),
        )
        n_cross.append(int(trace.crossing_times.size))
    ctx.metadata["crossings_per_point"] = n_cross


def _run_relax(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    tls = cfg.tls
    cm_seed = int(cfg.ensemble.seed)
    rbm_seed = derived_seed(cfg.seed, 1)
    cm_steps = int(round(TAU / num.dt))
    _, points = _sweep_points(cfg, "xi_d")
    swept = cfg.sweep is not None

    mp0 = points[0][1]
    ok = _qm_probe(ctx, mp0, tls, 1, "sz", PROBE_TOL_SZ)
    ok = _cm_probe(ctx, mp0, tls, 1, cm_steps, "sz", PROBE_TOL_SZ) and ok
    _rbm_dt_entry(ctx, RBM_STROBE_DT)
    if not ok:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return

    meta_points = []
    for k, (val, mp) in enumerate(points):
        engines = {
            "qm": lambda mp=mp: _qm_trace(mp, num, tls),
            "cm": lambda mp=mp: _cm_trace(mp, num, tls, cfg.ensemble.n_traj,
                                          cm_seed, 1, cm_steps),
            "rbm": lambda mp=mp: _rbm_trace(mp, num, tls, cfg.n_paths,
                                            rbm_seed, 1, RBM_STROBE_DT),
        }
        names = list(engines)
        traces = dict(zip(names, _map_ordered(
            lambda n: engines[n](), names, ctx.threads)))
        ctx.emit(
            _point_name("relax", k, swept),
            ("t", "sz_qm", "sz_cm", "sz_rbm"),
            (
                traces["qm"].times,
                traces["qm"].column("sz"),
                traces["cm"].column("sz"),
                traces["rbm"].column("sz"),
            ),
        )
        p_bar, diff = _layer(mp)
        meta_points.append({
            "value": val,
            "p_bar": p_bar,
            "diffusion": diff,
            "cm_seed": cm_seed,
            "rbm_seed": rbm_seed,
        })
    ctx.metadata["points"] = meta_points


def _run_rates(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    cm_seed = int(cfg.ensemble.seed)
    rbm_seed = derived_seed(cfg.seed, 1)
    cm_steps = int(round(TAU / num.dt))
    _, points = _sweep_points(cfg, "omega_q_t")

    mp0 = points[0][1]
    ok = _qm_probe(ctx, mp0, TlsInit(0.0), 1, "sz", PROBE_TOL_SZ)
    ok = _cm_probe(ctx, mp0, TlsInit(0.0), 1, cm_steps, "sz",
                   PROBE_TOL_SZ) and ok
    _rbm_dt_entry(ctx, RBM_STROBE_DT)
    if not ok:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return

    def one(item):
        _, mp = item
        out = {}
        fits = {}
        tasks = {
            "gamma_qm_down": lambda: _qm_trace(mp, num, TlsInit(0.0)),
            "gamma_qm_up": lambda: _qm_trace(mp, num, TlsInit(math.pi)),
            "gamma_cm": lambda: _cm_trace(mp, num, TlsInit(0.0),
                                          cfg.ensemble.n_traj, cm_seed, 1,
                                          cm_steps),
            "gamma_rbm": lambda: _rbm_trace(mp, num, TlsInit(0.0),
                                            cfg.n_paths, rbm_seed, 1,
                                            RBM_STROBE_DT),
        }
        try:
            for name, task in tasks.items():
                fit = extract_rate(task(), n_periods=num.n_periods)
                out[name] = fit.rate
                fits[name] = fit.r_squared
            p_bar, diff = _layer(mp)
            out["gamma_fgr"] = float(sum(fgr_rates(mp.g_t, mp.omega_q_t,
                                                   diff, p_bar)))
        except (InsufficientDataError, EmptyLayerError) as exc:
            return mp.omega_q_t, None, str(exc)
        return mp.omega_q_t, (out, fits), None

    rows = _map_ordered(one, points, ctx.threads)
    results = [(w, data[0], data[1]) for w, data, _ in rows
               if data is not None]
    skipped = [{"omega_q_t": w, "reason": reason}
               for w, data, reason in rows if data is None]
    if not results:
        raise InsufficientDataError(
            "no sweep point produced a usable decay fit: "
            + "; ".join(s["reason"] for s in skipped)
        )
    cols = ("omega_q_t", "gamma_qm_up", "gamma_qm_down", "gamma_cm",
            "gamma_rbm", "gamma_fgr")
    ctx.emit(
        "rates.csv",
        cols,
        tuple(
            np.array([
                row[0] if c == "omega_q_t" else row[1][c] for row in results
            ])
            for c in cols
        ),
    )
    ctx.metadata["fit_r_squared"] = [row[2] for row in results]
    ctx.metadata["resonant"] = [
        bool(is_drive_resonant(row[0])) for row in results
    ]
    ctx.metadata["skipped"] = skipped
    ctx.metadata["seeds"] = {"cm": cm_seed, "rbm": rbm_seed}


def _floquet_product_count(mp: ModelParams, num: NumericsSpec) -> float:
    """Chaotic coupled modes counted against the decoupled Floquet basis.

    The reference vectors are TLS states tensored with the Floquet modes of
    the uncoupled transmon; the participation of each coupled mode over that
    basis gives the alternative chaotic-mode count reported alongside the
    static-eigenbasis one.
    """
    n_gs = offset_charge_sweep(num.n_g_count)
    counts = []
    for ng in n_gs:
        local = mp.replace(n_g=float(ng))
        basis = build_basis(local, num.D, num.d)
        U = coupled_period_propagator(local, basis, num.steps_per_period)
        _, modes, _ = propagator_modes(U)
        F = floquet(local, basis, num.steps_per_period).modes
        a = F.conj().T @ modes[: num.d, :]
        b = F.conj().T @ modes[num.d :, :]
        ipr_fp = (np.abs(a) ** 4).sum(axis=0) + (np.abs(b) ** 4).sum(axis=0)
        counts.append(int(np.count_nonzero(ipr_fp < IPR_CUT)))
    return float(np.mean(counts))


def _run_plateau(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    var, points = _sweep_points(cfg, "g_t")
    n_gs = [float(g) for g in offset_charge_sweep(num.n_g_count)]

    mp0 = points[0][1]
    basis0 = build_basis(mp0, num.D, num.d)
    coarse = plateau_floquet(mp0, basis0, cfg.tls, n_gs[:1], IPR_CUT,
                             num.steps_per_period)
    fine = plateau_floquet(mp0, basis0, cfg.tls, n_gs[:1], IPR_CUT,
                           2 * num.steps_per_period)
    diff = abs(coarse.z_ss_dressed2 - fine.z_ss_dressed2)
    ctx.convergence["plateau"] = {
        "check": "step-doubling on the diagonal plateau estimate",
        "value": diff,
        "tol": PROBE_TOL_SZ,
        "pass": diff <= PROBE_TOL_SZ,
    }
    if diff > PROBE_TOL_SZ:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return

    def one(item):
        _, mp = item
        basis = build_basis(mp, num.D, num.d)
        est = plateau_floquet(mp, basis, cfg.tls, n_gs, IPR_CUT,
                              num.steps_per_period)
        return est, _floquet_product_count(mp, num)

    rows = _map_ordered(one, points, ctx.threads)
    ctx.emit(
        "plateau.csv",
        (var, "z_ss_dressed2", "z_ss_l_alpha", "z_ss_uniform", "z_ss_var",
         "n_chaotic"),
        (
            np.array([val for val, _ in points]),
            np.array([e.z_ss_dressed2 for e, _ in rows]),
            np.array([e.z_ss_l_alpha for e, _ in rows]),
            np.array([e.z_ss_uniform for e, _ in rows]),
            np.array([e.z_ss_var for e, _ in rows]),
            np.array([e.n_chaotic for e, _ in rows]),
        ),
    )
    ctx.metadata["points"] = [
        {
            "value": val,
            "n_chaotic_static": est.n_chaotic,
            "n_chaotic_floquet_product": fp,
        }
        for (val, _), (est, fp) in zip(points, rows)
    ]


def _run_dephase(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    tls = cfg.tls
    spp = DEPHASE_SAMPLES_PER_PERIOD
    cm_steps = int(round(TAU / num.dt))
    cm_seed = int(cfg.ensemble.seed)
    rbm_seed = derived_seed(cfg.seed, 1)
    _, points = _sweep_points(cfg, "xi_d")
    swept = cfg.sweep is not None

    mp0 = points[0][1]
    ok = _qm_probe(ctx, mp0, tls, spp, "sx", PROBE_TOL_SX)
    ok = _cm_probe(ctx, mp0, tls, spp, cm_steps, "sx", PROBE_TOL_SX) and ok
    _rbm_dt_entry(ctx, RBM_DEPHASE_DT)
    if not ok:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return

    fit_periods = min(50, num.n_periods)
    meta_points = []
    for k, (val, mp) in enumerate(points):
        engines = {
            "qm": lambda mp=mp: _qm_trace(mp, num, tls, spp),
            "cm": lambda mp=mp: _cm_trace(mp, num, tls, cfg.ensemble.n_traj,
                                          cm_seed, spp, cm_steps),
            "rbm": lambda mp=mp: _rbm_trace(mp, num, tls, cfg.n_paths,
                                            rbm_seed, spp, RBM_DEPHASE_DT),
        }
        names = list(engines)
        traces = dict(zip(names, _map_ordered(
            lambda n: engines[n](), names, ctx.threads)))
        envs = {
            n: upper_envelope(traces[n], "sx", fit_periods) for n in names
        }
        ctx.emit(
            _point_name("dephase", k, swept),
            ("t", "sx_qm", "sx_cm", "sx_rbm", "env_qm", "env_cm", "env_rbm"),
            (
                traces["qm"].times,
                traces["qm"].column("sx"),
                traces["cm"].column("sx"),
                traces["rbm"].column("sx"),
                envs["qm"].column("envelope"),
                envs["cm"].column("envelope"),
                envs["rbm"].column("envelope"),
            ),
        )
        meta_points.append({
            "value": val,
            "demodulation_omega": {
                n: envs[n].meta["demodulation_omega"] for n in names
            },
            "cm_seed": cm_seed,
            "rbm_seed": rbm_seed,
        })
    ctx.metadata["points"] = meta_points


def _run_chaotic_layer(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    _, points = _sweep_points(cfg, "xi_d")
    xi_vals, m_bars, p_bars = [], [], []
    res_rows: list[tuple[float, int, float, float]] = []
    for val, mp in points:
        layer = chaoscrit.chaotic_layer_bound(mp.lam, mp.xi_d)
        xi_vals.append(mp.xi_d)
        m_bars.append(-1 if layer.m_bar is None else layer.m_bar)
        p_bars.append(layer.p_bar)
        m_max = max(3, int(math.ceil(mp.xi_d)) + 2)
        for curve in chaoscrit.resonance_curves(mp.lam, mp.xi_d, m_max):
            res_rows.append(
                (mp.xi_d, curve.m, curve.lower_at_zero, curve.upper_at_zero)
            )
    ctx.emit(
        "chaotic_layer.csv",
        ("xi_d", "m_bar", "p_bar"),
        (np.array(xi_vals), np.array(m_bars, dtype=np.float64),
         np.array(p_bars)),
    )
    ctx.emit(
        "resonances.csv",
        ("xi_d", "m", "p_lower", "p_upper"),
        tuple(np.array([r[i] for r in res_rows]) for i in range(4)),
    )
    lam = cfg.params.lam
    ctx.convergence["analytic"] = {
        "check": "closed-form resonance scan; no discretization", "pass": True,
    }
    ctx.metadata["threshold_lower"] = chaoscrit.threshold_lower(lam)
    ctx.metadata["threshold_upper"] = chaoscrit.threshold_upper(lam)


def _run_rmatrix(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    mp = cfg.params
    n_gs = [float(g) for g in offset_charge_sweep(num.n_g_count)]

    def elements(ng: float, n_t: int):
        local = mp.replace(n_g=ng)
        basis = build_basis(local, num.D, num.d)
        return weighted_matrix_elements(local, basis, k_max=K_MAX, n_t=n_t)

    els_coarse = elements(n_gs[0], N_T)
    els_fine = elements(n_gs[0], 2 * N_T)
    mass_c = sum(e.r_sq for e in els_coarse)
    mass_f = sum(e.r_sq for e in els_fine)
    rel = abs(mass_c - mass_f) / max(mass_f, 1e-300)
    ctx.convergence["harmonic_sampling"] = {
        "check": "period-sampling doubling on the total element weight",
        "value": rel,
        "tol": 1e-3,
        "pass": rel <= 1e-3,
    }
    if rel > 1e-3:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return

    def one(ng: float):
        els = elements(ng, N_T)
        kept = [e for e in els if e.r_sq >= R_SQ_FLOOR]
        dropped_mass = sum(e.r_sq for e in els) - sum(e.r_sq for e in kept)
        return kept, len(els), dropped_mass

    results = _map_ordered(one, n_gs, ctx.threads)
    cols: dict[str, list] = {
        "n_g": [], "alpha": [], "beta": [], "k": [], "Delta": [], "R_sq": [],
    }
    kept_counts = []
    dropped_total = 0.0
    for ng, (kept, total, dropped) in zip(n_gs, results):
        kept_counts.append(len(kept))
        dropped_total += dropped
        for e in kept:
            cols["n_g"].append(ng)
            cols["alpha"].append(float(e.alpha))
            cols["beta"].append(float(e.beta))
            cols["k"].append(float(e.k))
            cols["Delta"].append(e.delta)
            cols["R_sq"].append(e.r_sq)
    ctx.emit(
        "rmatrix.csv",
        tuple(cols),
        tuple(np.array(v) for v in cols.values()),
    )
    ctx.metadata["kept_per_n_g"] = kept_counts
    ctx.metadata["weight_floor"] = R_SQ_FLOOR
    ctx.metadata["dropped_weight"] = dropped_total
    ctx.metadata["k_max"] = K_MAX
    ctx.metadata["n_t"] = N_T


def _run_rbm_psd(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    mp = cfg.params
    p_bar, diff = _layer(mp)
    if cfg.sweep is None:
        omegas = np.array([mp.omega_q_t])
    else:
        omegas = cfg.sweep.values()
    series = psd(diff, p_bar, omegas, n_terms=PSD_TERMS)
    refined = psd(diff, p_bar, omegas, n_terms=2 * PSD_TERMS - 1)
    rel = float(np.max(np.abs(series - refined) / np.maximum(refined, 1e-300)))
    ctx.convergence["series_truncation"] = {
        "check": "mode-series truncation against a doubled term count",
        "value": rel,
        "tol": PSD_PROBE_TOL,
        "pass": rel <= PSD_PROBE_TOL,
    }
    if rel > PSD_PROBE_TOL:
        ctx.metadata["aborted"] = "convergence probe failed before the main run"
        return
    ctx.emit(
        "rbm_psd.csv",
        ("omega", "psd_series", "psd_paper_two_term"),
        (omegas, series, psd_paper_two_term(diff, p_bar, omegas)),
    )
    ctx.metadata["D"] = diff
    ctx.metadata["p_bar"] = p_bar
    ctx.metadata["n_terms"] = PSD_TERMS


def _run_rbm_path(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    mp = cfg.params
    p_bar, diff = _layer(mp)
    noise = RbmParams(D=diff, p_bar=p_bar, dt=num.dt,
                      seed=int(cfg.ensemble.seed))
    path = generate_path(noise, num.n_periods * TAU, initial_p=0.0)
    ctx.emit("rbm_path.csv", ("t", "p"), (path.times, path.values))
    ctx.convergence["sampling"] = {
        "check": "exact-law path sampling (dt-independent joint law)",
        "pass": True,
    }
    ctx.metadata["D"] = diff
    ctx.metadata["p_bar"] = p_bar
    ctx.metadata["dt"] = float(num.dt)
    ctx.metadata["seed"] = int(cfg.ensemble.seed)


def _run_floquet_spectrum(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    num = cfg.numerics
    mp = cfg.params
    n_gs = [float(g) for g in offset_charge_sweep(num.n_g_count)]

    def one(ng: float):
        local = mp.replace(n_g=ng)
        basis = build_basis(local, num.D, num.d)
        fd = floquet(local, basis, num.steps_per_period)
        ipr_static = (np.abs(fd.modes) ** 4).sum(axis=0)
        return fd.quasienergies, ipr_static, fd.unitarity

    results = _map_ordered(one, n_gs, ctx.threads)
    dev = max(r[2] for r in results)
    ctx.convergence["unitarity"] = {
        "check": "one-period propagator unitarity over all offsets",
        "value": dev,
        "tol": 1e-8,
        "pass": dev <= 1e-8,
    }
    n_g_col, idx_col, eps_col, ipr_col = [], [], [], []
    for ng, (eps, ipr_static, _) in zip(n_gs, results):
        n_g_col.append(np.full(eps.size, ng))
        idx_col.append(np.arange(eps.size, dtype=np.float64))
        eps_col.append(eps)
        ipr_col.append(ipr_static)
    ctx.emit(
        "floquet_spectrum.csv",
        ("n_g", "index", "quasienergy", "ipr_static"),
        (np.concatenate(n_g_col), np.concatenate(idx_col),
         np.concatenate(eps_col), np.concatenate(ipr_col)),
    )
    ctx.metadata["modes_per_offset"] = num.d


_RUNNERS = {
    "poincare": _run_poincare,
    "pdist": _run_pdist,
    "sigma-p": _run_sigma_p,
    "crossings": _run_crossings,
    "relax": _run_relax,
    "rates": _run_rates,
    "plateau": _run_plateau,
    "dephase": _run_dephase,
    "chaotic-layer": _run_chaotic_layer,
    "rmatrix": _run_rmatrix,
    "rbm-psd": _run_rbm_psd,
    "rbm-path": _run_rbm_path,
    "floquet-spectrum": _run_floquet_spectrum,
}


def _protocol(cfg: ExperimentConfig) -> dict:
    """Fixed internal constants the experiment used, for the manifest."""
    base = {"unit_seed_derivation": "Philox key (seed, unit_index)"}
    exp = cfg.experiment
    if exp in ("relax", "rates"):
        base.update({
            "rbm_dt": RBM_STROBE_DT,
            "cm_steps_per_period": int(round(TAU / cfg.numerics.dt)),
            "probe_periods": PROBE_PERIODS,
        })
    if exp == "dephase":
        base.update({
            "rbm_dt": RBM_DEPHASE_DT,
            "cm_steps_per_period": int(round(TAU / cfg.numerics.dt)),
            "samples_per_period": DEPHASE_SAMPLES_PER_PERIOD,
            "probe_periods": PROBE_PERIODS,
        })
    if exp == "pdist":
        base.update({"keep_stride": KEEP_STRIDE, "hist_bins": HIST_BINS})
    if exp == "rmatrix":
        base.update({"k_max": K_MAX, "n_t": N_T, "r_sq_floor": R_SQ_FLOOR})
    if exp in ("plateau", "floquet-spectrum"):
        base.update({"ipr_cut": IPR_CUT})
    if exp == "rbm-psd":
        base.update({"n_terms": PSD_TERMS})
    return base


def run(config: ExperimentConfig, threads: int | None = 1) -> Manifest:
    """Execute one experiment; emit its CSV files and ``manifest.json``.

    Returns the manifest; raises :class:`ConvergenceError` after writing the
    manifest if any convergence gate failed (the manifest then carries
    ``status: "convergence-failed"`` and the failing entries).
    """
    threads = resolve_threads(threads)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Ctx(cfg=config, out=out, threads=threads, files=[],
               convergence={}, metadata={})
    ctx.metadata["protocol"] = _protocol(config)
    _RUNNERS[config.experiment](ctx)
    failed = sorted(
        name for name, entry in ctx.convergence.items()
        if not entry.get("pass", True)
    )
    payload = {
        "experiment": config.experiment,
        "version": __version__,
        "seed": config.seed,
        "threads": threads,
        "config": config.resolved_dict(),
        "files": list(ctx.files),
        "convergence": ctx.convergence,
        "metadata": ctx.metadata,
        "status": "convergence-failed" if failed else "ok",
    }
    write_manifest(out, payload)
    if failed:
        details = "; ".join(
            f"{name}: {ctx.convergence[name].get('detail', ctx.convergence[name])}"
            for name in failed
        )
        raise ConvergenceError(
            f"convergence check(s) failed: {details} (see manifest.json)"
        )
    return Manifest(directory=str(out), files=tuple(ctx.files),
                    payload=payload)
