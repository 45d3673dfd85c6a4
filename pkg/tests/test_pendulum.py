"""Driven pendulum: integrator, sections, standard map, ensembles, crossings.

Monte Carlo recipes run on frozen Philox seeds, so every asserted number is
bit-reproducible; tolerance bands come from the physics (separatrix bounds,
quasilinear diffusion, stationary-phase jump sizes) while tighter pins guard
against silent regressions of the integrator.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.special import ellipk

from transmon_lab import chaoscrit as cc
from transmon_lab import pendulum as pd
from transmon_lab.errors import (
    ConvergenceError,
    IntegrationFailureError,
    InvalidParameterError,
)
from transmon_lab.params import TAU
from transmon_lab.pendulum import (
    EnsembleSpec,
    ExplicitSampler,
    GaussianCloudSampler,
    PhasePoint,
    coherent_cloud,
    ensemble_momentum_stats,
    integrate,
    momentum_histogram,
    poincare_section,
    resonance_crossing_trace,
    standard_map_iterate,
)

LAM = 0.47

# Chaotic-layer half widths from the overlap scan (values frozen in
# test_chaoscrit; recomputed here so the two modules stay consistent).
P_BAR_15 = cc.chaotic_layer_bound(LAM, 1.5).p_bar
P_BAR_25 = cc.chaotic_layer_bound(LAM, 2.5).p_bar
P_BAR_50 = cc.chaotic_layer_bound(LAM, 5.0).p_bar


def _energy(q: PhasePoint, lam: float = LAM) -> float:
    return 0.5 * q.p * q.p - lam * math.cos(q.theta)


def _sea_ics(n: int, seed: int = 777) -> list[PhasePoint]:
    """Chaotic-sea initial conditions: uniform angle, |p| in [0.4, 0.7]."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    theta = rng.uniform(0.0, TAU, n)
    p = rng.uniform(0.4, 0.7, n) * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return [PhasePoint(float(a), float(b)) for a, b in zip(theta, p)]


class TestPhasePoint:
    def test_defaults_and_wrap(self):
        q = PhasePoint(7.0, -1.5)
        assert q.t == 0.0
        assert math.isclose(q.theta_wrapped, 7.0 - TAU)
        assert 0.0 <= PhasePoint(-0.1, 0.0).theta_wrapped < TAU

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(InvalidParameterError):
            PhasePoint(bad, 0.0)
        with pytest.raises(InvalidParameterError):
            PhasePoint(0.0, bad)


class TestSamplers:
    def test_gaussian_cloud_deterministic_per_index(self):
        s = GaussianCloudSampler(0.0, 0.0, 0.5, 0.3)
        th5, p5 = s.sample(42, 5)
        th9, p9 = s.sample(42, 9)
        # Per-trajectory streams: growing the ensemble keeps old members.
        assert np.array_equal(th5, th9[:5])
        assert np.array_equal(p5, p9[:5])
        th_other, _ = s.sample(43, 5)
        assert not np.array_equal(th5, th_other)

    def test_coherent_cloud_widths(self):
        s = coherent_cloud(LAM, 0.16)
        assert math.isclose(s.sigma_theta, math.sqrt(0.16 / math.sqrt(LAM)))
        assert math.isclose(s.sigma_p, math.sqrt(0.16 * math.sqrt(LAM)))
        th, p = s.sample(0, 20000)
        assert abs(np.std(th) - s.sigma_theta) < 0.02 * s.sigma_theta
        assert abs(np.std(p) - s.sigma_p) < 0.02 * s.sigma_p

    def test_explicit_sampler_count_guard(self):
        s = ExplicitSampler([PhasePoint(0.0, 0.0)])
        with pytest.raises(InvalidParameterError):
            s.sample(0, 2)

    def test_ensemble_spec_validation(self):
        s = ExplicitSampler([PhasePoint(0.0, 0.0)])
        with pytest.raises(InvalidParameterError):
            EnsembleSpec(0, 0, s)
        with pytest.raises(InvalidParameterError):
            EnsembleSpec(1, -1, s)


class TestIntegrate:
    def test_stable_fixed_point_exact(self):
        traj = integrate(LAM, 0.0, PhasePoint(0.0, 0.0), 50 * TAU)
        assert traj[-1].theta == 0.0
        assert traj[-1].p == 0.0

    def test_unstable_fixed_point(self):
        # sin(pi) ~ 1.2e-16 feeds the unstable manifold at roundoff level;
        # theta stays pinned to the double nearest pi while |p| grows only
        # linearly (measured 3.6e-16 per period) on this horizon.
        traj = integrate(LAM, 0.0, PhasePoint(math.pi, 0.0), 10 * TAU)
        assert traj[-1].theta == math.pi
        assert abs(traj[-1].p) < 1e-13

    def test_energy_drift_1000_periods(self):
        # Second-order splitting: max relative deviation scales as dt^2;
        # measured 8.1e-9 at this step for the (2.5, 0) libration orbit.
        ic = PhasePoint(2.5, 0.0)
        pts = poincare_section(LAM, 0.0, [ic], 1000, TAU / 30000)
        h0 = _energy(ic)
        dev = max(abs(_energy(q) - h0) for q in pts) / abs(h0)
        assert dev < 1e-8

    def test_oscillation_period_against_adaptive_oracle(self):
        # Libration with H slightly below the separatrix energy.
        theta0 = 2.5
        t_ell = 4.0 / math.sqrt(LAM) * ellipk(math.sin(theta0 / 2.0) ** 2)

        sol = solve_ivp(
            lambda t, y: [y[1], -LAM * math.sin(y[0])],
            (0.0, 12.0 * t_ell),
            [theta0, 0.0],
            method="DOP853",
            rtol=1e-12,
            atol=1e-12,
            dense_output=True,
        )
        ts = np.linspace(0.0, 12.0 * t_ell, 240001)
        th = sol.sol(ts)[0]

        def mean_period(times, values):
            idx = np.flatnonzero((values[:-1] < 0.0) & (values[1:] >= 0.0))
            frac = values[idx] / (values[idx] - values[idx + 1])
            crossings = times[idx] + frac * (times[idx + 1] - times[idx])
            return float(np.mean(np.diff(crossings)))

        t_oracle = mean_period(ts, th)
        assert abs(t_oracle - t_ell) / t_ell < 1e-9

        dt = TAU / 1000.0
        n_steps = round(12.0 * t_ell / dt)
        traj = integrate(LAM, 0.0, PhasePoint(theta0, 0.0), n_steps * dt, dt)
        t_grid = dt * np.arange(len(traj))
        th_grid = np.array([q.theta for q in traj])
        t_mine = mean_period(t_grid, th_grid)
        # measured 1.4e-7 at dt = T/1000
        assert abs(t_mine - t_oracle) / t_oracle < 1e-6

    def test_overflow_raises_with_last_valid_time(self):
        with pytest.raises(IntegrationFailureError) as exc:
            integrate(LAM, 0.0, PhasePoint(0.0, 1e307), 10 * TAU)
        assert exc.value.last_valid_time >= 0.0

    def test_dt_and_t_end_validation(self):
        ic = PhasePoint(0.0, 0.1)
        with pytest.raises(InvalidParameterError):
            integrate(LAM, 0.0, ic, TAU, dt=TAU / 100)  # coarser than T/200
        with pytest.raises(InvalidParameterError):
            integrate(LAM, 0.0, ic, 1.0005 * TAU, dt=TAU / 1000)  # half a step over
        with pytest.raises(InvalidParameterError):
            integrate(-0.1, 0.0, ic, TAU)
        with pytest.raises(InvalidParameterError):
            integrate(LAM, -1.0, ic, TAU)

    def test_time_reversal_100_periods(self):
        # Palindromic splitting with an odd drive: flipping p retraces the
        # discrete orbit exactly; residual is pure roundoff (measured 6e-12).
        ic = PhasePoint(1.2, 0.8)
        fwd = integrate(LAM, 0.0, ic, 100 * TAU)
        end = fwd[-1]
        back = integrate(LAM, 0.0, PhasePoint(end.theta, -end.p), 100 * TAU)
        assert abs(back[-1].theta - ic.theta) < 1e-9
        assert abs(-back[-1].p - ic.p) < 1e-9

    @settings(max_examples=10, derandomize=True)
    @given(
        theta=st.floats(-3.0, 3.0),
        p=st.floats(-1.5, 1.5),
        n_periods=st.integers(1, 5),
    )
    def test_time_reversal_property(self, theta, p, n_periods):
        ic = PhasePoint(theta, p)
        fwd = integrate(LAM, 0.0, ic, n_periods * TAU)
        end = fwd[-1]
        back = integrate(LAM, 0.0, PhasePoint(end.theta, -end.p), n_periods * TAU)
        assert abs(back[-1].theta - ic.theta) < 1e-10
        assert abs(-back[-1].p - ic.p) < 1e-10

    def test_strobe_matches_full_recording(self):
        ic = PhasePoint(1.3, 0.55)
        traj = integrate(LAM, 1.5, ic, 5 * TAU)
        sec = poincare_section(LAM, 1.5, [ic], 5)
        assert abs(traj[-1].theta % TAU - sec[-1].theta) < 1e-10
        assert abs(traj[-1].p - sec[-1].p) < 1e-10


class TestPoincareSection:
    def test_level_sets_undriven(self):
        ic = PhasePoint(1.0, 0.0)
        pts = poincare_section(LAM, 0.0, [ic], 200, TAU / 4000)
        h0 = _energy(ic)
        dev = max(abs(_energy(q) - h0) for q in pts) / abs(h0)
        # measured 2.2e-7 at dt = T/4000
        assert dev < 1e-6

    def test_zero_periods_returns_wrapped_ics(self):
        ics = [PhasePoint(7.0, 0.3), PhasePoint(-1.0, -0.2)]
        pts = poincare_section(LAM, 1.5, ics, 0)
        assert len(pts) == 2
        assert math.isclose(pts[0].theta, 7.0 - TAU)
        assert math.isclose(pts[1].theta, TAU - 1.0)
        assert pts[0].p == 0.3

    def test_section_shape_and_wrapping(self):
        ics = _sea_ics(3)
        pts = poincare_section(LAM, 1.5, ics, 4)
        assert len(pts) == 3 * 5
        assert all(0.0 <= q.theta < TAU for q in pts)
        # ordered (ic, period): timestamps repeat per trajectory
        t_first = [q.t for q in pts[:5]]
        assert t_first == [n * TAU for n in range(5)]

    def test_chaotic_layer_fill_and_hard_bound(self):
        # 24 sea trajectories, 1000 periods. The layer fills and stays
        # within p_bar + 1 (measured max |p| = 3.557 against 3.661).
        ics = _sea_ics(24)
        pts = poincare_section(LAM, 1.5, ics, 1000)
        p = np.array([q.p for q in pts])
        assert np.max(np.abs(p)) <= P_BAR_15 + 1.0
        assert np.max(np.abs(p)) < 3.60  # regression pin
        counts, _ = np.histogram(p, bins=12, range=(-P_BAR_15, P_BAR_15))
        assert counts.min() > 0

    @pytest.mark.xfail(
        strict=True,
        reason="near-critical gap between the m=2 and m=3 resonances at "
        "xi_d=1.5 lets strobe points spill past p_bar + 0.5: measured "
        "max |p| = 3.557 with 1.1% of section mass beyond, stable under "
        "dt refinement, so the spill is dynamics rather than step error",
    )
    def test_no_mass_beyond_half_unit_margin(self):
        ics = _sea_ics(24)
        pts = poincare_section(LAM, 1.5, ics, 1000)
        p = np.array([q.p for q in pts])
        assert np.max(np.abs(p)) <= P_BAR_15 + 0.5


class TestStandardMap:
    def test_zero_kick_free_rotation(self):
        traj = standard_map_iterate(0.0, PhasePoint(0.3, 0.25), 4)
        assert [q.p for q in traj] == [0.25] * 5
        for j, q in enumerate(traj):
            assert math.isclose(q.theta, 0.3 + j * TAU * 0.25)
            assert math.isclose(q.t, j * TAU)

    def test_origin_fixed_point(self):
        traj = standard_map_iterate(2.0, PhasePoint(0.0, 0.0), 10)
        assert all(q.theta == 0.0 and q.p == 0.0 for q in traj)

    def test_quasilinear_diffusion(self):
        # Var(p_n) ~ D n T with D = k^2/(2T) in the strong-kick regime.
        sm = cc.standard_map_k(LAM, 1.5)
        assert sm.K > 8.0
        rng = np.random.Generator(np.random.Philox(key=np.array([321, 0], dtype=np.uint64)))
        n_traj, n_steps = 10**4, 50
        theta = rng.uniform(0.0, TAU, n_traj)
        p = np.zeros(n_traj)
        for _ in range(n_steps):
            p = p - sm.k * np.sin(theta)
            theta = theta + TAU * p
        ratio = p.var() / (sm.D * n_steps * TAU)
        assert abs(ratio - 1.0) < 0.2
        assert abs(ratio - 0.876) < 0.02  # regression pin

    @settings(max_examples=20, derandomize=True)
    @given(
        theta=st.floats(0.0, TAU),
        p=st.floats(-3.0, 3.0),
        k=st.floats(0.0, 2.0),
    )
    def test_map_inverse_roundtrip(self, theta, p, k):
        traj = standard_map_iterate(k, PhasePoint(theta, p), 5)
        th1, p1 = traj[-1].theta, traj[-1].p
        for _ in range(5):
            th1 = th1 - TAU * p1
            p1 = p1 + k * math.sin(th1)
        assert abs(th1 - theta) < 1e-9
        assert abs(p1 - p) < 1e-9

    def test_iterate_validation(self):
        with pytest.raises(InvalidParameterError):
            standard_map_iterate(math.nan, PhasePoint(0.0, 0.0), 3)
        with pytest.raises(InvalidParameterError):
            standard_map_iterate(1.0, PhasePoint(0.0, 0.0), -1)


class TestStrobeVsStandardMap:
    def test_increment_rate_agreement_fast_crossing(self):
        """Local momentum diffusion rates agree deep in the chaotic sea.

        At xi_d = 5 the per-period variance production of the stroboscopic
        dynamics, E[(p_{n+1} - p_n)^2] pooled over the first 20 periods,
        matches k^2/2 of the reduced map from identical initial conditions
        (measured ratio 1.11).  The cumulative ensemble variance is a
        different quantity: island stickiness and correlated recrossings
        suppress its slope well below quasilinear on this horizon (measured
        0.03-0.09 per period from momentum shells against 0.25 for the
        map), so the statistical comparison is made on the per-period
        increments that the map reduction actually models.
        """
        n_traj, n_periods = 4000, 20
        rng = np.random.Generator(np.random.Philox(key=np.array([11, 0], dtype=np.uint64)))
        theta0 = rng.uniform(0.0, TAU, n_traj)
        p0 = rng.uniform(1.0, 3.0, n_traj)
        ics = [PhasePoint(float(a), float(b)) for a, b in zip(theta0, p0)]

        pts = poincare_section(LAM, 5.0, ics, n_periods)
        p_path = np.array([q.p for q in pts]).reshape(n_traj, n_periods + 1)
        ms_pend = float(np.mean(np.diff(p_path, axis=1) ** 2))

        k = cc.standard_map_k(LAM, 5.0).k
        theta_m, p_m = theta0.copy(), p0.copy()
        acc = 0.0
        for _ in range(n_periods):
            p_new = p_m - k * np.sin(theta_m)
            acc += float(np.mean((p_new - p_m) ** 2))
            theta_m = theta_m + TAU * p_new
            p_m = p_new
        ms_map = acc / n_periods

        ratio = ms_pend / ms_map
        assert abs(ratio - 1.0) < 0.25
        assert abs(ratio - 1.11) < 0.04  # regression pin


class TestEnsembleMomentumStats:
    def test_fixed_point_ensemble_is_static(self):
        ens = EnsembleSpec(5, 0, ExplicitSampler([PhasePoint(0.0, 0.0)] * 5))
        stats = ensemble_momentum_stats(LAM, 0.0, ens, 20)
        assert stats.sigma_bar == 0.0
        assert np.all(stats.std_p == 0.0)
        assert len(stats.times) == 21

    def test_sigma_bar_matches_uniform_layer_prediction(self):
        # Long-time chaotic mixing: sigma_bar -> p_bar/sqrt(3) (measured
        # relative deviation 0.088 for this seed).
        ens = EnsembleSpec(1500, 2025, coherent_cloud(LAM, 0.16))
        stats = ensemble_momentum_stats(LAM, 2.5, ens, 600)
        target = P_BAR_25 / math.sqrt(3.0)
        assert abs(stats.sigma_bar - target) / target < 0.15

    def test_sigma_bar_window_definition(self):
        ens = EnsembleSpec(50, 7, coherent_cloud(LAM, 0.16))
        stats = ensemble_momentum_stats(LAM, 1.5, ens, 40)
        assert math.isclose(stats.sigma_bar, float(np.mean(stats.std_p[20:])))

    def test_doubling_ensemble_within_statistical_error(self):
        sampler = coherent_cloud(LAM, 0.16)
        s400 = ensemble_momentum_stats(LAM, 2.5, EnsembleSpec(400, 5, sampler), 200)
        s800 = ensemble_momentum_stats(LAM, 2.5, EnsembleSpec(800, 5, sampler), 200)
        # Disjoint-half spread of the 800er estimates the Monte Carlo error.
        th, p = sampler.sample(5, 800)
        tail = [PhasePoint(float(a), float(b)) for a, b in zip(th[400:], p[400:])]
        s_tail = ensemble_momentum_stats(LAM, 2.5, EnsembleSpec(400, 5, ExplicitSampler(tail)), 200)
        se = max(abs(s400.sigma_bar - s_tail.sigma_bar) / math.sqrt(2.0), 0.005)
        assert abs(s400.sigma_bar - s800.sigma_bar) < 3.0 * se

    def test_n_periods_validation(self):
        ens = EnsembleSpec(2, 0, ExplicitSampler([PhasePoint(0.0, 0.0)] * 2))
        with pytest.raises(InvalidParameterError):
            ensemble_momentum_stats(LAM, 1.5, ens, 0)


class TestMomentumHistogram:
    def test_uniform_over_chaotic_layer(self):
        # Long-time distribution flattens over [-p_bar, p_bar]; with 16
        # bins and 4000 sea trajectories the measured max deviation from
        # the uniform level at t = 1000 T is 11.5%.
        ens = EnsembleSpec(4000, 0, ExplicitSampler(_sea_ics(4000)))
        edges = np.linspace(-P_BAR_15, P_BAR_15, 17)
        hist = momentum_histogram(LAM, 1.5, ens, 1000 * TAU, edges)
        level = hist.mass.mean()
        max_dev = float(np.max(np.abs(hist.mass - level) / level))
        assert max_dev < 0.25
        assert max_dev < 0.18  # regression margin

    def test_mass_normalized(self):
        ens = EnsembleSpec(200, 3, ExplicitSampler(_sea_ics(200)))
        hist = momentum_histogram(LAM, 1.5, ens, 10 * TAU, 24)
        assert abs(hist.mass.sum() - 1.0) < 1e-12

    def test_fixed_point_single_bin(self):
        ens = EnsembleSpec(10, 0, ExplicitSampler([PhasePoint(0.0, 0.0)] * 10))
        hist = momentum_histogram(LAM, 0.0, ens, 5 * TAU, np.linspace(-1, 1, 9))
        assert np.count_nonzero(hist.mass) == 1

    def test_snapshot_must_be_whole_periods(self):
        ens = EnsembleSpec(2, 0, ExplicitSampler([PhasePoint(0.0, 0.0)] * 2))
        with pytest.raises(InvalidParameterError):
            momentum_histogram(LAM, 1.5, ens, 2.5 * TAU, 8)

    def test_empty_range_raises(self):
        ens = EnsembleSpec(2, 0, ExplicitSampler([PhasePoint(0.0, 0.0)] * 2))
        with pytest.raises(InvalidParameterError):
            momentum_histogram(LAM, 0.0, ens, TAU, np.linspace(5.0, 6.0, 4))


class TestResonanceCrossings:
    def test_fast_crossing_statistics(self):
        """Two crossings per period with stationary-phase jump sizes.

        The resonance line p = xi_d cos(t) sweeps the layer twice per
        period; each traversal kicks p by ~ lam*sqrt(pi/xi_d) RMS, so the
        per-period strobe increments carry RMS lam*sqrt(2*pi/xi_d)
        (measured ratio 1.13), and low-|p| crossings cluster near the
        quarter-period phases (measured max offset 0.032 T).
        """
        trace = resonance_crossing_trace(LAM, 5.0, PhasePoint(1.0, 0.3), 200)
        assert len(trace.crossing_times) == 400

        p_strobe = np.array([q.p for q in trace.trajectory[::1000]])
        rms = math.sqrt(float(np.mean(np.diff(p_strobe) ** 2)))
        target = LAM * math.sqrt(2.0 * math.pi / 5.0)
        assert abs(rms - target) / target < 0.30
        assert abs(rms / target - 1.131) < 0.02  # regression pin

        low = np.abs(trace.crossing_p) < 1.0
        assert low.sum() > 100
        phase = np.mod(trace.crossing_times[low], TAU) / TAU
        dist = np.minimum(np.abs(phase - 0.25), np.abs(phase - 0.75))
        assert float(dist.max()) < 0.05

    def test_undriven_records_no_crossings(self):
        trace = resonance_crossing_trace(LAM, 0.0, PhasePoint(1.0, 0.3), 5)
        assert trace.crossing_times.size == 0
        assert trace.crossing_p.size == 0
        assert len(trace.trajectory) == 5 * 1000 + 1

    def test_crossing_values_interpolate_the_line(self):
        trace = resonance_crossing_trace(LAM, 2.0, PhasePoint(0.5, 0.1), 20)
        line = 2.0 * np.cos(trace.crossing_times)
        assert np.max(np.abs(trace.crossing_p - line)) < 2e-4


class TestConvergenceCheck:
    def test_passes_at_default_step(self):
        th, p = coherent_cloud(LAM, 0.16).sample(1, 40)
        pd.check_short_time_convergence(LAM, 1.5, th, p, TAU / 1000.0)

    def test_detects_unconverged_step(self):
        th, p = coherent_cloud(LAM, 0.16).sample(1, 40)
        with pytest.raises(ConvergenceError):
            pd.check_short_time_convergence(LAM, 1.5, th, p, TAU / 1000.0, tol=1e-16)
