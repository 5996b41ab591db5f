import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps
from scipy import stats

from stochvolterra.errors import DivergenceError, EstimationError, ValidationError
from stochvolterra.plant import (
    TABLE1,
    GammaParams,
    PlantParams,
    SimConfig,
    StochasticPlantSpec,
    default_plant_spec,
    estimate_modal,
    excitation_chirp,
    load_plant_spec,
    restoring_force,
    sample_gamma,
    sample_realizations,
    save_plant_spec,
    simulate,
)
from stochvolterra.signals import TimeSeries, generate_sine, power_spectral_density


def sdof_velocity(params: PlantParams, u: TimeSeries) -> np.ndarray:
    """Exact linear response for a piecewise-linear force (matrix exponential)."""
    m, c, k = params.m_kg, params.c_ns_per_m, params.k1_n_per_m
    system = sps.StateSpace([[0, 1], [-k / m, -c / m]], [[0], [1 / m]], [[0, 1]], [[0]])
    _, y, _ = sps.lsim(system, u.samples, u.time, interp=True)
    return y


def nrmse(a, b):
    return math.sqrt(np.mean((a - b) ** 2) / np.mean(b**2))


class TestRestoringForce:
    def test_compression_side(self):
        p = replace(TABLE1, alpha=0.9)
        assert restoring_force(p, 0.01) == pytest.approx(54.9)
        assert restoring_force(p, -0.01) == pytest.approx(-0.9 * 54.9)

    def test_origin(self):
        assert restoring_force(replace(TABLE1, alpha=0.5), 0.0) == 0.0

    @given(st.floats(-0.1, 0.1))
    def test_healthy_is_linear(self, x):
        assert restoring_force(TABLE1, x) == TABLE1.k1_n_per_m * x

    @given(st.floats(0.5, 1.0), st.floats(1e-6, 0.1), st.floats(0.01, 10))
    def test_positively_homogeneous_on_each_side(self, alpha, x, scale):
        p = replace(TABLE1, alpha=alpha)
        for sign in (1, -1):
            assert restoring_force(p, sign * scale * x) == pytest.approx(scale * restoring_force(p, sign * x))


class TestParams:
    @pytest.mark.parametrize(
        "field, value", [("m_kg", 0.0), ("c_ns_per_m", -1.0), ("k1_n_per_m", 0.0), ("alpha", 0.0), ("alpha", 1.1)]
    )
    def test_validation(self, field, value):
        with pytest.raises(ValidationError):
            replace(TABLE1, **{field: value})

    def test_modal_properties(self):
        assert TABLE1.omega_n == pytest.approx(145.31, rel=1e-4)
        assert TABLE1.zeta == pytest.approx(0.0180, rel=1e-2)

    def test_dict_round_trip(self):
        assert PlantParams.from_dict(TABLE1.to_dict()) == TABLE1

    def test_alpha_optional(self):
        d = TABLE1.to_dict()
        del d["alpha"]
        assert PlantParams.from_dict(d).alpha == 1.0

    def test_missing_key(self):
        with pytest.raises(ValidationError):
            PlantParams.from_dict({"m_kg": 1.0})

    def test_spec_file_round_trip(self, tmp_path):
        spec = default_plant_spec().with_alpha(0.9)
        save_plant_spec(spec, tmp_path / "p.json")
        assert load_plant_spec(tmp_path / "p.json") == spec

    def test_malformed_spec_file(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps({"nominal": TABLE1.to_dict()}))
        with pytest.raises(ValidationError):
            load_plant_spec(tmp_path / "p.json")


@pytest.fixture(scope="module")
def cfg():
    return SimConfig()


class TestSimulate:
    def test_equilibrium(self, cfg):
        y = simulate(TABLE1, TimeSeries(np.zeros(cfg.n_samples), 512), cfg)
        assert not np.any(y.samples)

    def test_low_level_energy_in_forcing_band(self, cfg):
        y = simulate(TABLE1, excitation_chirp(0.1, cfg), cfg)
        f, p = power_spectral_density(y, 512)
        band = (f >= 14) & (f <= 31)
        assert p[band].sum() / p.sum() >= 0.95

    def test_linear_sine_steady_state(self):
        lin = TABLE1.linearized()
        cfg = SimConfig(n_samples=8192)
        y = simulate(lin, generate_sine(1.0, 23, 16, 512), cfg).samples
        w = 2 * math.pi * 23
        gain = abs(1j * w / (lin.k1_n_per_m - lin.m_kg * w**2 + 1j * w * lin.c_ns_per_m))
        tail = y[-2048:]  # transient decays with time constant 1/(zeta*omega) ~ 0.4 s
        assert (tail.max() - tail.min()) / 2 == pytest.approx(gain, rel=0.02)

    def test_high_level_generates_harmonics(self, cfg):
        fraction = {}
        for amp in (0.1, 1.0):
            y = simulate(TABLE1, excitation_chirp(amp, cfg), cfg)
            f, p = power_spectral_density(y, 512)
            # 40-92 Hz holds the second and third harmonics but is clear of the sweep edge
            fraction[amp] = p[(f >= 40) & (f <= 92)].sum() / p.sum()
        assert fraction[1.0] > 20 * fraction[0.1]

    def test_matches_exact_linear_response(self, cfg):
        lin = TABLE1.linearized()
        u = excitation_chirp(0.1, cfg)
        assert nrmse(simulate(lin, u, cfg).samples, sdof_velocity(lin, u)) < 0.005

    @pytest.mark.parametrize("coarse", [1, 2])
    def test_fourth_order_convergence(self, coarse):
        lin = TABLE1.linearized()
        cfg = SimConfig(n_samples=1024)
        u = excitation_chirp(0.1, cfg)
        exact = sdof_velocity(lin, u)
        e1 = nrmse(simulate(lin, u, replace(cfg, oversample=coarse)).samples, exact)
        e2 = nrmse(simulate(lin, u, replace(cfg, oversample=2 * coarse)).samples, exact)
        assert e1 / e2 >= 8

    def test_free_decay_envelope(self):
        lin = TABLE1.linearized()
        cfg = SimConfig(n_samples=2048, initial_state=(0.001, 0.0))
        v = simulate(lin, TimeSeries(np.zeros(2048), 512), cfg).samples
        peaks = [v[i] for i in range(1, len(v) - 1) if v[i] > v[i - 1] and v[i] >= v[i + 1]]
        assert len(peaks) > 10
        assert all(b <= a for a, b in zip(peaks, peaks[1:]))

    def test_divergence_reports_step(self):
        runaway = PlantParams(1.0, 0.0, 1.0, 0.0, -1e12)
        with pytest.raises(DivergenceError) as info:
            simulate(runaway, TimeSeries(np.full(64, 1e6), 512))
        assert info.value.step >= 0

    def test_config_mismatch(self, cfg):
        with pytest.raises(ValidationError):
            simulate(TABLE1, TimeSeries(np.zeros(10), 512), cfg)

    def test_deterministic(self, cfg):
        u = excitation_chirp(1.0, cfg)
        assert simulate(TABLE1, u, cfg) == simulate(TABLE1, u, cfg)


class TestGamma:
    def test_k1_prior_mean(self):
        prior = GammaParams(5.49e3, 0.01)
        n = 20_000
        draws = sample_gamma(prior, 1, n)
        assert abs(draws.mean() - prior.mean) < 3 * prior.mean * prior.dispersion / math.sqrt(n)

    def test_degenerate_concentration(self):
        draws = sample_gamma(GammaParams(5.49e3, 1e-6), 2, 1000)
        assert np.all(np.abs(draws / 5.49e3 - 1) < 1e-4)

    def test_damping_prior_cv(self):
        draws = sample_gamma(GammaParams(1.36, 0.01), 3, 100_000)
        assert 0.009 <= draws.std() / draws.mean() <= 0.011

    def test_ks_against_analytic_cdf(self):
        prior = GammaParams(5.49e3, 0.01)
        draws = sample_gamma(prior, 4, 10_000)
        assert stats.kstest(draws, stats.gamma(prior.shape, scale=prior.scale).cdf).pvalue > 0.01

    def test_pdf_is_gamma_density(self):
        prior = GammaParams(1.36, 0.05)
        z = np.linspace(1.0, 1.8, 41)
        np.testing.assert_allclose(prior.pdf(z), stats.gamma(prior.shape, scale=prior.scale).pdf(z), rtol=1e-10)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            GammaParams(1.0, 0.0)


class TestRealizations:
    def test_distinct_sets(self):
        params = sample_realizations(default_plant_spec(), 2048, 7)
        assert len({(p.k1_n_per_m, p.c_ns_per_m) for p in params}) == 2048
        assert all(p.k3_n_per_m3 == TABLE1.k3_n_per_m3 for p in params)

    def test_degenerate_priors(self):
        spec = StochasticPlantSpec(TABLE1, GammaParams(TABLE1.k1_n_per_m, 1e-9), GammaParams(TABLE1.c_ns_per_m, 1e-9))
        (p,) = sample_realizations(spec, 1, 0)
        assert p.k1_n_per_m == pytest.approx(TABLE1.k1_n_per_m, rel=1e-6)
        assert p.c_ns_per_m == pytest.approx(TABLE1.c_ns_per_m, rel=1e-6)

    def test_reproducible(self):
        spec = default_plant_spec()
        assert sample_realizations(spec, 5, 11) == sample_realizations(spec, 5, 11)


class TestModalEstimate:
    def test_linearized_plant(self, cfg):
        lin = TABLE1.linearized()
        u = excitation_chirp(0.1, cfg)
        w, z = estimate_modal(simulate(lin, u, cfg), u)
        assert w == pytest.approx(lin.omega_n, rel=0.01)
        assert z == pytest.approx(lin.zeta, rel=0.10)

    @pytest.mark.parametrize("omega, zeta", [(145.3, 0.018), (200.0, 0.03), (100.0, 0.01)])
    def test_free_response(self, omega, zeta):
        fs, n = 512.0, 4096
        t = np.arange(n) / fs
        wd = omega * math.sqrt(1 - zeta**2)
        # velocity impulse response of a unit-mass oscillator
        h = np.exp(-zeta * omega * t) * (np.cos(wd * t) - zeta * omega / wd * np.sin(wd * t))
        impulse = np.zeros(n)
        impulse[0] = 1.0
        w, z = estimate_modal(TimeSeries(h, fs), TimeSeries(impulse, fs))
        assert w == pytest.approx(omega, rel=0.02)
        assert z == pytest.approx(zeta, rel=0.10)

    def test_linear_in_amplitude(self, cfg):
        lin = TABLE1.linearized()
        estimates = []
        for amp in (0.1, 0.2):
            u = excitation_chirp(amp, cfg)
            estimates.append(estimate_modal(simulate(lin, u, cfg), u))
        np.testing.assert_allclose(estimates[0], estimates[1], rtol=1e-3)

    def test_no_peak_in_band(self):
        fs = 512.0
        u = excitation_chirp(1.0, SimConfig())
        with pytest.raises(EstimationError):
            estimate_modal(u, u)  # flat FRF

    def test_zero_response(self, cfg):
        u = excitation_chirp(0.1, cfg)
        with pytest.raises(ValidationError):
            estimate_modal(u.with_samples(np.zeros(len(u))), u)
