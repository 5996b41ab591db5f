import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stochvolterra.detection import (
    FEATURE_KINDS,
    binomial_interval,
    boxplot_stats,
    build_features,
    classify,
    detection_experiment,
    feature_matrix_from_rows,
    kde_pdf,
    mahalanobis_sq,
    model_features,
    roc_curve,
    select_bandwidth_cv,
    silverman_bandwidth,
    threshold_from_kde,
    write_report,
)
from stochvolterra.errors import ValidationError
from stochvolterra.montecarlo import EnsembleConfig, run_ensemble
from stochvolterra.plant import TABLE1, GammaParams, StochasticPlantSpec, default_plant_spec, excitation_chirp
from stochvolterra.volterra import predict


def cloud(seed, n=400, dim=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)) @ rng.normal(size=(dim, dim))


class TestMahalanobis:
    def test_mean_is_zero(self):
        f = feature_matrix_from_rows(cloud(0))
        assert mahalanobis_sq(f, f.mean) == pytest.approx(0.0, abs=1e-20)

    def test_unit_step_under_identity_covariance(self):
        rows = np.sqrt(1.5) * np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
        f = feature_matrix_from_rows(rows)
        np.testing.assert_allclose(f.covariance, np.eye(2), atol=1e-7)
        assert mahalanobis_sq(f, [1.0, 0.0]) == pytest.approx(1.0, rel=1e-7)

    def test_matches_explicit_solve(self):
        x = cloud(1)
        f = feature_matrix_from_rows(x)
        c = x - x.mean(axis=0)
        expected = np.einsum("ij,ij->i", c, np.linalg.solve(f.covariance, c.T).T)
        np.testing.assert_allclose(mahalanobis_sq(f, x), expected, rtol=1e-10)

    def test_in_sample_mean_is_dimension(self):
        # sum of in-sample distances is (n - 1) * dim for the unbiased covariance
        x = cloud(2, n=500)
        d = mahalanobis_sq(feature_matrix_from_rows(x), x)
        assert d.mean() == pytest.approx(3 * 499 / 500, rel=1e-6)

    def test_chi_square_mean_out_of_sample(self):
        rng = np.random.default_rng(3)
        f = feature_matrix_from_rows(rng.normal(size=(4000, 3)))
        assert mahalanobis_sq(f, rng.normal(size=(4000, 3))).mean() == pytest.approx(3, rel=0.05)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = cloud(seed % 1000)
        a = rng.normal(size=(3, 3))
        if np.linalg.cond(a) > 1e3:
            a += 3 * np.eye(3)
        shift = rng.normal(size=3) * 10
        q = rng.normal(size=(5, 3))
        base = feature_matrix_from_rows(x)
        mapped = feature_matrix_from_rows(x @ a.T + shift)
        # the ridge perturbs each distance by about its relative size times the condition number
        cond = max(np.linalg.cond(base.covariance), np.linalg.cond(mapped.covariance))
        d = mahalanobis_sq(base, q)
        np.testing.assert_allclose(mahalanobis_sq(mapped, q @ a.T + shift), d, rtol=1e-7 * cond + 1e-10)

    def test_verdicts_invariant_under_scaling(self):
        x = cloud(4)
        q = np.random.default_rng(5).normal(size=(50, 3)) * 3
        scale = np.array([0.1, 1.0, 10.0])
        base = feature_matrix_from_rows(x)
        scaled = feature_matrix_from_rows(x * scale)
        for row in q:
            assert classify(base, 7.8, row).damaged == classify(scaled, 7.8, row * scale).damaged

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            mahalanobis_sq(feature_matrix_from_rows(cloud(0)), [1.0, 2.0])

    def test_zero_variance(self):
        with pytest.raises(ValidationError):
            feature_matrix_from_rows(np.ones((10, 2)))

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            feature_matrix_from_rows(cloud(0), kind="coeff_lambda9")

    def test_projection_keeps_dominant_directions(self):
        rng = np.random.default_rng(6)
        low_rank = rng.normal(size=(100, 4)) @ rng.normal(size=(4, 300))
        f = feature_matrix_from_rows(low_rank, kind="contrib_y1")
        assert f.reduced_dimension <= 4 and f.dimension == 300


class TestKde:
    def test_integrates_to_one(self):
        x = np.random.default_rng(0).gamma(2.0, size=200)
        h = 0.3
        kde = kde_pdf(x, h)
        grid = np.linspace(x.min() - 8 * h, x.max() + 8 * h, 20001)
        assert np.trapezoid(kde.pdf(grid), grid) == pytest.approx(1.0, abs=1e-6)

    def test_mean_equals_sample_mean(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=100)
        h = 0.7
        kde = kde_pdf(x, h)
        grid = np.linspace(x.min() - 12 * h, x.max() + 12 * h, 40001)
        assert np.trapezoid(grid * kde.pdf(grid), grid) == pytest.approx(x.mean(), abs=1e-10)

    def test_narrow_kernel_concentrates(self):
        x = np.full(20, 5.0) + np.random.default_rng(2).normal(0, 1e-9, 20)
        kde = kde_pdf(x, 0.01)
        assert kde.cdf(5.04) - kde.cdf(4.96) > 0.9999

    def test_cdf_and_sf_complementary(self):
        kde = kde_pdf(np.random.default_rng(3).normal(size=50), 0.4)
        x = np.linspace(-3, 3, 13)
        np.testing.assert_allclose(kde.cdf(x) + kde.sf(x), 1.0, atol=1e-14)

    @pytest.mark.parametrize("h", [0.0, -1.0, np.inf])
    def test_bad_bandwidth(self, h):
        with pytest.raises(ValidationError):
            kde_pdf(np.arange(10.0), h)

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            kde_pdf(np.arange(7.0), 1.0)

    def test_recovers_standard_normal(self):
        x = np.random.default_rng(4).normal(size=10_000)
        kde = kde_pdf(x, select_bandwidth_cv(x))
        grid = np.linspace(-6, 6, 2401)
        assert np.trapezoid((kde.pdf(grid) - stats.norm.pdf(grid)) ** 2, grid) < 1e-3


class TestBandwidth:
    def test_close_to_silverman_for_normal_data(self):
        x = np.random.default_rng(5).normal(size=1024)
        h = select_bandwidth_cv(x)
        assert 0.5 <= h / silverman_bandwidth(x) <= 2.0

    def test_bimodal_prefers_narrower(self):
        rng = np.random.default_rng(6)
        x = np.concatenate([rng.normal(-10, 1, 256), rng.normal(10, 1, 256)])
        assert select_bandwidth_cv(x) < silverman_bandwidth(x)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_equivariant(self, seed, a):
        x = np.random.default_rng(seed).gamma(3.0, size=64)
        assert select_bandwidth_cv(a * x) == pytest.approx(a * select_bandwidth_cv(x), rel=1e-9)

    def test_degenerate(self):
        with pytest.raises(ValidationError):
            select_bandwidth_cv(np.ones(32))

    def test_too_few(self):
        with pytest.raises(ValidationError):
            select_bandwidth_cv(np.arange(15.0))


@pytest.fixture(scope="module")
def normal_kde():
    x = np.random.default_rng(7).normal(size=10_000)
    return kde_pdf(x, silverman_bandwidth(x))


class TestThreshold:
    def test_normal_quantile(self, normal_kde):
        assert threshold_from_kde(normal_kde, 0.01) == pytest.approx(2.326, rel=0.05)

    def test_tail_mass(self, normal_kde):
        for beta in (0.005, 0.01, 0.02):
            assert normal_kde.sf(threshold_from_kde(normal_kde, beta)) == pytest.approx(beta, abs=1e-6)

    def test_median_at_half(self, normal_kde):
        t = threshold_from_kde(normal_kde, 0.5)
        assert normal_kde.cdf(t) == pytest.approx(0.5, abs=1e-3)

    def test_monotone_in_beta(self, normal_kde):
        thresholds = [threshold_from_kde(normal_kde, b) for b in (0.001, 0.005, 0.01, 0.02, 0.1, 0.5)]
        assert all(a > b for a, b in zip(thresholds, thresholds[1:]))

    @pytest.mark.parametrize("beta", [0.0, -0.1, 0.51, 1.0])
    def test_invalid_beta(self, normal_kde, beta):
        with pytest.raises(ValidationError):
            threshold_from_kde(normal_kde, beta)


class TestClassify:
    def test_mean_is_healthy(self):
        f = feature_matrix_from_rows(cloud(8))
        verdict = classify(f, 1e-6, f.mean)
        assert verdict.hypothesis == "H0" and not verdict.damaged

    def test_boundary_is_healthy(self):
        f = feature_matrix_from_rows(cloud(8))
        q = np.array([1.0, -2.0, 0.5])
        d = mahalanobis_sq(f, q)
        assert classify(f, d, q).hypothesis == "H0"
        assert classify(f, np.nextafter(d, 0), q).hypothesis == "H1"

    def test_synthetic_calibration(self):
        rng = np.random.default_rng(9)
        train, test = rng.normal(size=(1024, 4)), rng.normal(size=(1024, 4))
        f = feature_matrix_from_rows(train)
        d_train = mahalanobis_sq(f, train)
        kde = kde_pdf(d_train, select_bandwidth_cv(d_train))
        d_test = mahalanobis_sq(f, test)
        for beta in (0.005, 0.01, 0.02):
            lo, hi = binomial_interval(1024, beta)
            assert lo <= np.mean(d_test > threshold_from_kde(kde, beta)) <= hi


class TestRoc:
    def test_perfect_separation(self):
        roc = roc_curve(np.arange(10.0), np.arange(10.0) + 100)
        assert roc.auc == 1.0

    def test_null_experiment(self):
        rng = np.random.default_rng(10)
        roc = roc_curve(rng.chisquare(3, 512), rng.chisquare(3, 512))
        assert roc.auc == pytest.approx(0.5, abs=0.05)

    def test_corners_and_order(self):
        rng = np.random.default_rng(11)
        roc = roc_curve(rng.normal(size=50), rng.normal(1, 1, 70))
        assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
        assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
        # thresholds decrease along the curve, so both rates are non-increasing in threshold
        assert np.all(np.diff(roc.thresholds) < 0)

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.integers(0, 20), min_size=1, max_size=40),
        st.lists(st.integers(0, 20), min_size=1, max_size=40),
    )
    def test_auc_is_mann_whitney(self, healthy, damaged):
        h, d = np.array(healthy, float), np.array(damaged, float)
        wins = (d[:, None] > h[None, :]).sum() + 0.5 * (d[:, None] == h[None, :]).sum()
        assert roc_curve(h, d).auc == pytest.approx(wins / (h.size * d.size), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            roc_curve([], [1.0])


class TestSummaries:
    def test_boxplot(self):
        s = boxplot_stats(np.r_[np.arange(1.0, 10.0), 100.0])
        assert s["median"] == 5.5 and s["n_outliers"] == 1 and s["whisker_high"] == 9.0

    def test_binomial_interval_contains_rate(self):
        lo, hi = binomial_interval(1024, 0.01)
        assert lo < 0.01 < hi
        assert stats.binom.cdf(hi * 1024, 1024, 0.01) - stats.binom.cdf(lo * 1024 - 1, 1024, 0.01) >= 0.95


@pytest.fixture(scope="module")
def small_ensembles():
    spec = default_plant_spec()
    ref = run_ensemble(spec, EnsembleConfig(n_realizations=32, base_seed=100), label="reference")
    test = run_ensemble(spec, EnsembleConfig(n_realizations=32, base_seed=200), label="1.00")
    damaged = run_ensemble(spec.with_alpha(0.86), EnsembleConfig(n_realizations=32, base_seed=300), label="0.86")
    return ref, test, damaged


class TestFeatures:
    def test_dimensions(self, small_ensembles):
        ref = small_ensembles[0]
        assert build_features(ref, "coeff_lambda1").dimension == 2
        assert build_features(ref, "coeff_lambda_nl").dimension == 10
        probe = excitation_chirp(1.0, ref.config.sim)
        assert build_features(ref, "contrib_ynl", probe).dimension == len(probe)

    def test_contributions_need_probe(self, small_ensembles):
        with pytest.raises(ValidationError):
            build_features(small_ensembles[0], "contrib_y2")

    def test_contribution_rows_are_predictions(self, small_ensembles):
        model = small_ensembles[0].models[0]
        probe = excitation_chirp(1.0, small_ensembles[0].config.sim)
        y1, y2, y3, _ = predict(model, probe)
        row = model_features([model], "contrib_ynl", probe)[0]
        np.testing.assert_allclose(row, y2.samples + y3.samples)

    def test_degenerate_linear_contributions(self):
        spec = StochasticPlantSpec(TABLE1, GammaParams(TABLE1.k1_n_per_m, 1e-9), GammaParams(TABLE1.c_ns_per_m, 1e-9))
        ens = run_ensemble(spec, EnsembleConfig(n_realizations=4, snr_db=None))
        probe = excitation_chirp(1.0, ens.config.sim)
        rows = model_features(ens.models, "contrib_y1", probe)
        np.testing.assert_allclose(rows, np.tile(predict(ens.models[0], probe)[0].samples, (4, 1)), atol=1e-6)
        assert np.linalg.norm(np.cov(rows, rowvar=False)) < 1e-8


@pytest.fixture(scope="module")
def report(small_ensembles):
    ref, test, damaged = small_ensembles
    probe = excitation_chirp(1.0, ref.config.sim)
    return detection_experiment(ref, {1.0: test, 0.86: damaged}, FEATURE_KINDS, (0.01, 0.02), probe, roc_severity=0.86)


class TestExperiment:
    def test_rates_table(self, report):
        rows = list(report.rate_rows())
        assert len(rows) == len(FEATURE_KINDS) * 2 * 2
        assert all(0.0 <= r[3] <= 1.0 for r in rows)

    def test_severe_damage_found_by_quadratic_index(self, report):
        assert report.rate("coeff_lambda2", 0.01, 0.86) == 1.0

    def test_test_split_is_condition_one(self, report, small_ensembles):
        assert report.group_indexes["test"] == small_ensembles[1].indexes

    def test_split_reference_without_condition_one(self, small_ensembles):
        ref, _, damaged = small_ensembles
        rep = detection_experiment(ref, {0.86: damaged}, ("coeff_lambda1",), (0.01,), roc_severity=None)
        assert rep.group_indexes["train"] == ref.indexes[:16]
        assert rep.group_indexes["test"] == ref.indexes[16:]

    def test_empty_conditions(self, small_ensembles):
        with pytest.raises(ValidationError):
            detection_experiment(small_ensembles[0], {})

    def test_unknown_roc_severity(self, small_ensembles):
        ref, test, _ = small_ensembles
        with pytest.raises(ValidationError):
            detection_experiment(ref, {1.0: test}, ("coeff_lambda1",), roc_severity=0.94)

    def test_written_files(self, report, tmp_path):
        write_report(report, tmp_path)
        with (tmp_path / "rates.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(FEATURE_KINDS) * 4
        assert set(rows[0]) == {"kind", "beta", "severity", "rate"}
        with (tmp_path / "distances_coeff_lambda2.csv").open() as fh:
            dist = list(csv.DictReader(fh))
        assert len(dist) == 32 * 4  # train, test, and both conditions
        assert {r["split"] for r in dist} == {"train", "test", "condition"}
        roc = (tmp_path / "roc_contrib_ynl.csv").read_text().splitlines()
        assert roc[0] == "fpr,tpr"
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["roc_severity"] == 0.86 and len(doc["rates"]) == len(rows)
