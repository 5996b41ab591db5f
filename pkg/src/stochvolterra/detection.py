"""Novelty detection on identified Volterra models.

Features are either diagonal kernel coefficients or the time-domain
contribution of each kernel order to the response to a probe input. The
distance of a model from the healthy reference is the squared Mahalanobis
distance; its healthy distribution is estimated with a Gaussian KDE whose
upper tail sets the alarm threshold.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import binom

from .errors import ValidationError
from .signals import TimeSeries
from .volterra import extract_indexes, predict

__all__ = [
    "FEATURE_KINDS",
    "COEFFICIENT_KINDS",
    "CONTRIBUTION_KINDS",
    "FeatureMatrix",
    "GaussianKDE",
    "Verdict",
    "RocCurve",
    "DetectionReport",
    "model_features",
    "build_features",
    "feature_matrix_from_rows",
    "mahalanobis_sq",
    "kde_pdf",
    "silverman_bandwidth",
    "select_bandwidth_cv",
    "threshold_from_kde",
    "classify",
    "roc_curve",
    "boxplot_stats",
    "binomial_interval",
    "detection_experiment",
    "write_report",
]

COEFFICIENT_KINDS = ("coeff_lambda1", "coeff_lambda2", "coeff_lambda3", "coeff_lambda_nl")
CONTRIBUTION_KINDS = ("contrib_y1", "contrib_y2", "contrib_y3", "contrib_ynl")
FEATURE_KINDS = COEFFICIENT_KINDS + CONTRIBUTION_KINDS

REGULARIZATION = 1e-8
EXPLAINED_VARIANCE = 0.999


def _check_kind(kind: str) -> None:
    if kind not in FEATURE_KINDS:
        raise ValidationError(f"unknown feature kind {kind!r}; expected one of {', '.join(FEATURE_KINDS)}")


def model_features(models, kind: str, probe_input: TimeSeries | None = None) -> np.ndarray:
    """One feature vector per model, stacked as rows."""
    _check_kind(kind)
    if kind in COEFFICIENT_KINDS:
        pick = COEFFICIENT_KINDS.index(kind)
        return np.array([extract_indexes(m)[pick] for m in models])
    if probe_input is None:
        raise ValidationError(f"feature kind {kind} needs a probe input")
    rows = []
    for m in models:
        y1, y2, y3, _ = (part.samples for part in predict(m, probe_input))
        rows.append({"contrib_y1": y1, "contrib_y2": y2, "contrib_y3": y3, "contrib_ynl": y2 + y3}[kind])
    return np.array(rows)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Reference feature rows and the statistics needed for Mahalanobis distances.

    ``projection`` maps centered features onto the retained principal
    directions (identity for coefficient kinds). ``covariance`` lives in
    the projected space and already includes the ridge term.
    """

    kind: str
    rows: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    projection: np.ndarray | None
    _cholesky: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.rows.shape[1]

    @property
    def reduced_dimension(self) -> int:
        return self.covariance.shape[0]


def _regularize(cov: np.ndarray) -> np.ndarray:
    dim = cov.shape[0]
    scale = np.trace(cov) / dim
    if not scale > 0:
        raise ValidationError("reference features have zero variance")
    return cov + REGULARIZATION * scale * np.eye(dim)


def feature_matrix_from_rows(rows, kind: str = "coeff_lambda1", project: bool | None = None) -> FeatureMatrix:
    """Fit mean and regularized covariance to reference rows.

    With ``project`` (default for contribution kinds) the rows are first
    reduced to the principal components holding 99.9 % of the variance.
    """
    _check_kind(kind)
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("need at least two reference rows")
    if project is None:
        project = kind in CONTRIBUTION_KINDS
    mean = x.mean(axis=0)
    centered = x - mean
    projection = None
    if project:
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        var = s**2
        if not var.sum() > 0:
            raise ValidationError("reference features have zero variance")
        keep = int(np.searchsorted(np.cumsum(var) / var.sum(), EXPLAINED_VARIANCE) + 1)
        projection = vt[:keep].T
        centered = centered @ projection
    cov = np.atleast_2d(np.cov(centered, rowvar=False))
    cov = _regularize(cov)
    return FeatureMatrix(kind, x, mean, cov, projection, np.linalg.cholesky(cov))


def build_features(ensemble, kind: str, probe_input: TimeSeries | None = None) -> FeatureMatrix:
    """Reference statistics of ``kind`` features over an ensemble's models."""
    return feature_matrix_from_rows(model_features(ensemble.models, kind, probe_input), kind)


def mahalanobis_sq(features: FeatureMatrix, x) -> np.ndarray | float:
    """Squared Mahalanobis distance of one vector or of each row of a matrix."""
    q = np.asarray(x, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != features.dimension:
        raise ValidationError(f"feature dimension {q.shape[1]} differs from reference dimension {features.dimension}")
    centered = q - features.mean
    if features.projection is not None:
        centered = centered @ features.projection
    # solve L w = centered^T, so D = |w|^2
    w = np.linalg.solve(features._cholesky, centered.T)
    d = np.sum(w * w, axis=0)
    return float(d[0]) if single else d


@dataclass(frozen=True, eq=False)
class GaussianKDE:
    samples: np.ndarray
    bandwidth: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).ravel()
        if s.size < 1:
            raise ValidationError("KDE needs samples")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "samples", s)

    def pdf(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float)[..., None] - self.samples) / self.bandwidth
        return np.exp(-0.5 * z * z).sum(axis=-1) / (self.samples.size * self.bandwidth * math.sqrt(2 * math.pi))

    def cdf(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float)[..., None] - self.samples) / self.bandwidth
        return ndtr(z).mean(axis=-1)

    def sf(self, x) -> np.ndarray:
        z = (self.samples - np.asarray(x, dtype=float)[..., None]) / self.bandwidth
        return ndtr(z).mean(axis=-1)

    __call__ = pdf


def kde_pdf(samples, bandwidth: float) -> GaussianKDE:
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 8:
        raise ValidationError(f"KDE needs at least 8 samples, got {samples.size}")
    return GaussianKDE(samples, bandwidth)


def silverman_bandwidth(samples) -> float:
    s = np.asarray(samples, dtype=float).ravel()
    return 1.06 * float(np.std(s, ddof=1)) * s.size ** (-0.2)


@numba.njit(cache=True)
def _loo_log_likelihood(sorted_samples, h):
    """Leave-one-out Gaussian-KDE log-likelihood of sorted samples.

    Each point sums kernels outward from its nearest neighbour, shifted by
    that neighbour's exponent so sparse tails never underflow, and stops
    once further terms fall below exp(-40) of the leading one.
    """
    n = sorted_samples.size
    inv = 0.5 / (h * h)
    total = 0.0
    for i in range(n):
        x = sorted_samples[i]
        near = np.inf
        if i > 0:
            near = x - sorted_samples[i - 1]
        if i < n - 1:
            near = min(near, sorted_samples[i + 1] - x)
        shift = near * near * inv
        acc = 0.0
        j = i - 1
        while j >= 0:
            e = (x - sorted_samples[j]) ** 2 * inv - shift
            if e > 40.0:
                break
            acc += math.exp(-e)
            j -= 1
        j = i + 1
        while j < n:
            e = (sorted_samples[j] - x) ** 2 * inv - shift
            if e > 40.0:
                break
            acc += math.exp(-e)
            j += 1
        total += math.log(acc) - shift
    return total - n * math.log((n - 1) * h * math.sqrt(2 * math.pi))


def select_bandwidth_cv(samples, n_grid: int = 25, span=(0.05, 5.0)) -> float:
    """Bandwidth maximizing the leave-one-out log-likelihood on a log grid around Silverman's rule."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 16:
        raise ValidationError(f"bandwidth selection needs at least 16 samples, got {s.size}")
    ref = silverman_bandwidth(s)
    if not ref > 0:
        raise ValidationError("cannot select a bandwidth for samples with zero variance")
    grid = ref * np.geomspace(span[0], span[1], n_grid)
    ordered = np.sort(s)
    scores = [_loo_log_likelihood(ordered, float(h)) for h in grid]
    return float(grid[int(np.argmax(scores))])


def threshold_from_kde(kde: GaussianKDE, beta: float) -> float:
    """Distance whose upper-tail probability under the KDE equals ``beta``."""
    if not 0 < beta <= 0.5:
        raise ValidationError(f"beta must lie in (0, 0.5], got {beta}")
    h = kde.bandwidth
    lo = kde.samples.min() - 12 * h
    hi = kde.samples.max() + 12 * h
    return float(brentq(lambda x: float(kde.sf(x)) - beta, lo, hi, xtol=1e-12 * max(1.0, abs(hi)), rtol=1e-14))


@dataclass(frozen=True)
class Verdict:
    damaged: bool
    distance: float

    @property
    def hypothesis(self) -> str:
        return "H1" if self.damaged else "H0"


def classify(features: FeatureMatrix, threshold: float, unknown) -> Verdict:
    """Damaged only if the distance strictly exceeds the threshold."""
    d = mahalanobis_sq(features, unknown)
    return Verdict(bool(d > threshold), d)


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(healthy_distances, damaged_distances) -> RocCurve:
    """ROC obtained by sweeping the threshold over every observed distance.

    Points are ordered by increasing false-positive rate and include the
    ``(0, 0)`` and ``(1, 1)`` corners. AUC uses the trapezoid rule.
    """
    healthy = np.asarray(healthy_distances, dtype=float).ravel()
    damaged = np.asarray(damaged_distances, dtype=float).ravel()
    if healthy.size == 0 or damaged.size == 0:
        raise ValidationError("ROC needs non-empty healthy and damaged sets")
    levels = np.unique(np.concatenate([healthy, damaged]))[::-1]
    thresholds = np.concatenate([[np.inf], levels, [-np.inf]])
    h_sorted = np.sort(healthy)
    d_sorted = np.sort(damaged)
    # fraction strictly above each threshold
    fpr = 1.0 - np.searchsorted(h_sorted, thresholds, side="right") / healthy.size
    tpr = 1.0 - np.searchsorted(d_sorted, thresholds, side="right") / damaged.size
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def boxplot_stats(values) -> dict:
    """Quartiles and Tukey whiskers (1.5 IQR, clipped to the data)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "n_outliers": int(v.size - inside.size),
    }


def binomial_interval(n: int, p: float, level: float = 0.95) -> tuple:
    """Central interval of the false-alarm *rate* for ``n`` Bernoulli(p) trials."""
    tail = (1 - level) / 2
    return float(binom.ppf(tail, n, p) / n), float(binom.ppf(1 - tail, n, p) / n)


@dataclass(frozen=True, eq=False)
class KindResult:
    kind: str
    feature_dimension: int
    reduced_dimension: int
    bandwidth: float
    thresholds: dict
    distances: dict
    rates: dict
    roc: RocCurve | None
    boxplots: dict


@dataclass(frozen=True, eq=False)
class DetectionReport:
    kinds: dict
    betas: tuple
    severities: tuple
    roc_severity: float | None
    group_indexes: dict

    def rate(self, kind: str, beta: float, severity: float) -> float:
        return self.kinds[kind].rates[(beta, severity)]

    def rate_rows(self):
        for kind, res in self.kinds.items():
            for beta in self.betas:
                for sev in self.severities:
                    yield kind, beta, sev, res.rates[(beta, sev)]

    def to_dict(self) -> dict:
        out = {"betas": list(self.betas), "severities": list(self.severities), "roc_severity": self.roc_severity}
        out["kinds"] = {
            kind: {
                "feature_dimension": r.feature_dimension,
                "reduced_dimension": r.reduced_dimension,
                "bandwidth": r.bandwidth,
                "thresholds": {f"{b:g}": t for b, t in r.thresholds.items()},
                "auc": None if r.roc is None else r.roc.auc,
                "boxplots": r.boxplots,
            }
            for kind, r in self.kinds.items()
        }
        out["rates"] = [
            {"kind": k, "beta": b, "severity": s, "rate": rate} for k, b, s, rate in self.rate_rows()
        ]
        return out


def _severity_label(sev: float) -> str:
    return f"{sev:.2f}"


def detection_experiment(
    reference,
    conditions: dict,
    kinds=FEATURE_KINDS,
    betas=(0.005, 0.01, 0.02),
    probe: TimeSeries | None = None,
    reference_test=None,
    roc_severity: float | None = 0.94,
) -> DetectionReport:
    """Calibrate on the healthy reference and score every condition.

    ``conditions`` maps severity to an ensemble. The held-out healthy set is
    ``reference_test`` if given, else the severity-1.0 condition if present,
    else the second half of ``reference`` (the first half then trains).
    Rates are the fraction of models of each condition classified damaged.
    """
    if not conditions:
        raise ValidationError("need at least one condition to evaluate")
    kinds = tuple(kinds)
    for k in kinds:
        _check_kind(k)
    betas = tuple(float(b) for b in betas)
    severities = tuple(sorted((float(s) for s in conditions), reverse=True))
    conditions = {float(s): e for s, e in conditions.items()}
    train = reference
    test = reference_test
    if test is None and 1.0 in conditions:
        test = conditions[1.0]
    if test is None:
        half = len(reference) // 2
        train, test = reference.subset(range(half)), reference.subset(range(half, len(reference)))
    if roc_severity is not None and float(roc_severity) not in conditions:
        raise ValidationError(f"ROC severity {roc_severity} is not among the conditions")

    groups = {"train": train, "test": test}
    groups.update({_severity_label(s): conditions[s] for s in severities})
    results = {}
    for kind in kinds:
        needs_probe = kind in CONTRIBUTION_KINDS
        rows = {name: model_features(ens.models, kind, probe if needs_probe else None) for name, ens in groups.items()}
        features = feature_matrix_from_rows(rows["train"], kind)
        dist = {name: mahalanobis_sq(features, r) for name, r in rows.items()}
        h = select_bandwidth_cv(dist["train"])
        kde = kde_pdf(dist["train"], h)
        thresholds = {b: threshold_from_kde(kde, b) for b in betas}
        rates = {
            (b, s): float(np.mean(dist[_severity_label(s)] > thresholds[b])) for b in betas for s in severities
        }
        roc = None
        if roc_severity is not None:
            roc = roc_curve(dist["test"], dist[_severity_label(float(roc_severity))])
        results[kind] = KindResult(
            kind=kind,
            feature_dimension=features.dimension,
            reduced_dimension=features.reduced_dimension,
            bandwidth=h,
            thresholds=thresholds,
            distances=dist,
            rates=rates,
            roc=roc,
            boxplots={name: boxplot_stats(d) for name, d in dist.items()},
        )
    return DetectionReport(
        kinds=results,
        betas=betas,
        severities=severities,
        roc_severity=None if roc_severity is None else float(roc_severity),
        group_indexes={name: tuple(ens.indexes) for name, ens in groups.items()},
    )


def write_report(report: DetectionReport, directory) -> None:
    """``report.json`` plus ``rates.csv``, ``distances_<kind>.csv`` and ``roc_<kind>.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    with (directory / "rates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "beta", "severity", "rate"])
        for kind, beta, sev, rate in report.rate_rows():
            w.writerow([kind, repr(beta), _severity_label(sev), repr(rate)])
    for kind, res in report.kinds.items():
        with (directory / f"distances_{kind}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["realization", "severity", "distance", "split"])
            for name, d in res.distances.items():
                split = name if name in ("train", "test") else "condition"
                sev = "1.00" if split != "condition" else name
                for idx, value in zip(report.group_indexes[name], d):
                    w.writerow([idx, sev, repr(float(value)), split])
        if res.roc is not None:
            with (directory / f"roc_{kind}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr"])
                for f, t in zip(res.roc.fpr, res.roc.tpr):
                    w.writerow([repr(float(f)), repr(float(t))])
