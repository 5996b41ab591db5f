"""Duffing oscillator with a bilinear breathing crack.

Equation of motion::

    m x'' + c x' + F(x) + k2 x^2 + k3 x^3 = U(t)
    F(x) = k1 x        (x >= 0)
         = alpha k1 x  (x < 0)

The measured output is the velocity ``x'``. Linear stiffness and damping
may be drawn from independent gamma (maximum entropy) priors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .errors import DivergenceError, EstimationError, ValidationError
from .signals import ChirpSpec, TimeSeries, frequency_response, generate_chirp

__all__ = [
    "PlantParams",
    "GammaParams",
    "StochasticPlantSpec",
    "SimConfig",
    "TABLE1",
    "excitation_chirp",
    "restoring_force",
    "simulate",
    "sample_gamma",
    "sample_realizations",
    "estimate_modal",
    "default_plant_spec",
    "load_plant_spec",
    "save_plant_spec",
]


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters in SI units. ``alpha = 1`` means no crack."""

    m_kg: float
    c_ns_per_m: float
    k1_n_per_m: float
    k2_n_per_m2: float
    k3_n_per_m3: float
    alpha: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite")
        if self.m_kg <= 0:
            raise ValidationError("mass must be positive")
        if self.c_ns_per_m < 0:
            raise ValidationError("damping must be non-negative")
        if self.k1_n_per_m <= 0:
            raise ValidationError("linear stiffness must be positive")
        if not 0 < self.alpha <= 1:
            raise ValidationError(f"crack severity alpha must be in (0, 1], got {self.alpha}")

    @property
    def healthy(self) -> bool:
        return self.alpha == 1.0

    @property
    def omega_n(self) -> float:
        """Undamped natural frequency of the linearized healthy plant, rad/s."""
        return math.sqrt(self.k1_n_per_m / self.m_kg)

    @property
    def zeta(self) -> float:
        return self.c_ns_per_m / (2.0 * math.sqrt(self.k1_n_per_m * self.m_kg))

    def linearized(self) -> "PlantParams":
        return replace(self, k2_n_per_m2=0.0, k3_n_per_m3=0.0, alpha=1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        keys = [k for k in cls.__dataclass_fields__ if k != "alpha" or "alpha" in d]
        try:
            return cls(**{k: float(d[k]) for k in keys})
        except KeyError as exc:
            raise ValidationError(f"plant parameters missing key {exc}") from None
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


TABLE1 = PlantParams(m_kg=0.26, c_ns_per_m=1.36, k1_n_per_m=5.49e3, k2_n_per_m2=3.24e4, k3_n_per_m3=4.68e7)


@dataclass(frozen=True)
class GammaParams:
    """Gamma prior parameterized by mean and dispersion (coefficient of variation).

    The maximum entropy density on ``(0, inf)`` with known mean and finite
    ``E[ln Z]`` is a gamma law with shape ``1/dispersion**2`` and scale
    ``mean * dispersion**2``.
    """

    mean: float
    dispersion: float

    def __post_init__(self):
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise ValidationError("gamma prior mean must be positive")
        if not (self.dispersion > 0 and math.isfinite(self.dispersion)):
            raise ValidationError("gamma prior dispersion must be positive")

    @property
    def shape(self) -> float:
        return 1.0 / self.dispersion**2

    @property
    def scale(self) -> float:
        return self.mean * self.dispersion**2

    def pdf(self, z):
        """Density written in the mean/dispersion form."""
        z = np.asarray(z, dtype=float)
        a = self.shape
        out = np.zeros_like(z)
        pos = z > 0
        r = z[pos] / self.mean
        logp = -math.log(self.mean) + a * math.log(a) - math.lgamma(a) + (a - 1) * np.log(r) - a * r
        out[pos] = np.exp(logp)
        return out


@dataclass(frozen=True)
class StochasticPlantSpec:
    """Nominal plant plus independent priors on ``k1`` and ``c``."""

    nominal: PlantParams
    k1_prior: GammaParams
    c_prior: GammaParams

    def with_alpha(self, alpha: float) -> "StochasticPlantSpec":
        return replace(self, nominal=replace(self.nominal, alpha=alpha))

    def to_dict(self) -> dict:
        return {
            "nominal": self.nominal.to_dict(),
            "k1_prior": asdict(self.k1_prior),
            "c_prior": asdict(self.c_prior),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StochasticPlantSpec":
        try:
            return cls(
                nominal=PlantParams.from_dict(d["nominal"]),
                k1_prior=GammaParams(float(d["k1_prior"]["mean"]), float(d["k1_prior"]["dispersion"])),
                c_prior=GammaParams(float(d["c_prior"]["mean"]), float(d["c_prior"]["dispersion"])),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed plant spec: missing or invalid {exc}") from None


def default_plant_spec() -> StochasticPlantSpec:
    """Table-1 nominal plant with 1 % dispersion on ``k1`` and ``c``."""
    return StochasticPlantSpec(
        nominal=TABLE1,
        k1_prior=GammaParams(TABLE1.k1_n_per_m, 0.01),
        c_prior=GammaParams(TABLE1.c_ns_per_m, 0.01),
    )


def load_plant_spec(path) -> StochasticPlantSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read plant config {path}: {exc}") from None
    return StochasticPlantSpec.from_dict(doc)


def save_plant_spec(spec: StochasticPlantSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class SimConfig:
    """Sampling and integration settings."""

    sample_rate_hz: float = 512.0
    n_samples: int = 2048
    oversample: int = 16
    initial_state: tuple = field(default=(0.0, 0.0))

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValidationError("sample rate must be positive")
        if int(self.n_samples) != self.n_samples or self.n_samples < 2:
            raise ValidationError("n_samples must be an integer >= 2")
        if int(self.oversample) != self.oversample or self.oversample < 1:
            raise ValidationError("oversample must be an integer >= 1")
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_state"] = list(self.initial_state)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        kw = dict(d)
        if "initial_state" in kw:
            kw["initial_state"] = tuple(kw["initial_state"])
        return cls(**kw)


def excitation_chirp(amplitude_n: float, cfg: SimConfig, f0_hz: float = 15.0, f1_hz: float = 30.0) -> TimeSeries:
    """Linear sweep spanning exactly the configured record length."""
    return generate_chirp(ChirpSpec(amplitude_n, f0_hz, f1_hz, cfg.duration_s), cfg.sample_rate_hz)


def restoring_force(params: PlantParams, x_m: float) -> float:
    """Bilinear crack force: ``k1 x`` in tension, ``alpha k1 x`` in compression."""
    if x_m >= 0:
        return params.k1_n_per_m * x_m
    return params.alpha * params.k1_n_per_m * x_m


@numba.njit(cache=True)
def _accel(x, v, u, m, c, k1, k2, k3, alpha):
    f = k1 * x if x >= 0.0 else alpha * k1 * x
    return (u - c * v - f - k2 * x * x - k3 * x * x * x) / m


@numba.njit(cache=True)
def _rk4_velocity(u, fs, oversample, m, c, k1, k2, k3, alpha, x0, v0, out):
    # returns -1 on success, otherwise the failing substep index
    n = u.shape[0]
    h = 1.0 / (fs * oversample)
    x = x0
    v = v0
    out[0] = v
    for k in range(n - 1):
        u0 = u[k]
        du = u[k + 1] - u0
        for s in range(oversample):
            ua = u0 + du * (s / oversample)
            ub = u0 + du * ((s + 0.5) / oversample)
            uc = u0 + du * ((s + 1.0) / oversample)
            a1 = _accel(x, v, ua, m, c, k1, k2, k3, alpha)
            x2 = x + 0.5 * h * v
            v2 = v + 0.5 * h * a1
            a2 = _accel(x2, v2, ub, m, c, k1, k2, k3, alpha)
            x3 = x + 0.5 * h * v2
            v3 = v + 0.5 * h * a2
            a3 = _accel(x3, v3, ub, m, c, k1, k2, k3, alpha)
            x4 = x + h * v3
            v4 = v + h * a3
            a4 = _accel(x4, v4, uc, m, c, k1, k2, k3, alpha)
            x = x + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4)
            v = v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            if not (math.isfinite(x) and math.isfinite(v)):
                return k * oversample + s
        out[k + 1] = v
    return -1


def simulate(params: PlantParams, input: TimeSeries, cfg: SimConfig | None = None) -> TimeSeries:
    """Integrate the plant with fixed-step RK4 and return the sampled velocity.

    The step is ``1 / (Fs * oversample)``; the force is linearly interpolated
    between input samples. Output sample ``k`` is the velocity at ``t_k``, so
    the first sample equals the initial velocity.
    """
    cfg = cfg or SimConfig(sample_rate_hz=input.sample_rate_hz, n_samples=len(input))
    if input.sample_rate_hz != cfg.sample_rate_hz:
        raise ValidationError(f"input rate {input.sample_rate_hz} Hz differs from configured {cfg.sample_rate_hz} Hz")
    if len(input) != cfg.n_samples:
        raise ValidationError(f"input has {len(input)} samples, configuration expects {cfg.n_samples}")
    out = np.empty(len(input))
    x0, v0 = cfg.initial_state
    failed = _rk4_velocity(
        np.ascontiguousarray(input.samples),
        cfg.sample_rate_hz,
        int(cfg.oversample),
        params.m_kg,
        params.c_ns_per_m,
        params.k1_n_per_m,
        params.k2_n_per_m2,
        params.k3_n_per_m3,
        params.alpha,
        x0,
        v0,
        out,
    )
    if failed >= 0:
        raise DivergenceError(int(failed), f"non-finite state at integration substep {failed}")
    return TimeSeries(out, input.sample_rate_hz, input.start_time_s)


def sample_gamma(prior: GammaParams, rng_seed, n: int) -> np.ndarray:
    """Draw ``n`` iid samples from the gamma prior."""
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(rng_seed)
    return rng.gamma(prior.shape, prior.scale, size=n)


def sample_realizations(spec: StochasticPlantSpec, n: int, rng_seed) -> list[PlantParams]:
    """Draw ``n`` joint parameter sets; ``k1`` and ``c`` are independent."""
    if n < 1:
        raise ValidationError("need at least one realization")
    rng = np.random.default_rng(rng_seed)
    k1 = rng.gamma(spec.k1_prior.shape, spec.k1_prior.scale, size=n)
    c = rng.gamma(spec.c_prior.shape, spec.c_prior.scale, size=n)
    return [replace(spec.nominal, k1_n_per_m=float(a), c_ns_per_m=float(b)) for a, b in zip(k1, c)]


def _crossing(f, h, i, j, level):
    # linear interpolation of |H| == level between bins i and j
    return f[i] + (level - h[i]) * (f[j] - f[i]) / (h[j] - h[i])


def estimate_modal(
    low_amp_response: TimeSeries,
    low_amp_input: TimeSeries,
    band_hz: tuple = (5.0, 100.0),
    window_tau_s: float | None = None,
):
    """Natural frequency and damping ratio from a low-amplitude test.

    Peak picking on the mobility FRF followed by the half-power bandwidth.
    Both channels get an exponential window (time constant one third of the
    record by default) and the added damping ``1/tau`` is subtracted again.

    Returns
    -------
    omega_n_rad_s, zeta : float
    """
    u, y = low_amp_input, low_amp_response
    if len(u) != len(y) or u.sample_rate_hz != y.sample_rate_hz:
        raise ValidationError("response and input must share length and sample rate")
    if not np.any(y.samples):
        raise ValidationError("response is identically zero")
    if window_tau_s is None:
        window_tau_s = len(u) / u.sample_rate_hz / 3.0
    freqs, frf = frequency_response(u, y, window_tau_s=window_tau_s, input_floor=1e-2)
    mag = np.abs(frf)
    usable = np.isfinite(mag) & (freqs >= band_hz[0]) & (freqs <= band_hz[1])
    if not usable.any():
        raise EstimationError(f"input carries no energy in {band_hz[0]}-{band_hz[1]} Hz")
    idx = np.flatnonzero(usable)
    i = idx[np.argmax(mag[idx])]
    if i == idx[0] or i == idx[-1] or not usable[i - 1] or not usable[i + 1]:
        raise EstimationError("FRF maximum lies on the edge of the excited band; no identifiable peak")

    # parabolic refinement of the peak
    a, b, c = mag[i - 1], mag[i], mag[i + 1]
    denom = a - 2 * b + c
    delta = 0.5 * (a - c) / denom if denom != 0 else 0.0
    df = freqs[1] - freqs[0]
    f_peak = freqs[i] + delta * df
    h_peak = b - 0.25 * (a - c) * delta
    half = h_peak / math.sqrt(2.0)

    j = i
    while mag[j] > half:
        j -= 1
        if j < 0 or not usable[j]:
            raise EstimationError("lower half-power point outside the excited band")
    f1 = _crossing(freqs, mag, j, j + 1, half)
    j = i
    while mag[j] > half:
        j += 1
        if j >= len(mag) or not usable[j]:
            raise EstimationError("upper half-power point outside the excited band")
    f2 = _crossing(freqs, mag, j - 1, j, half)

    w_peak = 2 * math.pi * f_peak
    sigma_app = math.pi * (f2 - f1)  # half bandwidth, rad/s
    sigma = sigma_app - 1.0 / window_tau_s
    if sigma <= 0:
        raise EstimationError("estimated damping is not positive")
    # window moves the pole real part only; restore the natural frequency
    omega_n = math.sqrt(max(w_peak**2 - sigma_app**2 + sigma**2, 0.0))
    return omega_n, sigma / omega_n
