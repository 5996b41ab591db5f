"""Two-parameter Kautz orthonormal filter banks.

A continuous pole ``S = -xi w + j w sqrt(1 - xi^2)`` is mapped to
``Z = exp(S / Fs)`` and folded into the real parameters::

    b = (Z + conj(Z)) / (1 + Z conj(Z)),    c = -Z conj(Z)

With ``D(z) = z^2 + b(c - 1) z - c`` the functions are::

    Psi_{2j-1} = z sqrt((1-b^2)(1-c^2)) / D * A^(j-1)
    Psi_{2j}   = Psi_{2j-1} (z - b) / sqrt(1 - b^2)
    A(z)       = (-c z^2 + b(c - 1) z + 1) / D       (all-pass)

Filtering is done with the recursive difference equations, so the
memory length only controls the stored impulse responses.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.signal import lfilter

from .errors import InstabilityError, ValidationError
from .signals import TimeSeries

__all__ = [
    "KautzPoleSpec",
    "KautzBank",
    "KautzBasis",
    "poles_from_spec",
    "build_bank",
    "filter_input",
    "allpass_response",
]


@dataclass(frozen=True)
class KautzPoleSpec:
    """Kautz parameters of one kernel order."""

    omega_rad_s: float
    xi: float
    sample_rate_hz: float

    def __post_init__(self):
        if not (self.omega_rad_s > 0 and math.isfinite(self.omega_rad_s)):
            raise ValidationError(f"Kautz frequency must be positive, got {self.omega_rad_s}")
        if not 0 < self.xi < 1:
            raise ValidationError(f"Kautz damping must lie in (0, 1), got {self.xi}")
        if not self.sample_rate_hz > 0:
            raise ValidationError("sample rate must be positive")

    @property
    def continuous_pole(self) -> complex:
        w, xi = self.omega_rad_s, self.xi
        return complex(-xi * w, w * math.sqrt(1.0 - xi * xi))

    @property
    def discrete_pole(self) -> complex:
        return cmath.exp(self.continuous_pole / self.sample_rate_hz)


def poles_from_spec(spec: KautzPoleSpec) -> tuple[float, float]:
    """Real Kautz parameters ``(b, c)`` of a pole specification."""
    z = spec.discrete_pole
    mod2 = z.real * z.real + z.imag * z.imag
    return 2.0 * z.real / (1.0 + mod2), -mod2


def _check_bc(b: float, c: float) -> None:
    if not (abs(b) < 1 and abs(c) < 1):
        raise InstabilityError(f"Kautz section unstable: b={b}, c={c} (need |b|<1 and |c|<1)")


def _denominator(b, c):
    return np.array([1.0, b * (c - 1.0), -c])


def _filter_bank(b: float, c: float, n_functions: int, u: np.ndarray) -> np.ndarray:
    den = _denominator(b, c)
    odd = np.array([0.0, math.sqrt((1 - b * b) * (1 - c * c))])
    h = math.sqrt(1 - c * c)
    even = np.array([h, -b * h])
    allpass = np.array([-c, b * (c - 1.0), 1.0])
    out = np.empty((n_functions, u.size))
    x = np.asarray(u, dtype=float)
    for j in range(n_functions // 2):
        if j:
            x = lfilter(allpass, den, x)
        out[2 * j] = lfilter(odd, den, x)
        out[2 * j + 1] = lfilter(even, den, x)
    return out


@dataclass(frozen=True, eq=False)
class KautzBank:
    """A bank of ``n_functions`` Kautz filters sharing one pole pair.

    Impulse responses are realized on first access only; filtering uses
    the recursions directly.
    """

    spec: KautzPoleSpec
    n_functions: int
    b: float
    c: float
    memory_len: int

    @cached_property
    def impulse_responses(self) -> np.ndarray:
        impulse = np.zeros(self.memory_len)
        impulse[0] = 1.0
        psi = _filter_bank(self.b, self.c, self.n_functions, impulse)
        psi.flags.writeable = False
        return psi

    def gram(self) -> np.ndarray:
        psi = self.impulse_responses
        return psi @ psi.T

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("impulse_responses", None)
        return state


def build_bank(spec: KautzPoleSpec, n_functions: int, memory_len: int) -> KautzBank:
    """Kautz bank of ``n_functions`` filters with impulse responses of length ``memory_len``."""
    if n_functions < 2 or n_functions % 2:
        raise ValidationError(f"number of Kautz functions must be even and >= 2, got {n_functions}")
    if memory_len < 4:
        raise ValidationError("memory length must be at least 4")
    b, c = poles_from_spec(spec)
    _check_bc(b, c)
    return KautzBank(spec, int(n_functions), b, c, int(memory_len))


def filter_input(bank: KautzBank, input) -> np.ndarray:
    """Filter a signal through every function of the bank.

    Returns an array of shape ``(n_functions, len(input))``: the causal
    convolution of the input with each Kautz impulse response (untruncated).
    """
    if isinstance(input, TimeSeries):
        if input.sample_rate_hz != bank.spec.sample_rate_hz:
            raise ValidationError("input sample rate differs from the Kautz bank sample rate")
        u = input.samples
    else:
        u = np.asarray(input, dtype=float)
    if u.ndim != 1 or u.size < 1:
        raise ValidationError("input must be a non-empty 1-D signal")
    return _filter_bank(bank.b, bank.c, bank.n_functions, u)


def allpass_response(b: float, c: float, theta) -> np.ndarray:
    """Complex frequency response of the all-pass section at angles ``theta``."""
    z = np.exp(1j * np.asarray(theta, dtype=float))
    return (-c * z**2 + b * (c - 1) * z + 1) / (z**2 + b * (c - 1) * z - c)


@dataclass(frozen=True, eq=False)
class KautzBasis:
    """Kautz banks for the first, second and third kernel orders."""

    banks: tuple

    def __post_init__(self):
        if len(self.banks) != 3:
            raise ValidationError("a Kautz basis holds exactly three banks (orders 1, 2, 3)")
        rates = {bank.spec.sample_rate_hz for bank in self.banks}
        if len(rates) != 1:
            raise ValidationError("all banks of a basis must share the sample rate")
        object.__setattr__(self, "banks", tuple(self.banks))

    @property
    def pole_specs(self) -> tuple:
        return tuple(bank.spec for bank in self.banks)

    @property
    def n_functions(self) -> tuple:
        return tuple(bank.n_functions for bank in self.banks)

    @property
    def sample_rate_hz(self) -> float:
        return self.banks[0].spec.sample_rate_hz

    @property
    def memory_len(self) -> int:
        return self.banks[0].memory_len

    def bank(self, order: int) -> KautzBank:
        return self.banks[order - 1]

    @classmethod
    def build(cls, specs, n_functions=(2, 4, 6), memory_len: int = 2048) -> "KautzBasis":
        return cls(tuple(build_bank(s, j, memory_len) for s, j in zip(specs, n_functions)))

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "memory_len": self.memory_len,
            "orders": [
                {"omega_rad_s": b.spec.omega_rad_s, "xi": b.spec.xi, "n_functions": b.n_functions} for b in self.banks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KautzBasis":
        try:
            fs = float(d["sample_rate_hz"])
            specs = [KautzPoleSpec(float(o["omega_rad_s"]), float(o["xi"]), fs) for o in d["orders"]]
            js = [int(o["n_functions"]) for o in d["orders"]]
            return cls.build(specs, js, int(d["memory_len"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed Kautz basis: {exc}") from None
