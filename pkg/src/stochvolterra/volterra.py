"""Volterra models over Kautz bases: regression, fitting and prediction.

A third-order model is::

    y(k) = sum_i b1[i] l1_i(k)
         + sum_ij b2[i, j] l2_i(k) l2_j(k)
         + sum_ijk b3[i, j, k] l3_i(k) l3_j(k) l3_k(k)

where ``l_eta_i`` is the input filtered by the ``i``-th Kautz function of
order ``eta``. Kernel tensors are symmetric, so the regression keeps only
sorted multi-indexes and weights each column by its number of permutations.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import IllPosedError, InstabilityError, ValidationError
from .kautz import KautzBasis, KautzPoleSpec, filter_input
from .plant import PlantParams, SimConfig, estimate_modal, excitation_chirp, simulate
from .signals import TimeSeries

__all__ = [
    "MODEL_VERSION",
    "PoleRelations",
    "RELATIONS_BY_SEVERITY",
    "relations_for_severity",
    "modal_kautz_basis",
    "multi_indexes",
    "RegressionProblem",
    "LeastSquaresFit",
    "build_regression",
    "fit_least_squares",
    "VolterraModel",
    "identify_two_step",
    "volterra_output",
    "predict",
    "extract_indexes",
    "kernel_time_functions",
    "RelationFit",
    "relation_objective",
    "fit_pole_relations",
]

MODEL_VERSION = "volterra_model_v1"
DEFAULT_FUNCTIONS = (2, 4, 6)


@dataclass(frozen=True)
class PoleRelations:
    """Ratios mapping the modal pair ``(omega_n, zeta)`` to the higher-order Kautz poles.

    ``omega_2 = p1 omega_n``, ``xi_2 = p2 zeta``, ``omega_3 = p3 omega_n``,
    ``xi_3 = p4 zeta``.
    """

    p1: float
    p2: float
    p3: float
    p4: float

    def __post_init__(self):
        for name, v in zip("p1 p2 p3 p4".split(), self.as_tuple()):
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"pole relation {name} must be finite and positive, got {v}")

    def as_tuple(self) -> tuple:
        return (self.p1, self.p2, self.p3, self.p4)

    def to_dict(self) -> dict:
        return dict(zip(("p1", "p2", "p3", "p4"), self.as_tuple()))

    @classmethod
    def from_dict(cls, d: dict) -> "PoleRelations":
        try:
            return cls(*(float(d[k]) for k in ("p1", "p2", "p3", "p4")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed pole relations: {exc}") from None


RELATIONS_BY_SEVERITY = {
    1.00: PoleRelations(1.11, 2.7, 1.06, 1.1),
    0.98: PoleRelations(1.07, 2.4, 1.06, 1.1),
    0.96: PoleRelations(1.07, 2.3, 1.06, 1.1),
    0.94: PoleRelations(1.06, 2.2, 1.06, 1.1),
    0.92: PoleRelations(1.06, 2.1, 1.06, 1.1),
    0.90: PoleRelations(1.05, 2.0, 1.06, 1.0),
    0.86: PoleRelations(1.04, 1.8, 1.05, 1.0),
}


def relations_for_severity(alpha: float) -> PoleRelations:
    """Tabulated relations, linearly interpolated between listed severities."""
    grid = sorted(RELATIONS_BY_SEVERITY)
    if not grid[0] <= alpha <= grid[-1]:
        raise ValidationError(f"severity {alpha} outside tabulated range [{grid[0]}, {grid[-1]}]")
    for a in grid:
        if math.isclose(alpha, a, abs_tol=1e-9):
            return RELATIONS_BY_SEVERITY[a]
    hi = next(a for a in grid if a > alpha)
    lo = grid[grid.index(hi) - 1]
    w = (alpha - lo) / (hi - lo)
    lo_p, hi_p = RELATIONS_BY_SEVERITY[lo].as_tuple(), RELATIONS_BY_SEVERITY[hi].as_tuple()
    return PoleRelations(*((1 - w) * a + w * b for a, b in zip(lo_p, hi_p)))


def modal_kautz_basis(
    omega_n: float,
    zeta: float,
    relations: PoleRelations,
    sample_rate_hz: float,
    memory_len: int,
    n_functions=DEFAULT_FUNCTIONS,
) -> KautzBasis:
    """Kautz basis whose first order uses the modal pole and the others the mapped poles."""
    p1, p2, p3, p4 = relations.as_tuple()
    specs = (
        KautzPoleSpec(omega_n, zeta, sample_rate_hz),
        KautzPoleSpec(p1 * omega_n, p2 * zeta, sample_rate_hz),
        KautzPoleSpec(p3 * omega_n, p4 * zeta, sample_rate_hz),
    )
    return KautzBasis.build(specs, n_functions, memory_len)


def multi_indexes(n_functions: int, order: int) -> list[tuple]:
    """Sorted multi-indexes ``i1 <= ... <= i_order``."""
    return list(itertools.combinations_with_replacement(range(n_functions), order))


def _multiplicity(index: tuple) -> int:
    count = math.factorial(len(index))
    for v in Counter(index).values():
        count //= math.factorial(v)
    return count


@dataclass(frozen=True, eq=False)
class RegressionProblem:
    """Design matrix, target and the ``(order, multi-index)`` of every column."""

    design_matrix: np.ndarray
    target: np.ndarray
    column_index: tuple

    @property
    def n_cols(self) -> int:
        return self.design_matrix.shape[1]


def _series(x, rate):
    if isinstance(x, TimeSeries):
        if x.sample_rate_hz != rate:
            raise ValidationError(f"signal rate {x.sample_rate_hz} Hz differs from basis rate {rate} Hz")
        return x.samples
    return np.asarray(x, dtype=float)


def build_regression(basis: KautzBasis, input, target, orders=(1, 2, 3)) -> RegressionProblem:
    """Assemble the symmetric-reduced regression of ``target`` on the filtered input."""
    rate = basis.sample_rate_hz
    u = _series(input, rate)
    y = _series(target, rate)
    if u.shape != y.shape:
        raise ValidationError(f"input length {u.size} differs from target length {y.size}")
    orders = sorted(set(orders))
    if not orders or not set(orders) <= {1, 2, 3}:
        raise ValidationError(f"orders must be a non-empty subset of {{1, 2, 3}}, got {orders}")
    columns, index = [], []
    for order in orders:
        filtered = filter_input(basis.bank(order), u)
        for mi in multi_indexes(filtered.shape[0], order):
            columns.append(_multiplicity(mi) * np.prod(filtered[list(mi)], axis=0))
            index.append((order, mi))
    return RegressionProblem(np.column_stack(columns), y.copy(), tuple(index))


@dataclass(frozen=True, eq=False)
class LeastSquaresFit:
    coefficients: np.ndarray
    residual_rms: float
    relative_residual: float
    condition: float
    rank: int


def fit_least_squares(problem: RegressionProblem, rcond: float | None = None) -> LeastSquaresFit:
    """Minimize ``||G phi - y||`` by SVD after scaling columns to unit norm."""
    G, y = problem.design_matrix, problem.target
    n_rows, n_cols = G.shape
    if n_rows < n_cols:
        raise IllPosedError(n_rows, n_cols, f"{n_rows} samples cannot determine {n_cols} coefficients")
    norms = np.linalg.norm(G, axis=0)
    if np.any(norms == 0):
        raise IllPosedError(int(np.count_nonzero(norms)), n_cols, "design matrix has all-zero columns")
    scaled = G / norms
    if rcond is None:
        rcond = max(n_rows, n_cols) * np.finfo(float).eps
    sol, _, rank, sv = np.linalg.lstsq(scaled, y, rcond=rcond)
    if rank < n_cols:
        raise IllPosedError(int(rank), n_cols)
    phi = sol / norms
    resid = y - G @ phi
    rms = float(np.sqrt(np.mean(resid**2)))
    y_rms = float(np.sqrt(np.mean(y**2)))
    return LeastSquaresFit(
        coefficients=phi,
        residual_rms=rms,
        relative_residual=rms / y_rms if y_rms > 0 else 0.0,
        condition=float(sv[0] / sv[-1]),
        rank=int(rank),
    )


def _symmetric_from_reduced(n: int, order: int, values) -> np.ndarray:
    out = np.zeros((n,) * order)
    for mi, v in zip(multi_indexes(n, order), values):
        for perm in set(itertools.permutations(mi)):
            out[perm] = v
    return out


def _symmetrize(tensor: np.ndarray) -> np.ndarray:
    perms = list(itertools.permutations(range(tensor.ndim)))
    return sum(np.transpose(tensor, p) for p in perms) / len(perms)


@dataclass(frozen=True, eq=False)
class VolterraModel:
    """Symmetric kernel coefficients bound to the Kautz basis they expand in."""

    basis: KautzBasis
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        j1, j2, j3 = self.basis.n_functions
        arrays = {}
        for name, arr, shape in (("b1", self.b1, (j1,)), ("b2", self.b2, (j2, j2)), ("b3", self.b3, (j3, j3, j3))):
            a = np.array(arr, dtype=float)
            if a.shape != shape:
                raise ValidationError(f"{name} has shape {a.shape}, basis requires {shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains non-finite coefficients")
            a.flags.writeable = False
            arrays[name] = a
        for name in ("b2", "b3"):
            a = arrays[name]
            scale = max(float(np.abs(a).max()), 1e-300)
            if np.abs(a - _symmetrize(a)).max() > 1e-12 * scale:
                raise ValidationError(f"{name} is not symmetric under index permutation")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @classmethod
    def from_reduced(cls, basis: KautzBasis, b1, reduced2, reduced3) -> "VolterraModel":
        """Build from coefficients listed in :func:`multi_indexes` order."""
        _, j2, j3 = basis.n_functions
        return cls(basis, b1, _symmetric_from_reduced(j2, 2, reduced2), _symmetric_from_reduced(j3, 3, reduced3))

    @classmethod
    def zeros(cls, basis: KautzBasis) -> "VolterraModel":
        j1, j2, j3 = basis.n_functions
        return cls(basis, np.zeros(j1), np.zeros((j2, j2)), np.zeros((j3, j3, j3)))

    def reduced(self, order: int) -> np.ndarray:
        tensor = (self.b1, self.b2, self.b3)[order - 1]
        return np.array([tensor[mi] for mi in multi_indexes(tensor.shape[0], order)])

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "basis": self.basis.to_dict(),
            "b1": {"indexes": [list(mi) for mi in multi_indexes(len(self.b1), 1)], "values": self.reduced(1).tolist()},
            "b2": {
                "indexes": [list(mi) for mi in multi_indexes(self.b2.shape[0], 2)],
                "values": self.reduced(2).tolist(),
            },
            "b3": {
                "indexes": [list(mi) for mi in multi_indexes(self.b3.shape[0], 3)],
                "values": self.reduced(3).tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolterraModel":
        if d.get("version") != MODEL_VERSION:
            raise ValidationError(f"unsupported model version {d.get('version')!r}, expected {MODEL_VERSION!r}")
        basis = KautzBasis.from_dict(d["basis"])
        tensors = []
        for order, key in enumerate(("b1", "b2", "b3"), start=1):
            n = basis.n_functions[order - 1]
            t = np.zeros((n,) * order)
            for mi, v in zip(d[key]["indexes"], d[key]["values"]):
                for perm in set(itertools.permutations(mi)):
                    t[perm] = v
            tensors.append(t)
        return cls(basis, *tensors)


def volterra_output(basis: KautzBasis, b1, b2, b3, input) -> tuple:
    """Order-wise outputs for raw (not necessarily symmetric) coefficient tensors."""
    u = _series(input, basis.sample_rate_hz)
    b1, b2, b3 = (np.asarray(b, dtype=float) for b in (b1, b2, b3))
    y1 = b1 @ filter_input(basis.bank(1), u)
    y2 = np.zeros_like(y1)
    y3 = np.zeros_like(y1)
    if np.any(b2):
        l2 = filter_input(basis.bank(2), u)
        y2 = np.einsum("in,ij,jn->n", l2, b2, l2)
    if np.any(b3):
        l3 = filter_input(basis.bank(3), u)
        y3 = np.einsum("in,jn,ijn->n", l3, l3, np.einsum("ijk,kn->ijn", b3, l3))
    return y1, y2, y3


def predict(model: VolterraModel, input: TimeSeries) -> tuple:
    """Return ``(y1, y2, y3, total)`` as time series; ``y2 + y3`` is the nonlinear part."""
    if not isinstance(input, TimeSeries):
        input = TimeSeries(input, model.basis.sample_rate_hz)
    y1, y2, y3 = volterra_output(model.basis, model.b1, model.b2, model.b3, input)
    return tuple(input.with_samples(y) for y in (y1, y2, y3, y1 + y2 + y3))


def identify_two_step(
    basis: KautzBasis, u_low: TimeSeries, y_low: TimeSeries, u_high: TimeSeries, y_high: TimeSeries
) -> VolterraModel:
    """Fit the linear kernel on low-level data, then orders 2 and 3 on the high-level residual."""
    if len(u_low) != len(y_low) or len(u_high) != len(y_high):
        raise ValidationError("input/output pairs must have matching lengths")
    linear = fit_least_squares(build_regression(basis, u_low, y_low, orders=(1,)))
    b1 = linear.coefficients
    residual = _series(y_high, basis.sample_rate_hz) - b1 @ filter_input(basis.bank(1), _series(u_high, basis.sample_rate_hz))
    problem = build_regression(basis, u_high, residual, orders=(2, 3))
    phi = fit_least_squares(problem).coefficients
    n2 = sum(1 for order, _ in problem.column_index if order == 2)
    return VolterraModel.from_reduced(basis, b1, phi[:n2], phi[n2:])


def extract_indexes(model: VolterraModel) -> tuple:
    """Diagonal coefficient vectors ``(lambda1, lambda2, lambda3, lambda_nl)``."""
    lam1 = np.array(model.b1)
    lam2 = np.diagonal(model.b2).copy()
    n3 = model.b3.shape[0]
    lam3 = model.b3[np.arange(n3), np.arange(n3), np.arange(n3)].copy()
    return lam1, lam2, lam3, np.concatenate([lam2, lam3])


def kernel_time_functions(model: VolterraModel) -> tuple:
    """First kernel and main diagonals of kernels 2 and 3 over the basis memory."""
    psi1, psi2, psi3 = (bank.impulse_responses for bank in model.basis.banks)
    h1 = model.b1 @ psi1
    h2 = np.einsum("in,ij,jn->n", psi2, model.b2, psi2)
    h3 = np.einsum("in,jn,ijn->n", psi3, psi3, np.einsum("ijk,kn->ijn", model.b3, psi3))
    return h1, h2, h3


RELATION_BOUNDS = ((0.5, 5.0), (0.5, 10.0), (0.5, 5.0), (0.5, 10.0))


def _clamp(p) -> np.ndarray:
    lo, hi = np.array(RELATION_BOUNDS).T
    return np.clip(np.asarray(p, dtype=float), lo, hi)


@dataclass(frozen=True)
class RelationFit:
    relations: PoleRelations
    objective: float
    initial_objective: float
    n_evaluations: int
    converged: bool


def relation_objective(plant: PlantParams, cfg: SimConfig, low_amplitude_n: float = 0.1, high_amplitude_n: float = 1.0):
    """Squared prediction error of identify-then-predict as a function of ``(p1..p4)``.

    The plant is simulated once; the returned callable only refits models.
    Its ``modal`` attribute holds the ``(omega_n, zeta)`` estimate in use.
    """
    u_low = excitation_chirp(low_amplitude_n, cfg)
    u_high = excitation_chirp(high_amplitude_n, cfg)
    y_low = simulate(plant, u_low, cfg)
    y_high = simulate(plant, u_high, cfg)
    omega_n, zeta = estimate_modal(y_low, u_low)

    def objective(p) -> float:
        try:
            basis = modal_kautz_basis(omega_n, zeta, PoleRelations(*_clamp(p)), cfg.sample_rate_hz, cfg.n_samples)
            model = identify_two_step(basis, u_low, y_low, u_high, y_high)
        except (InstabilityError, IllPosedError, ValidationError):
            return math.inf
        total = predict(model, u_high)[3].samples
        return float(np.sum((total - y_high.samples) ** 2))

    objective.modal = (omega_n, zeta)
    return objective


def fit_pole_relations(
    nominal_plant: PlantParams,
    cfg: SimConfig,
    initial: PoleRelations,
    probes=(PoleRelations(1.0, 1.0, 1.0, 1.0),),
    max_evaluations: int = 400,
) -> RelationFit:
    """Derivative-free search for the pole relations minimizing prediction error.

    The simplex starts from the best of ``initial`` and ``probes``. Bounds
    are enforced by clamping. If the evaluation budget runs out the best
    point found is returned with ``converged=False`` and a warning.
    """
    objective = relation_objective(nominal_plant, cfg)
    start = np.array(initial.as_tuple())
    start_value = objective(start)
    best_x, best_f = start, start_value
    for probe in probes:
        value = objective(probe.as_tuple())
        if value < best_f:
            best_x, best_f = np.array(probe.as_tuple()), value
    result = minimize(
        objective,
        best_x,
        method="Nelder-Mead",
        options={"maxfev": max_evaluations, "xatol": 1e-4, "fatol": 1e-12 * max(best_f, 1e-300)},
    )
    x, f = _clamp(result.x), float(result.fun)
    if f > best_f:
        x, f = _clamp(best_x), best_f
    converged = bool(result.success)
    if not converged:
        warnings.warn(f"pole-relation search stopped before convergence: {result.message}", RuntimeWarning, stacklevel=2)
    return RelationFit(PoleRelations(*x), f, start_value, int(result.nfev) + 1 + len(probes), converged)
