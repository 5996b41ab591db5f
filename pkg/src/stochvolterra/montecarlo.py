"""Monte Carlo identification of stochastic Volterra models.

Each realization draws plant parameters, simulates low- and high-level
chirp responses, adds measurement noise, estimates the modal pair from the
low-level record, maps it to a Kautz basis and fits a Volterra model.

Realization ``i`` is seeded from ``SeedSequence(base_seed + i)`` alone, so
results do not depend on which other realizations are run or in which
order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EnsembleError, StochVolterraError, ValidationError
from .plant import PlantParams, SimConfig, StochasticPlantSpec, estimate_modal, excitation_chirp, simulate
from .signals import TimeSeries, add_noise_snr
from .volterra import (
    DEFAULT_FUNCTIONS,
    PoleRelations,
    RELATIONS_BY_SEVERITY,
    VolterraModel,
    identify_two_step,
    kernel_time_functions,
    modal_kautz_basis,
)

__all__ = [
    "EnsembleConfig",
    "RealizationSignals",
    "ModelEnsemble",
    "MAX_FAILURE_FRACTION",
    "draw_realization_params",
    "simulate_realization",
    "identify_realization",
    "run_ensemble",
    "collect_results",
    "convergence_metric",
    "ensemble_convergence",
    "save_ensemble",
    "load_ensemble",
]

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class EnsembleConfig:
    """Settings shared by every realization of an ensemble."""

    n_realizations: int = 2048
    base_seed: int = 0
    relations: PoleRelations = RELATIONS_BY_SEVERITY[1.00]
    sim: SimConfig = field(default_factory=SimConfig)
    low_amplitude_n: float = 0.1
    high_amplitude_n: float = 1.0
    snr_db: float | None = 30.0
    n_functions: tuple = DEFAULT_FUNCTIONS

    def __post_init__(self):
        if int(self.n_realizations) != self.n_realizations or self.n_realizations < 2:
            raise ValidationError(f"an ensemble needs at least 2 realizations, got {self.n_realizations}")
        if not (self.low_amplitude_n > 0 and self.high_amplitude_n > 0):
            raise ValidationError("excitation amplitudes must be positive")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            raise ValidationError("snr_db must be finite or None (noise off)")
        object.__setattr__(self, "n_functions", tuple(int(j) for j in self.n_functions))

    def to_dict(self) -> dict:
        return {
            "n_realizations": self.n_realizations,
            "base_seed": self.base_seed,
            "relations": self.relations.to_dict(),
            "sim": self.sim.to_dict(),
            "low_amplitude_n": self.low_amplitude_n,
            "high_amplitude_n": self.high_amplitude_n,
            "snr_db": self.snr_db,
            "n_functions": list(self.n_functions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        kw = dict(d)
        if "relations" in kw:
            kw["relations"] = PoleRelations.from_dict(kw["relations"])
        if "sim" in kw:
            kw["sim"] = SimConfig.from_dict(kw["sim"])
        if "n_functions" in kw:
            kw["n_functions"] = tuple(kw["n_functions"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(f"malformed ensemble configuration: {exc}") from None


@dataclass(frozen=True, eq=False)
class RealizationSignals:
    """Excitations and (noisy) measured responses of one realization."""

    params: PlantParams
    u_low: TimeSeries
    y_low: TimeSeries
    u_high: TimeSeries
    y_high: TimeSeries


def _streams(base_seed: int, index: int):
    # parameters, low-level noise, high-level noise
    return np.random.SeedSequence(base_seed + index).spawn(3)


def draw_realization_params(spec: StochasticPlantSpec, cfg: EnsembleConfig, index: int) -> PlantParams:
    rng = np.random.default_rng(_streams(cfg.base_seed, index)[0])
    k1 = rng.gamma(spec.k1_prior.shape, spec.k1_prior.scale)
    c = rng.gamma(spec.c_prior.shape, spec.c_prior.scale)
    return PlantParams(
        spec.nominal.m_kg, float(c), float(k1), spec.nominal.k2_n_per_m2, spec.nominal.k3_n_per_m3, spec.nominal.alpha
    )


def simulate_realization(spec: StochasticPlantSpec, cfg: EnsembleConfig, index: int) -> RealizationSignals:
    """Draw parameters for realization ``index`` and produce its measured signals."""
    _, low_noise, high_noise = _streams(cfg.base_seed, index)
    params = draw_realization_params(spec, cfg, index)
    u_low = excitation_chirp(cfg.low_amplitude_n, cfg.sim)
    u_high = excitation_chirp(cfg.high_amplitude_n, cfg.sim)
    y_low = simulate(params, u_low, cfg.sim)
    y_high = simulate(params, u_high, cfg.sim)
    if cfg.snr_db is not None:
        y_low = add_noise_snr(y_low, cfg.snr_db, low_noise)
        y_high = add_noise_snr(y_high, cfg.snr_db, high_noise)
    return RealizationSignals(params, u_low, y_low, u_high, y_high)


def identify_realization(cfg: EnsembleConfig, signals: RealizationSignals) -> tuple:
    """Return ``((omega_n, zeta), model)`` identified from one realization's signals."""
    omega_n, zeta = estimate_modal(signals.y_low, signals.u_low)
    basis = modal_kautz_basis(
        omega_n, zeta, cfg.relations, signals.u_high.sample_rate_hz, len(signals.u_high), cfg.n_functions
    )
    model = identify_two_step(basis, signals.u_low, signals.y_low, signals.u_high, signals.y_high)
    return (omega_n, zeta), model


def _run_one(args):
    spec, cfg, index = args
    try:
        signals = simulate_realization(spec, cfg, index)
        modal, model = identify_realization(cfg, signals)
    except StochVolterraError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    return index, (signals.params, modal, model), None


@dataclass(frozen=True, eq=False)
class ModelEnsemble:
    """Identified models of the successful realizations, ordered by realization index."""

    models: tuple
    modal: np.ndarray
    params: tuple
    config: EnsembleConfig
    indexes: tuple
    failures: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        n = len(self.models)
        if not (len(self.params) == len(self.indexes) == n and np.shape(self.modal) == (n, 2)):
            raise ValidationError("ensemble arrays must have one entry per model")

    def __len__(self) -> int:
        return len(self.models)

    def subset(self, positions) -> "ModelEnsemble":
        positions = list(positions)
        return ModelEnsemble(
            tuple(self.models[p] for p in positions),
            self.modal[positions],
            tuple(self.params[p] for p in positions),
            self.config,
            tuple(self.indexes[p] for p in positions),
            {},
            self.label,
        )


def collect_results(results, cfg: EnsembleConfig, label: str = "") -> ModelEnsemble:
    """Order ``(index, payload, error)`` triples by index and enforce the failure budget."""
    results = sorted(results, key=lambda r: r[0])
    failures = {i: msg for i, _, msg in results if msg is not None}
    if len(failures) > MAX_FAILURE_FRACTION * cfg.n_realizations:
        sample = "; ".join(f"#{i}: {m}" for i, m in list(failures.items())[:5])
        raise EnsembleError(f"{len(failures)} of {cfg.n_realizations} realizations failed ({sample})")
    for i, msg in failures.items():
        log.warning("realization %d skipped: %s", i, msg)
    ok = [(i, r) for i, r, msg in results if msg is None]
    return ModelEnsemble(
        models=tuple(r[2] for _, r in ok),
        modal=np.array([r[1] for _, r in ok], dtype=float).reshape(-1, 2),
        params=tuple(r[0] for _, r in ok),
        config=cfg,
        indexes=tuple(i for i, _ in ok),
        failures=failures,
        label=label,
    )


def run_ensemble(spec: StochasticPlantSpec, cfg: EnsembleConfig, jobs: int | None = 1, label: str = "") -> ModelEnsemble:
    """Identify ``cfg.n_realizations`` models of the stochastic plant.

    ``jobs`` > 1 fans realizations out to worker processes (``None`` means
    one per CPU). The result is identical for every value of ``jobs``.
    """
    tasks = [(spec, cfg, i) for i in range(cfg.n_realizations)]
    jobs = (os.cpu_count() or 1) if jobs is None else max(int(jobs), 1)
    if jobs == 1:
        results = [_run_one(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (8 * jobs))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=chunk))
    return collect_results(results, cfg, label)


def convergence_metric(functions, dt: float) -> np.ndarray:
    """``conv(N) = sqrt(mean over the first N members of integral |h|^2 dt)``.

    ``functions`` is an ``(n_members, n_time)`` array of sampled time functions.
    """
    h = np.asarray(functions, dtype=float)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValidationError("need a non-empty (members x time) array")
    if not dt > 0:
        raise ValidationError("time step must be positive")
    energy = np.sum(h**2, axis=1) * dt
    return np.sqrt(np.cumsum(energy) / np.arange(1, h.shape[0] + 1))


def ensemble_convergence(ensemble: ModelEnsemble) -> dict:
    """Convergence curves of the first kernel and the main diagonals of kernels 2 and 3."""
    if len(ensemble) == 0:
        raise ValidationError("ensemble is empty")
    dt = 1.0 / ensemble.config.sim.sample_rate_hz
    curves = [[], [], []]
    for model in ensemble.models:
        for store, h in zip(curves, kernel_time_functions(model)):
            store.append(h)
    return {
        name: convergence_metric(np.array(rows), dt)
        for name, rows in zip(("kernel1", "kernel2_diagonal", "kernel3_diagonal"), curves)
    }


def save_ensemble(ensemble: ModelEnsemble, directory) -> None:
    """Write ``ensemble.json`` plus one ``model_<i>.json`` per realization."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "label": ensemble.label,
        "config": ensemble.config.to_dict(),
        "realizations": [
            {"index": i, "omega_n_rad_s": float(m[0]), "zeta": float(m[1]), "params": p.to_dict()}
            for i, m, p in zip(ensemble.indexes, ensemble.modal, ensemble.params)
        ],
        "failures": {str(i): msg for i, msg in ensemble.failures.items()},
    }
    (directory / "ensemble.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for i, model in zip(ensemble.indexes, ensemble.models):
        (directory / f"model_{i}.json").write_text(json.dumps(model.to_dict()) + "\n")


def load_ensemble(directory) -> ModelEnsemble:
    directory = Path(directory)
    manifest_path = directory / "ensemble.json"
    if not manifest_path.is_file():
        raise ValidationError(f"no ensemble manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    rows = manifest["realizations"]
    models = []
    for row in rows:
        path = directory / f"model_{row['index']}.json"
        if not path.is_file():
            raise ValidationError(f"ensemble manifest lists missing model file {path}")
        models.append(VolterraModel.from_dict(json.loads(path.read_text())))
    return ModelEnsemble(
        models=tuple(models),
        modal=np.array([[r["omega_n_rad_s"], r["zeta"]] for r in rows], dtype=float).reshape(-1, 2),
        params=tuple(PlantParams.from_dict(r["params"]) for r in rows),
        config=EnsembleConfig.from_dict(manifest["config"]),
        indexes=tuple(int(r["index"]) for r in rows),
        failures={int(k): v for k, v in manifest.get("failures", {}).items()},
        label=manifest.get("label", ""),
    )
