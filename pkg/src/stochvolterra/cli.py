"""Command-line driver: simulate, identify, detect, roc, relations, reproduce-paper.

Conditions are named ``reference`` (healthy training ensemble) and
``alpha_X.XX`` for each crack severity; ``alpha_1.00`` is an independent
healthy test ensemble. Condition seeds derive from ``--seed``::

    reference   -> seed
    alpha_a     -> seed + 1_000_000 * (1 + round((1 - a) * 1000))

and realization ``i`` of a condition uses ``condition_seed + i``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .detection import (
    FEATURE_KINDS,
    detection_experiment,
    feature_matrix_from_rows,
    mahalanobis_sq,
    model_features,
    roc_curve,
    write_report,
)
from .errors import NumericalError, StochVolterraError, ValidationError
from .montecarlo import (
    EnsembleConfig,
    ModelEnsemble,
    RealizationSignals,
    collect_results,
    ensemble_convergence,
    identify_realization,
    load_ensemble,
    run_ensemble,
    save_ensemble,
    simulate_realization,
)
from .plant import PlantParams, StochasticPlantSpec, default_plant_spec, excitation_chirp, load_plant_spec
from .signals import read_csv, write_csv
from .volterra import RELATIONS_BY_SEVERITY, PoleRelations, fit_pole_relations, relations_for_severity

log = logging.getLogger("stochvolterra")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
DEFAULT_SEVERITIES = (1.00, 0.98, 0.96, 0.94, 0.92, 0.90, 0.88, 0.86)
DESK_N, FULL_N = 256, 2048
REFERENCE = "reference"
SEED_STRIDE = 1_000_000


def condition_name(alpha: float) -> str:
    return f"alpha_{alpha:.2f}"


def condition_seed(seed: int, alpha: float | None) -> int:
    if alpha is None:
        return seed
    return seed + SEED_STRIDE * (1 + round((1 - alpha) * 1000))


@dataclass(frozen=True)
class PipelineConfig:
    plant: StochasticPlantSpec = field(default_factory=default_plant_spec)
    ensemble: EnsembleConfig = field(default_factory=lambda: EnsembleConfig(n_realizations=DESK_N))
    severities: tuple = DEFAULT_SEVERITIES
    kinds: tuple = FEATURE_KINDS
    betas: tuple = (0.005, 0.01, 0.02)
    roc_severity: float = 0.94
    relations: str | PoleRelations = "fit"
    seed: int = 0

    def __post_init__(self):
        if not self.severities:
            raise ValidationError("need at least one severity")
        for a in self.severities:
            if not 0 < a <= 1:
                raise ValidationError(f"severity {a} outside (0, 1]")
        for k in self.kinds:
            if k not in FEATURE_KINDS:
                raise ValidationError(f"unknown feature kind {k!r}")
        for b in self.betas:
            if not 0 < b <= 0.5:
                raise ValidationError(f"beta {b} outside (0, 0.5]")
        if isinstance(self.relations, str) and self.relations not in ("fit", "table"):
            raise ValidationError("relations must be 'fit', 'table' or an explicit {p1..p4} mapping")

    def conditions(self) -> list[tuple[str, float | None]]:
        return [(REFERENCE, None)] + [(condition_name(a), a) for a in self.severities]

    def ensemble_for(self, alpha: float | None, relations: PoleRelations) -> tuple:
        spec = self.plant if alpha is None else self.plant.with_alpha(alpha)
        cfg = replace(self.ensemble, base_seed=condition_seed(self.seed, alpha), relations=relations)
        return spec, cfg


def _load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def build_config(args) -> PipelineConfig:
    """Merge defaults, ``--config`` JSON and command-line flags (flags win)."""
    raw = _load_json(args.config) if args.config else {}
    unknown = set(raw) - {"plant", "ensemble", "severities", "kinds", "betas", "roc_severity", "relations", "seed"}
    if unknown:
        raise ValidationError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    plant = default_plant_spec()
    if args.plant:
        plant = load_plant_spec(args.plant)
    elif isinstance(raw.get("plant"), str):
        plant = load_plant_spec(Path(args.config).parent / raw["plant"])
    elif isinstance(raw.get("plant"), dict):
        plant = StochasticPlantSpec.from_dict(raw["plant"])
    ens = dict(raw.get("ensemble", {}))
    ens.setdefault("n_realizations", DESK_N)
    if args.full:
        ens["n_realizations"] = FULL_N
    if args.n is not None:
        ens["n_realizations"] = args.n
    relations = raw.get("relations", "fit")
    if getattr(args, "relations", None):
        relations = args.relations
    if isinstance(relations, dict):
        relations = PoleRelations.from_dict(relations)
    kw = {
        "plant": plant,
        "ensemble": EnsembleConfig.from_dict(ens),
        "relations": relations,
        "seed": int(args.seed if args.seed is not None else raw.get("seed", 0)),
    }
    for key in ("severities", "kinds", "betas"):
        if key in raw:
            kw[key] = tuple(raw[key])
    if "roc_severity" in raw:
        kw["roc_severity"] = float(raw["roc_severity"])
    if getattr(args, "severities", None):
        kw["severities"] = tuple(args.severities)
    if getattr(args, "kinds", None):
        kw["kinds"] = tuple(args.kinds)
    if getattr(args, "betas", None):
        kw["betas"] = tuple(args.betas)
    if getattr(args, "roc_severity", None) is not None:
        kw["roc_severity"] = args.roc_severity
    return PipelineConfig(**kw)


@contextlib.contextmanager
def staged_directory(final: Path):
    """Yield a temporary sibling directory that replaces ``final`` only on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _write_manifest(directory: Path, command: str, cfg: PipelineConfig, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "created_unix_s": time.time(),
        "seed": cfg.seed,
        "plant": cfg.plant.to_dict(),
        "ensemble": cfg.ensemble.to_dict(),
        "severities": list(cfg.severities),
        "conditions": {name: condition_seed(cfg.seed, a) for name, a in cfg.conditions()},
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def resolve_relations(cfg: PipelineConfig) -> PoleRelations:
    if isinstance(cfg.relations, PoleRelations):
        return cfg.relations
    if cfg.relations == "table":
        return RELATIONS_BY_SEVERITY[1.00]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_pole_relations(cfg.plant.nominal, cfg.ensemble.sim, RELATIONS_BY_SEVERITY[1.00])
    for w in caught:
        log.warning("%s", w.message)
    log.info("pole relations fitted on nominal plant: %s", fit.relations.to_dict())
    return fit.relations


def _write_convergence(ensemble: ModelEnsemble, path: Path) -> None:
    curves = ensemble_convergence(ensemble)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", *curves])
        for n, values in enumerate(zip(*curves.values()), start=1):
            w.writerow([n, *(repr(float(v)) for v in values)])


# --- commands -------------------------------------------------------------------------------


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    n = cfg.ensemble.n_realizations
    with staged_directory(out / "signals") as stage:
        conditions = {}
        for name, alpha in cfg.conditions():
            spec, ecfg = cfg.ensemble_for(alpha, RELATIONS_BY_SEVERITY[1.00])
            cdir = stage / name
            cdir.mkdir()
            params = []
            for i in range(n):
                sig = simulate_realization(spec, ecfg, i)
                for key in ("u_low", "y_low", "u_high", "y_high"):
                    write_csv(getattr(sig, key), cdir / f"r{i:05d}_{key}.csv")
                params.append(sig.params.to_dict())
            conditions[name] = {"alpha": alpha, "seed": ecfg.base_seed, "params": params}
            log.info("simulated %s (%d realizations)", name, n)
        (stage / "signals.json").write_text(json.dumps({"n_realizations": n, "conditions": conditions}, indent=1) + "\n")
    _write_manifest(out, "simulate", cfg)
    return EXIT_OK


def _identify_from_files(cfg: PipelineConfig, ecfg: EnsembleConfig, cdir: Path, params: list, label: str):
    results = []
    for i, p in enumerate(params):
        try:
            series = [read_csv(cdir / f"r{i:05d}_{key}.csv") for key in ("u_low", "y_low", "u_high", "y_high")]
        except FileNotFoundError as exc:
            raise ValidationError(f"missing signal file {exc.filename}; run 'simulate' first or pass --inline") from None
        sig = RealizationSignals(PlantParams.from_dict(p), *series)
        try:
            modal, model = identify_realization(ecfg, sig)
        except StochVolterraError as exc:
            results.append((i, None, f"{type(exc).__name__}: {exc}"))
            continue
        results.append((i, (sig.params, modal, model), None))
    return collect_results(results, replace(ecfg, n_realizations=len(params)), label)


def identify_all(cfg: PipelineConfig, out: Path, inline: bool, jobs) -> dict:
    relations = resolve_relations(cfg)
    ensembles = {}
    signals_meta = None
    if not inline:
        meta_path = out / "signals" / "signals.json"
        if not meta_path.is_file():
            raise ValidationError(f"no simulated signals at {meta_path}; run 'simulate' first or pass --inline")
        signals_meta = json.loads(meta_path.read_text())
    with staged_directory(out / "ensembles") as stage:
        for name, alpha in cfg.conditions():
            spec, ecfg = cfg.ensemble_for(alpha, relations)
            if inline:
                ens = run_ensemble(spec, ecfg, jobs=jobs, label=name)
            else:
                if name not in signals_meta["conditions"]:
                    raise ValidationError(f"condition {name} missing from {out / 'signals'}")
                params = signals_meta["conditions"][name]["params"]
                ens = _identify_from_files(cfg, ecfg, out / "signals" / name, params, name)
            save_ensemble(ens, stage / name)
            _write_convergence(ens, stage / f"convergence_{name}.csv")
            ensembles[name] = ens
            log.info("identified %s: %d models, %d failures", name, len(ens), len(ens.failures))
        (stage / "relations.json").write_text(json.dumps(relations.to_dict(), indent=1) + "\n")
    return ensembles


def cmd_identify(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ensembles = identify_all(cfg, out, args.inline, args.jobs)
    _write_manifest(out, "identify", cfg, {"failures": {k: len(e.failures) for k, e in ensembles.items()}})
    return EXIT_OK


def load_ensembles(cfg: PipelineConfig, out: Path) -> dict:
    expected = {name: out / "ensembles" / name for name, _ in cfg.conditions()}
    missing = [str(p) for p in expected.values() if not (p / "ensemble.json").is_file()]
    if missing:
        raise ValidationError("missing ensembles (run 'identify' first): " + ", ".join(missing))
    return {name: load_ensemble(p) for name, p in expected.items()}


def _run_detection(cfg: PipelineConfig, ensembles: dict):
    probe = excitation_chirp(cfg.ensemble.high_amplitude_n, cfg.ensemble.sim)
    conditions = {a: ensembles[condition_name(a)] for a in cfg.severities}
    roc_sev = cfg.roc_severity if cfg.roc_severity in conditions else None
    return detection_experiment(ensembles[REFERENCE], conditions, cfg.kinds, cfg.betas, probe, roc_severity=roc_sev)


def cmd_detect(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    report = _run_detection(cfg, load_ensembles(cfg, out))
    with staged_directory(out / "report") as stage:
        write_report(report, stage)
    _write_manifest(out, "detect", cfg)
    return EXIT_OK


def cmd_roc(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ensembles = load_ensembles(cfg, out)
    if cfg.roc_severity not in cfg.severities or 1.0 not in cfg.severities:
        raise ValidationError("ROC needs both severity 1.00 (healthy test) and the ROC severity among --severities")
    probe = excitation_chirp(cfg.ensemble.high_amplitude_n, cfg.ensemble.sim)
    healthy, damaged = ensembles[condition_name(1.0)], ensembles[condition_name(cfg.roc_severity)]
    with staged_directory(out / "roc") as stage:
        summary = {}
        for kind in cfg.kinds:
            features = feature_matrix_from_rows(model_features(ensembles[REFERENCE].models, kind, probe), kind)
            roc = roc_curve(
                mahalanobis_sq(features, model_features(healthy.models, kind, probe)),
                mahalanobis_sq(features, model_features(damaged.models, kind, probe)),
            )
            summary[kind] = roc.auc
            with (stage / f"roc_{kind}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr"])
                w.writerows([repr(float(f)), repr(float(t))] for f, t in zip(roc.fpr, roc.tpr))
        (stage / "auc.json").write_text(json.dumps({"severity": cfg.roc_severity, "auc": summary}, indent=1) + "\n")
    return EXIT_OK


def cmd_relations(args, cfg: PipelineConfig) -> int:
    """Fit pole relations on the deterministic plant at every severity."""
    out = Path(args.out)
    rows = []
    for alpha in cfg.severities:
        start = relations_for_severity(min(max(alpha, 0.86), 1.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_pole_relations(replace(cfg.plant.nominal, alpha=alpha), cfg.ensemble.sim, start)
        rows.append((alpha, fit))
        log.info("alpha %.2f: %s", alpha, fit.relations.to_dict())
    with staged_directory(out / "relations") as stage:
        with (stage / "relations.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "p1", "p2", "p3", "p4", "objective", "initial_objective", "converged"])
            for alpha, fit in rows:
                p = (repr(float(v)) for v in fit.relations.as_tuple())
                w.writerow([f"{alpha:.2f}", *p, repr(fit.objective), repr(fit.initial_objective), fit.converged])
    return EXIT_OK


def cmd_reproduce(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ensembles = identify_all(cfg, out, inline=True, jobs=args.jobs)
    report = _run_detection(cfg, ensembles)
    with staged_directory(out / "report") as stage:
        write_report(report, stage)
    _write_manifest(out, "reproduce-paper", cfg)
    beta = 0.01 if 0.01 in report.betas else report.betas[0]
    for kind, res in report.kinds.items():
        auc = "" if res.roc is None else f" AUC={res.roc.auc:.3f}"
        rates = " ".join(f"{s:.2f}:{res.rates[(beta, s)]:.3f}" for s in report.severities)
        print(f"{kind:16s}{auc}  beta={beta:g} {rates}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "detect": cmd_detect,
    "roc": cmd_roc,
    "relations": cmd_relations,
    "reproduce-paper": cmd_reproduce,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--plant", help="stochastic plant specification JSON")
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--full", action="store_true", help=f"use {FULL_N} realizations per condition")
    common.add_argument("--n", type=int, default=None, help="realizations per condition (overrides --full)")
    common.add_argument("--severities", type=float, nargs="+", help="crack severities alpha")
    common.add_argument("--kinds", nargs="+", choices=FEATURE_KINDS, help="feature kinds")
    common.add_argument("--betas", type=float, nargs="+", help="false-alarm probabilities")
    common.add_argument("--roc-severity", type=float, default=None, help="severity used for ROC curves")
    common.add_argument(
        "--relations",
        help="'fit' (default, fitted on the nominal plant), 'table' (tabulated healthy row)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stochvolterra", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write chirp input/output CSVs per realization")
    identify = sub.add_parser("identify", parents=[common], help="identify model ensembles")
    identify.add_argument("--inline", action="store_true", help="simulate in memory instead of reading signals")
    sub.add_parser("detect", parents=[common], help="run detection on identified ensembles")
    sub.add_parser("roc", parents=[common], help="ROC curves of the healthy test set against one severity")
    sub.add_parser("relations", parents=[common], help="fit pole relations per severity (diagnostic)")
    sub.add_parser("reproduce-paper", parents=[common], help="identify all conditions and run detection")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
