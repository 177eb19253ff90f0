"""Experiment orchestration: train, tune, sweep and emit CSVs with a manifest.

Every ``run_*`` function takes the resolved ExperimentConfig and writes its
artifacts under ``cfg.output_dir()``. ``run_experiment`` chains them as
pipeline stages; each stage is timed and its failures are tagged with the
stage name. All randomness derives from the [train] and [run] seeds, so a rerun with the
config recorded in the manifest reproduces every CSV byte for byte.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from scotopic import __version__
from scotopic.config import (
    NOISE_PARAMETERS,
    ExperimentConfig,
    experiment_config_from_dict,
    experiment_config_to_dict,
)
from scotopic.decision.sprt import SAT_COLUMNS, Regime, ThresholdSchedule, Trajectories, evaluate_streams, query_bins, sat_sweep
from scotopic.decision.spiking import spiking_sweep
from scotopic.decision.thresholds import RiskDataset, best_constant_threshold, hard_risk, load_schedule, optimize, save_schedule
from scotopic.errors import ConfigError, SensorError
from scotopic.models.classifiers import (
    AdaptiveClassifier,
    Classifier,
    EnsembleClassifier,
    EstimatedLightClassifier,
    PhotopicClassifier,
    RateClassifier,
)
from scotopic.models.network import AdaptedNetwork
from scotopic.models.serialization import Model, load_model, save_model
from scotopic.models.training import train_ensemble, train_posterior, train_rate, train_specialist
from scotopic.rng import Purpose, derive_seed
from scotopic.sensor import light_estimator
from scotopic.sensor.light_estimator import LightEstimator
from scotopic.sensor.photon_sim import bits_of_signal, log_ppp_grid
from scotopic.sensor.photon_sim import query_bins as int_query_bins
from scotopic.stage_utils import run_stage
from scotopic.tools import storage
from scotopic.tools.idx import ImageSet, load_idx

logger = logging.getLogger(__name__)

ADAPTIVE_KINDS = ("waldnet", "waldnet-estimated-light")
# Cells with less than this many bits are left blank, as in the printed exposure table.
MIN_REPORTED_BITS = 0.5
LIGHT_COLUMNS = ["ppp", "median_estimate", "median_rel_error", "n_images"]
RISK_COLUMNS = ["eta", "constant_tau", "constant_risk", "optimized_risk"]
HISTORY_COLUMNS = ["epoch", "loss", "accuracy", "t0"]


@dataclass
class ExperimentManifest:
    config: dict
    version: str = __version__
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def record(self, path: str, digest: str, out_dir: str):
        self.artifacts[os.path.relpath(path, out_dir)] = digest

    def to_record(self) -> dict:
        return {
            "version": self.version,
            "seeds": self.seeds,
            "timings": self.timings,
            "artifacts": self.artifacts,
            "config": self.config,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ExperimentManifest":
        try:
            return cls(
                config=record["config"],
                version=record.get("version", ""),
                seeds=record.get("seeds", {}),
                timings=record.get("timings", {}),
                artifacts=record.get("artifacts", {}),
            )
        except KeyError as e:
            raise ConfigError(f"manifest is missing the {e} table") from e

    def experiment_config(self) -> ExperimentConfig:
        return experiment_config_from_dict(self.config)


def _seeds(cfg: ExperimentConfig) -> dict:
    return {"run": cfg.seed, "train": cfg.train.seed, "light_eval": derive_seed(cfg.seed, Purpose.LIGHT)}


def open_manifest(cfg: ExperimentConfig) -> ExperimentManifest:
    """
    The manifest in cfg.output_dir(), or a new one. Artifacts recorded by earlier
    commands are kept; config and seeds are replaced by the current run's.
    """
    path = storage.get_manifest_path(cfg.output_dir())
    if os.path.exists(path):
        manifest = ExperimentManifest.from_record(storage.load_manifest(path))
    else:
        manifest = ExperimentManifest(config={})
    manifest.config = experiment_config_to_dict(cfg)
    manifest.seeds = _seeds(cfg)
    return manifest


def save_manifest(manifest: ExperimentManifest, cfg: ExperimentConfig) -> str:
    return storage.save_manifest(manifest.to_record(), storage.get_manifest_path(cfg.output_dir()))


def load_datasets(cfg: ExperimentConfig) -> tuple[ImageSet, ImageSet]:
    missing = cfg.data.missing_files()
    if missing:
        raise ConfigError(f"dataset file(s) not found: {', '.join(missing)} (run `scotopic fetch-data`)")
    train = load_idx(cfg.data.path("train_images"), cfg.data.path("train_labels"))
    test = load_idx(cfg.data.path("test_images"), cfg.data.path("test_labels"))
    train = train.subset(cfg.data.train_subset or None)
    test = test.subset(cfg.data.test_subset or None)
    print(f"Loaded {len(train)} training and {len(test)} test images")
    return train, test


def query_grid(cfg: ExperimentConfig) -> np.ndarray:
    d = cfg.decision
    return log_ppp_grid(d.query_ppp_min, d.max_ppp, d.query_points)


def _save_history(history: list[dict], cfg: ExperimentConfig, manifest: ExperimentManifest | None):
    if not history:
        return
    frame = pd.DataFrame(history).reindex(columns=[c for c in HISTORY_COLUMNS if c in history[0]])
    _emit(frame, storage.get_csv_path("training_history", cfg.output_dir()), cfg, manifest)


def _emit(frame: pd.DataFrame, path: str, cfg: ExperimentConfig, manifest: ExperimentManifest | None) -> str:
    digest = storage.save_csv(frame, path)
    if manifest is not None:
        manifest.record(path, digest, cfg.output_dir())
    return digest


def _save_model(model: Model, name: str, cfg: ExperimentConfig, manifest: ExperimentManifest | None) -> str:
    path = save_model(storage.get_model_path(name, cfg.output_dir()), model)
    if manifest is not None:
        manifest.record(path, storage.content_hash(path), cfg.output_dir())
    return path


def run_train(cfg: ExperimentConfig, train: ImageSet, manifest: ExperimentManifest | None = None) -> Model:
    """Trains the configured model kind and saves it as models/<kind>.scot."""
    kind = cfg.model.kind
    history: list[dict] = []
    if kind in ADAPTIVE_KINDS:
        model = train_posterior(train, cfg.train, cfg.noise, model=cfg.model, history=history)
        print(f"Trained adaptive network, learned t0 = {model.prior_strength:.4g}")
    elif kind == "rate":
        model = train_rate(train, cfg.train, cfg.noise, model=cfg.model, history=history)
    elif kind == "photopic":
        model = train_specialist(train, cfg.model.photopic_ppp, cfg.train, cfg.noise, model=cfg.model, history=history)
    else:
        model = train_ensemble(train, cfg.model.anchors, cfg.train, cfg.noise, model=cfg.model)
    _save_history(history, cfg, manifest)
    _save_model(model, kind, cfg, manifest)
    return model


def load_trained(cfg: ExperimentConfig) -> Model:
    path = storage.get_model_path(cfg.model.kind, cfg.output_dir())
    if not os.path.exists(path):
        raise ConfigError(f"no trained {cfg.model.kind} model at {path} (run `scotopic train` first)")
    return load_model(path)


def make_classifier(cfg: ExperimentConfig, model: Model, estimator: LightEstimator | None = None) -> Classifier:
    kind = cfg.model.kind
    if kind == "waldnet":
        return AdaptiveClassifier(_adapted(model))
    if kind == "waldnet-estimated-light":
        if estimator is None:
            raise ConfigError("waldnet-estimated-light needs a fitted light estimator (run `scotopic fit-light`)")
        return EstimatedLightClassifier(_adapted(model), estimator)
    if kind == "rate":
        return RateClassifier(model)
    if kind == "photopic":
        return PhotopicClassifier(model, cfg.model.photopic_ppp)
    return EnsembleClassifier(model)


def _adapted(model: Model) -> AdaptedNetwork:
    if not isinstance(model, AdaptedNetwork):
        raise ConfigError(f"expected an adapted network, got {type(model).__name__}")
    return model


def _fr_trajectories(cfg: ExperimentConfig, data: ImageSet, classifier: Classifier, noise=None) -> Trajectories:
    noise = noise or cfg.noise
    bins = query_bins(query_grid(cfg), cfg.decision.max_ppp, noise.ppp_per_bin)
    return evaluate_streams(data, classifier, noise, bins, cfg.seed, cfg.decision.workers)


def run_tune_thresholds(
    cfg: ExperimentConfig,
    classifier: Classifier,
    train: ImageSet,
    manifest: ExperimentManifest | None = None,
) -> dict[float, ThresholdSchedule]:
    """Optimizes one schedule per eta on training streams; writes schedules/ and threshold_risk.csv."""
    data = train.subset(cfg.decision.tune_examples)
    traj = _fr_trajectories(cfg, data, classifier)
    risk_data = RiskDataset.from_trajectories(traj, bin_width=cfg.noise.ppp_per_bin)
    constant_cost = cfg.anneal.constant_step_cost
    schedules, rows = {}, []
    for eta in cfg.decision.etas:
        tau, constant_risk = best_constant_threshold(risk_data, eta, constant_cost)
        schedule = optimize(risk_data, eta, cfg.anneal)
        optimized = hard_risk(risk_data, schedule, eta, constant_cost)
        path = save_schedule(
            storage.get_schedule_path(eta, cfg.output_dir()),
            schedule,
            {"constant_tau": f"{tau:.10g}", "examples": len(data), "seed": cfg.seed},
        )
        if manifest is not None:
            manifest.record(path, storage.content_hash(path), cfg.output_dir())
        schedules[eta] = schedule
        rows.append({"eta": eta, "constant_tau": tau, "constant_risk": constant_risk, "optimized_risk": optimized})
        print(f"eta={eta:g}: best constant risk {constant_risk:.5f}, optimized {optimized:.5f}")
    _emit(pd.DataFrame(rows, columns=RISK_COLUMNS), storage.get_csv_path("threshold_risk", cfg.output_dir()), cfg, manifest)
    return schedules


def load_schedules(cfg: ExperimentConfig) -> dict[float, ThresholdSchedule]:
    """Previously optimized schedules for the configured etas, where present."""
    schedules = {}
    for eta in cfg.decision.etas:
        path = storage.get_schedule_path(eta, cfg.output_dir())
        if os.path.exists(path):
            schedules[eta] = load_schedule(path)
    return schedules


def _int_trajectories(cfg: ExperimentConfig, data: ImageSet, classifier: Classifier) -> Trajectories:
    bins = int_query_bins(cfg.noise, cfg.decision.int_ppps)
    return evaluate_streams(data, classifier, cfg.noise, bins, cfg.seed, cfg.decision.workers)


def sat_table(
    cfg: ExperimentConfig,
    classifier: Classifier,
    data: ImageSet,
    regime: Regime | str,
    schedules: Sequence[ThresholdSchedule] = (),
) -> pd.DataFrame:
    regime = Regime(regime)
    d = cfg.decision
    if regime is Regime.INT:
        traj = _int_trajectories(cfg, data, classifier)
        return sat_sweep(traj, regime, list(traj.ppps), cfg.seed, d.bootstrap_resamples)
    traj = _fr_trajectories(cfg, data, classifier)
    return sat_sweep(traj, regime, [*d.thresholds, *schedules], cfg.seed, d.bootstrap_resamples)


def run_sweep_sat(
    cfg: ExperimentConfig,
    classifier: Classifier,
    test: ImageSet,
    schedules: Sequence[ThresholdSchedule] = (),
    manifest: ExperimentManifest | None = None,
) -> pd.DataFrame:
    """Speed-accuracy table for the configured regime, written to sat_<regime>_<model>.csv."""
    frame = sat_table(cfg, classifier, test, cfg.decision.regime, schedules)
    name = f"sat_{cfg.decision.regime.lower()}_{cfg.model.kind}"
    _emit(frame, storage.get_csv_path(name, cfg.output_dir()), cfg, manifest)
    return frame


def noise_sweep(
    cfg: ExperimentConfig,
    classifier: Classifier,
    data: ImageSet,
    parameter: str,
    values: Sequence[float],
) -> pd.DataFrame:
    """FR tradeoff with one noise parameter varied and the rest at the configured baseline."""
    if parameter not in NOISE_PARAMETERS:
        raise ConfigError(f"unknown noise parameter {parameter!r}, expected one of {NOISE_PARAMETERS}")
    columns = ["parameter", "value", *SAT_COLUMNS]
    frames = []
    for value in values:
        noise = dataclasses.replace(cfg.noise, **{parameter: float(value)})
        traj = _fr_trajectories(cfg, data, classifier, noise)
        frame = sat_sweep(traj, Regime.FR, cfg.decision.thresholds, cfg.seed, cfg.decision.bootstrap_resamples)
        frame.insert(0, "value", float(value))
        frame.insert(0, "parameter", parameter)
        frames.append(frame)
        logger.info(f"Noise sweep {parameter}={value:g} done")
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]


def run_sweep_noise(
    cfg: ExperimentConfig,
    classifier: Classifier,
    test: ImageSet,
    parameter: str | None = None,
    values: Sequence[float] | None = None,
    manifest: ExperimentManifest | None = None,
) -> pd.DataFrame:
    parameter = parameter or cfg.decision.noise_parameter
    values = cfg.decision.noise_values if values is None else values
    frame = noise_sweep(cfg, classifier, test, parameter, values)
    _emit(frame, storage.get_csv_path(f"noise_{parameter}", cfg.output_dir()), cfg, manifest)
    return frame


def run_fit_light(
    cfg: ExperimentConfig,
    train: ImageSet,
    test: ImageSet,
    manifest: ExperimentManifest | None = None,
) -> LightEstimator:
    """Fits the light estimator on training images and reports its accuracy per PPP on test images."""
    lc = cfg.light
    pairs = light_estimator.training_pairs(train.pixels[: lc.train_images], lc.ppps, cfg.noise, cfg.seed)
    est = light_estimator.fit(pairs, lc.box_sizes, lc.top_ks, seed=cfg.seed)
    _emit(pd.DataFrame([est.to_record()]), storage.get_csv_path("light_estimator", cfg.output_dir()), cfg, manifest)

    held_out = light_estimator.training_pairs(
        test.pixels[: lc.eval_images], lc.ppps, cfg.noise, derive_seed(cfg.seed, Purpose.LIGHT)
    )
    rows = []
    for ppp in lc.ppps:
        estimates = np.array([light_estimator.estimate_ppp(est, c) for c, p in held_out if p == ppp])
        rows.append({
            "ppp": ppp,
            "median_estimate": float(np.median(estimates)),
            "median_rel_error": float(np.median(np.abs(estimates - ppp) / ppp)),
            "n_images": int(estimates.size),
        })
    _emit(pd.DataFrame(rows, columns=LIGHT_COLUMNS), storage.get_csv_path("light_accuracy", cfg.output_dir()), cfg, manifest)
    print(f"Light estimator: box {est.box_size}, top-{est.top_k}")
    return est


def load_light_estimator(cfg: ExperimentConfig) -> LightEstimator:
    path = storage.get_csv_path("light_estimator", cfg.output_dir())
    if not os.path.exists(path):
        raise ConfigError(f"no fitted light estimator at {path} (run `scotopic fit-light` first)")
    return LightEstimator.from_record(pd.read_csv(path).iloc[0].to_dict())


def run_spiking_bench(
    cfg: ExperimentConfig,
    net: Model,
    test: ImageSet,
    manifest: ExperimentManifest | None = None,
) -> pd.DataFrame:
    sc = cfg.spiking
    frame = spiking_sweep(
        test.subset(sc.examples),
        _adapted(net),
        ThresholdSchedule.constant(sc.threshold),
        sc.taus,
        cfg.noise,
        query_grid(cfg),
        cfg.decision.max_ppp,
        cfg.seed,
    )
    _emit(frame, storage.get_csv_path("spiking", cfg.output_dir()), cfg, manifest)
    return frame


def _time_label(t: float) -> str:
    if t < 1 and abs(1 / t - round(1 / t)) < 1e-9:
        return f"1/{round(1 / t)}"
    return f"{t:g}"


def exposure_table(illuminances: Sequence[float], times: Sequence[float]) -> pd.DataFrame:
    """Bits of signal per pixel: one row per illuminance, one column per exposure time."""
    for name, values in (("illuminance", illuminances), ("exposure time", times)):
        bad = [v for v in values if not v > 0]
        if bad:
            raise SensorError(f"{name} entries must be > 0, got {bad}")
    rows = []
    for lux in illuminances:
        row = {"illuminance_lux": float(lux)}
        for t in times:
            bits = bits_of_signal(t, lux)
            row[_time_label(t)] = bits if bits >= MIN_REPORTED_BITS else np.nan
        rows.append(row)
    return pd.DataFrame(rows, columns=["illuminance_lux", *(_time_label(t) for t in times)])


def run_exposure_table(cfg: ExperimentConfig, manifest: ExperimentManifest | None = None) -> pd.DataFrame:
    frame = exposure_table(cfg.exposure.illuminances, cfg.exposure.times)
    _emit(frame, storage.get_csv_path("exposure_table", cfg.output_dir()), cfg, manifest)
    return frame


def run_experiment(cfg: ExperimentConfig) -> ExperimentManifest:
    """
    Runs the full pipeline for one model kind and writes manifest.toml next to its outputs:
    load data -> train -> [fit light] -> [tune thresholds] -> SAT sweep -> noise sweep
    -> [spiking bench] -> exposure table.
    """
    manifest = ExperimentManifest(config=experiment_config_to_dict(cfg), seeds=_seeds(cfg))
    timings = manifest.timings
    out_dir = cfg.output_dir()
    print(f"Running {cfg.model.kind} experiment into {out_dir}")

    train, test = run_stage("load-data", load_datasets, cfg, timings=timings)
    model = run_stage("train", run_train, cfg, train, manifest, timings=timings)
    estimator = None
    if cfg.model.kind == "waldnet-estimated-light":
        estimator = run_stage("fit-light", run_fit_light, cfg, train, test, manifest, timings=timings)
    classifier = make_classifier(cfg, model, estimator)

    schedules = {}
    if cfg.decision.regime == "FR" and cfg.decision.etas:
        schedules = run_stage("tune-thresholds", run_tune_thresholds, cfg, classifier, train, manifest, timings=timings)
    run_stage("sweep-sat", run_sweep_sat, cfg, classifier, test, list(schedules.values()), manifest, timings=timings)
    run_stage("sweep-noise", run_sweep_noise, cfg, classifier, test, manifest=manifest, timings=timings)
    if cfg.model.kind in ADAPTIVE_KINDS:
        run_stage("spiking-bench", run_spiking_bench, cfg, model, test, manifest, timings=timings)
    run_stage("exposure-table", run_exposure_table, cfg, manifest, timings=timings)

    print(f"Manifest written to {save_manifest(manifest, cfg)}")
    return manifest


def rerun_from_manifest(path: str, out_dir: str) -> list[str]:
    """Reruns a recorded experiment into ``out_dir``; returns the CSVs whose hash changed."""
    recorded = ExperimentManifest.from_record(storage.load_manifest(path))
    cfg = recorded.experiment_config().with_overrides(out=out_dir)
    fresh = run_experiment(cfg)
    return sorted(
        name
        for name, digest in recorded.artifacts.items()
        if name.endswith(".csv") and fresh.artifacts.get(name) != digest
    )
