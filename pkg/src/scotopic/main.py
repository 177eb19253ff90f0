import dataclasses
import logging
import shutil
from contextlib import contextmanager
from importlib import resources as pkg_resources
from pathlib import Path
from typing import List, Optional

import httpx
import typer

from scotopic import config, pipeline
from scotopic.errors import ScotopicError
from scotopic.stage_utils import run_stage
from scotopic.tools.http import MNIST_BASE_URL, fetch_mnist

# Configure logging
logging.basicConfig(
    level=logging.WARNING, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

app = typer.Typer()

ConfigOption = typer.Option(None, "--config", "-c", help="Experiment config (default: <workspace>/config.toml).")
SeedOption = typer.Option(None, "--seed", help="Override [run] seed.")
OutOption = typer.Option(None, "--out", help="Override the output directory.")
SubsetOption = typer.Option(None, "--subset", help="Use only the first N training (and at most N test) images.")


@app.callback()
def main(
    workspace: str = typer.Option(
        ".",
        "--workspace", "-w",
        help="Path to the workspace directory. Defaults to the current directory."
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress at INFO level."),
):
    """
    Scotopic CLI.
    Photon-limited image classification: simulate, train, decide early, and measure the tradeoffs.
    """
    # This is called no matter user passes workspace or not.
    config.set_workspace_dir(workspace)
    config.init_config()
    level = logging.INFO if verbose else getattr(logging, config.get_log_level(), logging.WARNING)
    logging.getLogger().setLevel(level)


@contextmanager
def _exit_on_error():
    """Prints scotopic errors and exits with code 1 instead of a traceback."""
    try:
        yield
    except ScotopicError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {e}")
        raise typer.Exit(code=1)


@contextmanager
def _recorded(cfg):
    """Yields the output directory's manifest and writes it back once the command succeeds."""
    manifest = pipeline.open_manifest(cfg)
    yield manifest
    pipeline.save_manifest(manifest, cfg)


def _load(config_path, seed, out, subset):
    return config.load_experiment_config(config_path).with_overrides(seed=seed, out=out, subset=subset)


def _classifier(cfg):
    model = pipeline.load_trained(cfg)
    estimator = pipeline.load_light_estimator(cfg) if cfg.model.kind == "waldnet-estimated-light" else None
    return model, pipeline.make_classifier(cfg, model, estimator)


@app.command()
def init():
    """
    Initializes a new workspace in the current directory.
    Copies the template config.toml if it doesn't already exist.
    """
    print(f"Initializing scotopic workspace at {config.get_workspace_dir()}...")
    current_dir = Path(config.get_workspace_dir())
    current_dir.mkdir(parents=True, exist_ok=True)

    files_to_copy = {"config.toml.example": "config.toml"}

    from scotopic import resources
    for src_name, dest_name in files_to_copy.items():
        dest_path = current_dir / dest_name
        if not dest_path.exists():
            with pkg_resources.as_file(pkg_resources.files(resources) / src_name) as src_path:
                shutil.copy2(src_path, dest_path)
                print(f"Created {dest_name}")
        else:
            print(f"Skipped {dest_name} (already exists)")

    print("\nWorkspace initialized successfully!")
    print("Next steps:")
    print("1. Run `scotopic fetch-data` to download MNIST")
    print("2. Edit config.toml to choose the model and sweeps")
    print("3. Run `scotopic run` for the full pipeline, or the individual commands")


@app.command()
def fetch_data(
    config_path: Optional[str] = ConfigOption,
    base_url: str = typer.Option(MNIST_BASE_URL, help="Mirror serving the MNIST IDX files."),
    force: bool = typer.Option(False, help="Download even if the files already exist."),
):
    """
    Downloads the MNIST IDX files into the data directory.
    """
    with _exit_on_error():
        cfg = config.load_experiment_config(config_path)
        try:
            fetch_mnist(cfg.data.directory(), base_url=base_url, force=force)
        except httpx.HTTPError as e:
            logger.error(f"Download failed: {e}")
            print(f"Error: download failed: {e}")
            raise typer.Exit(code=1)


@app.command()
def train(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
):
    """
    Trains the configured model and saves it under <out>/models.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            train_set, _ = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            run_stage("train", pipeline.run_train, cfg, train_set, manifest, timings=manifest.timings)


@app.command()
def tune_thresholds(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
):
    """
    Optimizes a threshold schedule per cost of time (eta) for the trained model.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            train_set, _ = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            _, classifier = _classifier(cfg)
            run_stage("tune-thresholds", pipeline.run_tune_thresholds, cfg, classifier, train_set, manifest, timings=manifest.timings)


@app.command()
def sweep_sat(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
):
    """
    Writes the speed-accuracy table for the configured regime (FR or INT).
    FR rows include every schedule previously written by tune-thresholds.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            _, test_set = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            _, classifier = _classifier(cfg)
            schedules = list(pipeline.load_schedules(cfg).values()) if cfg.decision.regime == "FR" else []
            frame = run_stage("sweep-sat", pipeline.run_sweep_sat, cfg, classifier, test_set, schedules, manifest, timings=manifest.timings)
        print(frame.to_string(index=False))


@app.command()
def sweep_noise(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
    parameter: Optional[str] = typer.Option(None, help="One of dark_current, fpn_std, read_noise_std, jitter_std."),
    value: Optional[List[float]] = typer.Option(None, "--value", help="Parameter value; repeat for a sweep."),
):
    """
    FR tradeoff with one noise parameter varied, the others at their configured baseline.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            _, test_set = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            _, classifier = _classifier(cfg)
            run_stage("sweep-noise", pipeline.run_sweep_noise, cfg, classifier, test_set, parameter, value or None, manifest, timings=manifest.timings)


@app.command()
def fit_light(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
):
    """
    Fits the light-level (PPP) estimator and reports its held-out accuracy.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            train_set, test_set = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            run_stage("fit-light", pipeline.run_fit_light, cfg, train_set, test_set, manifest, timings=manifest.timings)


@app.command()
def spiking_bench(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
):
    """
    Compares the spiking runtime against dense inference for each tau_dis.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        with _recorded(cfg) as manifest:
            _, test_set = run_stage("load-data", pipeline.load_datasets, cfg, timings=manifest.timings)
            model = pipeline.load_trained(cfg)
            frame = run_stage("spiking-bench", pipeline.run_spiking_bench, cfg, model, test_set, manifest, timings=manifest.timings)
        print(frame.to_string(index=False))


@app.command()
def exposure_table(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
    lux: Optional[List[float]] = typer.Option(None, "--lux", help="Illuminance in lux; repeat for more rows."),
    time: Optional[List[float]] = typer.Option(None, "--time", help="Exposure time in seconds; repeat for more columns."),
):
    """
    Bits of signal per pixel for each illuminance and exposure time.
    """
    with _exit_on_error():
        cfg = _load(config_path, seed, out, subset)
        if lux or time:
            exposure = config.ExposureConfig(
                illuminances=lux or cfg.exposure.illuminances,
                times=time or cfg.exposure.times,
            )
            cfg = dataclasses.replace(cfg, exposure=exposure)
        with _recorded(cfg) as manifest:
            frame = run_stage("exposure-table", pipeline.run_exposure_table, cfg, manifest, timings=manifest.timings)
        print(frame.to_string(index=False))


@app.command()
def run(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    subset: Optional[int] = SubsetOption,
    manifest: Optional[str] = typer.Option(None, help="Rerun the experiment recorded in this manifest and compare hashes."),
):
    """
    Runs the whole pipeline and writes manifest.toml with every artifact's hash.
    """
    with _exit_on_error():
        if manifest:
            cfg = _load(config_path, seed, out, subset)
            changed = pipeline.rerun_from_manifest(manifest, cfg.output_dir())
            if changed:
                print(f"Hash mismatch: {', '.join(changed)}")
                raise typer.Exit(code=1)
            print("All recorded CSVs reproduced byte for byte.")
            return
        pipeline.run_experiment(_load(config_path, seed, out, subset))


if __name__ == "__main__":
    app()
