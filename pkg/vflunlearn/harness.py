"""Experiment arms, timing reports and plots."""

import os
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import sklearn

from vflunlearn import __version__
from vflunlearn.config import DatasetSection, ExperimentConfig
from vflunlearn.data import (
    ClientDataset,
    RawDataset,
    VerticalBatch,
    build_backdoor_testset,
    concat_datasets,
    inject_backdoor,
    load_cifar_batch,
    load_idx,
    partition_clients,
    synth_dataset,
    target_ascent_data,
    vertical_split,
)
from vflunlearn.exceptions import ArgumentError, MissingArtifactError, NumericError
from vflunlearn.logger import Logger
from vflunlearn.protocol import (
    FedAvgResult,
    SplitArchitecture,
    SplitModel,
    build_architecture,
    retrain_without_target,
    train_fedavg,
)
from vflunlearn.store import MANIFEST, ArtifactStore
from vflunlearn.unlearn import (
    UnlearnOutcome,
    calibrate_radius,
    constrained_model,
    grid_search_R,
    grid_search_T,
    post_train,
    run_unlearning,
)
from vflunlearn.utils import MetricsRecord, derive_seed, metrics_frame, read_metrics
from vflunlearn.verify import (
    EvalSets,
    build_attack_dataset,
    mia_recall,
    train_attack_models,
    train_shadow_models,
)

IDX_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class PreparedData:
    """Everything the arms consume, built once per run."""

    architecture: SplitArchitecture
    clients: List[ClientDataset]
    target: ClientDataset
    target_data: VerticalBatch
    eval_sets: EvalSets
    shadow_pool: VerticalBatch


def _find_file(directory: str, name: str) -> str:
    for candidate in (name, f"{name}.gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise ArgumentError(f"{name} (or {name}.gz) not found in {directory}")


def load_dataset(
    section: DatasetSection, seed: int, pool_size: int
) -> Tuple[RawDataset, RawDataset, RawDataset]:
    """Load the train split, the test split and a disjoint shadow-model pool.

    The pool is taken from the training samples after ``train_limit``; when
    none are left it falls back to the test split.

    Returns:
        Tuple[RawDataset, RawDataset, RawDataset]: (train, test, pool).
    """
    if section.name == "synth":
        n_train, n_test = section.synth_train, section.synth_test
        full = synth_dataset(
            derive_seed(seed, "synth"),
            n_train + n_test + pool_size,
            height=section.synth_height,
            width=section.synth_width,
            noise=section.synth_noise,
        )
        return (
            full.subset(n_train),
            full.subset(n_test, offset=n_train),
            full.subset(pool_size, offset=n_train + n_test),
        )

    if section.name == "cifar10":
        train_full = concat_datasets(
            [load_cifar_batch(_find_file(section.path, f)) for f in CIFAR_TRAIN_FILES],
            name="cifar10",
        )
        test = load_cifar_batch(_find_file(section.path, CIFAR_TEST_FILE), name="cifar10-test")
    else:
        paths = [_find_file(section.path, f) for f in IDX_FILES]
        train_full = load_idx(paths[0], paths[1], name=section.name)
        test = load_idx(paths[2], paths[3], name=f"{section.name}-test")

    train = train_full.subset(section.train_limit)
    test = test.subset(section.test_limit)
    pool = train_full.subset(pool_size, offset=len(train))
    if len(pool) < 2:
        Logger.harness.warning("No training samples left for shadow models, using the test split")
        pool = test.subset(pool_size)
    return train, test, pool


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Split, partition and poison the data and build the split architecture.

    Only the target client is poisoned.
    """
    master = cfg.experiment.seed
    train, test, pool = load_dataset(cfg.dataset, master, cfg.mia.pool_size)
    if cfg.backdoor.target_label >= train.num_classes:
        raise ArgumentError(
            f"backdoor target label {cfg.backdoor.target_label} outside {train.num_classes} classes"
        )
    split = vertical_split(train)
    target_id = cfg.unlearn.target_client
    clients = [
        (
            inject_backdoor(c, cfg.backdoor, derive_seed(master, "poison", c.client_id))
            if c.client_id == target_id
            else c
        )
        for c in partition_clients(split, cfg.train.num_clients, derive_seed(master, "partition"))
    ]
    target = clients[target_id - 1]
    Logger.harness.info(
        f"{train.name}: {len(train)} train / {len(test)} test / {len(pool)} pool samples, "
        f"client sizes {[len(c) for c in clients]}, target {target_id} "
        f"has {target.poison_count} poisoned samples"
    )
    architecture = build_architecture(
        cfg.dataset.architecture,
        split.left_shape,
        split.right_shape,
        num_classes=train.num_classes,
        hidden=cfg.dataset.hidden,
    )
    return PreparedData(
        architecture=architecture,
        clients=clients,
        target=target,
        target_data=target_ascent_data(target, cfg.unlearn.selected_party, cfg.unlearn.clean_half),
        eval_sets=EvalSets(
            clean=vertical_split(test), backdoor=build_backdoor_testset(test, cfg.backdoor)
        ),
        shadow_pool=vertical_split(pool),
    )


def resolve_seeds(cfg: ExperimentConfig) -> ExperimentConfig:
    """Derive the train/unlearn/mia seeds from the master seed unless set explicitly."""
    master = cfg.experiment.seed
    updates = {}
    for name in ("train", "unlearn", "mia"):
        section = getattr(cfg, name)
        if "seed" not in section.model_fields_set:
            updates[name] = section.model_copy(update={"seed": derive_seed(master, name)})
    return cfg.model_copy(update=updates)


class ExperimentRunner:
    """Runs one experiment arm and collects its metrics, timings and summary.

    Every model an arm needs is built lazily and at most once, so the ``mia``
    arm, which needs all five models, trains each of them a single time.

    Attributes:
        cfg (ExperimentConfig): Config with resolved seeds.
        store (ArtifactStore): Writer for the run directory.
        records (List[MetricsRecord]): metrics.csv rows, in production order.
        timings (Dict[str, float]): Seconds spent building each model.
    """

    def __init__(self, cfg: ExperimentConfig, store: ArtifactStore) -> None:
        self.cfg = resolve_seeds(cfg)
        self.store = store
        self.records: List[MetricsRecord] = []
        self.timings: Dict[str, float] = {}
        self.summary: Dict[str, Any] = {"arm": cfg.experiment.arm, "models": {}}

    @cached_property
    def data(self) -> PreparedData:
        return prepare_data(self.cfg)

    @property
    def num_clients(self) -> int:
        return len(self.cfg.train.active())

    def _score(self, name: str, model: SplitModel) -> Tuple[float, Optional[float]]:
        clean, backdoor = self.data.eval_sets(model)
        self.summary["models"][name] = {"clean_acc": clean, "backdoor_acc": backdoor}
        Logger.harness.info(f"{name}: clean={clean:.4f} backdoor={backdoor}")
        return clean, backdoor

    def _record_rounds(self, name: str, result: FedAvgResult) -> None:
        self.records.extend(result.metrics)
        # evaluation is excluded from wall_ms
        self.timings[name] = sum(r.wall_ms for r in result.metrics) / 1000.0
        self._score(name, result.model)

    @cached_property
    def fedavg(self) -> FedAvgResult:
        result = train_fedavg(
            self.cfg.train,
            self.data.architecture,
            self.data.clients,
            evaluator=self.data.eval_sets,
        )
        self._record_rounds("fedavg", result)
        return result

    @cached_property
    def retrain(self) -> FedAvgResult:
        result = retrain_without_target(
            self.cfg.train,
            self.data.architecture,
            self.data.clients,
            self.cfg.unlearn.target_client,
            self.cfg.unlearn.selected_party,
            evaluator=self.data.eval_sets,
        )
        self._record_rounds("retrain", result)
        return result

    @property
    def target_prev(self) -> SplitModel:
        return self.fedavg.history[self.cfg.unlearn.target_client]

    @cached_property
    def constrained(self) -> SplitModel:
        global_model, target_prev = self.fedavg.model, self.target_prev
        start = time.perf_counter()
        model = constrained_model(global_model, target_prev, self.num_clients)
        self.timings["constrained"] = time.perf_counter() - start
        clean, backdoor = self._score("constrained", model)
        self.records.append(
            MetricsRecord(round=1, phase="constrained", clean_acc=clean, backdoor_acc=backdoor)
        )
        return model

    @cached_property
    def calibration(self) -> Tuple[float, float]:
        """(Dist, R) around the constrained model."""
        dist, radius = calibrate_radius(
            self.constrained,
            num_random=self.cfg.unlearn.num_random,
            seed=derive_seed(self.cfg.unlearn.seed, "calibrate"),
            radius=self.cfg.unlearn.radius,
        )
        self.summary["radius"] = {"dist": dist, "R": radius}
        return dist, radius

    @cached_property
    def unlearned(self) -> UnlearnOutcome:
        _, radius = self.calibration
        start = time.perf_counter()
        outcome = run_unlearning(
            self.cfg.unlearn,
            self.fedavg.model,
            self.target_prev,
            self.data.target_data,
            self.num_clients,
            radius,
        )
        self.timings["unlearn"] = time.perf_counter() - start
        clean, backdoor = self._score("unlearn", outcome.w_unlearn)
        for trace in outcome.trajectory:
            last = trace.epoch == outcome.stop_epoch
            self.records.append(
                MetricsRecord(
                    round=trace.epoch,
                    phase="unlearn",
                    clean_acc=clean if last else None,
                    backdoor_acc=backdoor if last else None,
                    drift=trace.drift,
                    dist_to_center=trace.dist_to_center,
                )
            )
        self.summary["unlearn"] = {
            "stop_epoch": outcome.stop_epoch,
            "stopped_early": outcome.stopped_early,
            "final_drift": outcome.final_drift,
        }
        return outcome

    @cached_property
    def post_trained(self) -> FedAvgResult:
        outcome = self.unlearned
        result = post_train(
            outcome.w_unlearn,
            self.cfg.train,
            self.cfg.unlearn.post_train_rounds,
            self.data.clients,
            self.cfg.unlearn.target_client,
            evaluator=self.data.eval_sets,
        )
        self.records.extend(result.metrics)
        post_seconds = sum(r.wall_ms for r in result.metrics) / 1000.0
        self.timings["unlearn_pt"] = self.timings["unlearn"] + post_seconds
        self._score("unlearn_pt", result.model)
        return result

    def grid_t(self) -> pd.DataFrame:
        _, radius = self.calibration
        table = grid_search_T(
            self.cfg.grid.thresholds,
            self.cfg.unlearn,
            self.fedavg.model,
            self.target_prev,
            self.data.target_data,
            self.num_clients,
            radius,
            evaluator=self.data.eval_sets,
            workers=self.cfg.grid.workers,
        )
        self.store.write_csv("grid_t.csv", table)
        return table

    def grid_r(self) -> pd.DataFrame:
        dist, _ = self.calibration
        table = grid_search_R(
            self.cfg.grid.radius_multipliers,
            self.cfg.unlearn,
            self.fedavg.model,
            self.target_prev,
            self.data.target_data,
            self.num_clients,
            dist,
            evaluator=self.data.eval_sets,
            workers=self.cfg.grid.workers,
        )
        self.store.write_csv("grid_r.csv", table)
        return table

    def mia(self) -> pd.DataFrame:
        """Attack all five models with the same shadow-trained attack models.

        Members are the target client's poisoned training samples as it
        trained on them; nonmembers are triggered test samples.
        """
        models = {
            "fedavg": self.fedavg.model,
            "constrained": self.constrained,
            "unlearn": self.unlearned.w_unlearn,
            "unlearn_pt": self.post_trained.model,
            "retrain": self.retrain.model,
        }
        mia_cfg = self.cfg.mia
        shadows = train_shadow_models(
            self.data.shadow_pool, mia_cfg.num_shadows, self.data.architecture, mia_cfg
        )
        attack_models = train_attack_models(build_attack_dataset(shadows), mia_cfg)

        party = self.cfg.unlearn.selected_party
        members = target_ascent_data(self.data.target, party, clean_half="target")
        backdoor_test = self.data.eval_sets.backdoor
        nonmembers = backdoor_test[np.arange(min(len(members), len(backdoor_test)))]

        rows = [
            {
                "model": name,
                "recall": mia_recall(attack_models, model, members, nonmembers, mia_cfg.threshold),
            }
            for name, model in models.items()
        ]
        table = pd.DataFrame(rows, columns=["model", "recall"])
        self.summary["mia_recall"] = dict(zip(table["model"], table["recall"]))
        Logger.harness.info(f"Membership inference recall: {self.summary['mia_recall']}")
        self.store.write_csv("mia.csv", table)
        return table

    def execute(self) -> None:
        """Run the configured arm."""
        arm = self.cfg.experiment.arm
        Logger.harness.info(f"Running arm {arm} of {self.cfg.experiment.name}")
        steps = {
            "fedavg": lambda: self.fedavg,
            "retrain": lambda: self.retrain,
            "constrained": lambda: self.constrained,
            "unlearn": lambda: self.unlearned,
            "unlearn_pt": lambda: self.post_trained,
            "grid_t": self.grid_t,
            "grid_r": self.grid_r,
            "mia": self.mia,
        }
        steps[arm]()
        if arm in self.summary["models"]:
            self.summary["final"] = self.summary["models"][arm]

    def metrics(self) -> pd.DataFrame:
        df = metrics_frame(self.records)
        if not self.cfg.experiment.timing_in_metrics:
            df["wall_ms"] = np.nan
        return df

    def manifest(self) -> Dict[str, Any]:
        return {
            "arm": self.cfg.experiment.arm,
            "config": self.cfg.model_dump(mode="json"),
            "seeds": {
                "master": self.cfg.experiment.seed,
                "train": self.cfg.train.seed,
                "unlearn": self.cfg.unlearn.seed,
                "mia": self.cfg.mia.seed,
            },
            "timings": self.timings,
            "version": __version__,
            "libraries": {
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "scikit-learn": sklearn.__version__,
                "matplotlib": matplotlib.__version__,
            },
        }


def run(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Execute the configured arm end-to-end and write its artifacts.

    Writes ``metrics.csv``, ``summary.json``, any arm-specific tables, the
    log files and finally ``manifest.json``.

    Args:
        cfg (ExperimentConfig): Validated experiment config.

    Returns:
        Dict[str, Any]: The summary that was written to summary.json.

    Raises:
        NumericError: After ``trajectory.json`` has been written; no manifest
            is written for a failed run.
    """
    store = ArtifactStore(cfg.run_dir)
    Logger.setup_logger(store.path("logs"), cfg.experiment.log_level)
    runner = ExperimentRunner(cfg, store)
    try:
        runner.execute()
    except NumericError as exc:
        path = store.write_json("trajectory.json", {"error": str(exc), "trajectory": exc.trajectory})
        Logger.harness.error(f"Numeric failure, trajectory written to {path}: {exc}")
        raise

    store.write_csv("metrics.csv", runner.metrics())
    runner.summary["timings"] = runner.timings
    store.write_json("summary.json", runner.summary)
    for log_file in ("train.log", "unlearn.log", "harness.log"):
        store.track(os.path.join("logs", log_file))
    Logger.harness.info(f"Run complete, artifacts in {store.run_dir}")
    store.write_manifest(runner.manifest())
    return runner.summary


def time_report(run_dirs: Sequence[str]) -> pd.DataFrame:
    """Collect per-model construction times from finished runs.

    Args:
        run_dirs: Run directories, each holding a manifest.json.

    Returns:
        pd.DataFrame: Columns ``run, arm, model, seconds``.

    Raises:
        MissingArtifactError: Listing every directory without a manifest.
    """
    missing = [d for d in run_dirs if not os.path.exists(os.path.join(d, MANIFEST))]
    if missing:
        raise MissingArtifactError("no manifest for runs", missing)
    rows = []
    for run_dir in run_dirs:
        manifest = ArtifactStore.read_manifest(run_dir)
        for model, seconds in manifest["timings"].items():
            rows.append(
                {"run": run_dir, "arm": manifest["arm"], "model": model, "seconds": seconds}
            )
    return pd.DataFrame(rows, columns=["run", "arm", "model", "seconds"])


def check_speedups(report: pd.DataFrame) -> Dict[str, bool]:
    """Compare mean construction times against the retrain baseline.

    Raises:
        MissingArtifactError: If a model needed for a comparison was never timed.
    """
    seconds = report.groupby("model")["seconds"].mean()
    needed = ["retrain", "unlearn", "unlearn_pt", "constrained"]
    missing = [m for m in needed if m not in seconds.index]
    if missing:
        raise MissingArtifactError("timing report lacks models", missing)
    return {
        "unlearn_under_tenth_of_retrain": bool(seconds["unlearn"] < seconds["retrain"] / 10),
        "unlearn_pt_under_half_of_retrain": bool(seconds["unlearn_pt"] < seconds["retrain"] / 2),
        "constrained_fastest": bool(seconds["constrained"] == seconds.min()),
    }


def find_run_dirs(directory: str) -> List[str]:
    """``directory`` itself if it is a run, else its immediate sub-directories that are."""
    if os.path.exists(os.path.join(directory, "metrics.csv")):
        return [directory]
    return sorted(
        os.path.join(directory, d)
        for d in os.listdir(directory)
        if os.path.exists(os.path.join(directory, d, "metrics.csv"))
    )


def _accuracy_axes(ax, title: str, last_round: int) -> None:
    ax.set_title(title)
    ax.set_xlabel("Round")
    ax.set_ylabel("Accuracy")
    ax.set_xlim(1, last_round)
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize="small")


def emit_plots(run_dirs: Sequence[str], output_dir: Optional[str] = None) -> List[str]:
    """Draw round-vs-accuracy charts (clean and backdoor panels) as SVG.

    One series per (run, phase). Runs holding grid-search tables also get a
    threshold or radius chart.

    Args:
        run_dirs: Run directories holding metrics.csv.
        output_dir: Where the SVG files go; defaults to the first run directory.

    Returns:
        List[str]: Paths of the written SVG files.

    Raises:
        MissingArtifactError: If no run has a metrics.csv.
        ArgumentError: If the metrics hold no accuracy values. No file is written.
    """
    frames = []
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "metrics.csv")
        if os.path.exists(path):
            frame = read_metrics(path)
            frame["run"] = os.path.basename(os.path.normpath(run_dir))
            frames.append(frame)
    if not frames:
        raise MissingArtifactError("no metrics.csv found", list(run_dirs))
    metrics = pd.concat(frames, ignore_index=True)
    metrics = metrics[metrics["clean_acc"].notna() | metrics["backdoor_acc"].notna()]
    if metrics.empty:
        raise ArgumentError("metrics are empty, nothing to plot")

    store = ArtifactStore(output_dir or run_dirs[0])
    written = []
    many_runs = metrics["run"].nunique() > 1
    last_round = max(int(metrics["round"].max()), 2)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, column, title in zip(
        axes, ("clean_acc", "backdoor_acc"), ("Clean accuracy", "Backdoor accuracy")
    ):
        for (run_name, phase), group in metrics.groupby(["run", "phase"], sort=False):
            series = group.dropna(subset=[column])
            if series.empty:
                continue
            label = f"{run_name}/{phase}" if many_runs else phase
            ax.plot(series["round"], series[column], marker="o", label=label)
        _accuracy_axes(ax, title, last_round)
    fig.tight_layout()
    written.append(store.save_figure("accuracy.svg", fig))
    plt.close(fig)

    for run_dir in run_dirs:
        for table_name, x_column, x_label in (
            ("grid_t.csv", "T", "Early-stop threshold T"),
            ("grid_r.csv", "multiplier", "Radius (multiple of Dist)"),
        ):
            path = os.path.join(run_dir, table_name)
            if not os.path.exists(path):
                continue
            table = pd.read_csv(path)
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(table[x_column], table["clean_acc"], marker="o", label="clean")
            ax.plot(table[x_column], table["backdoor_acc"], marker="s", label="backdoor")
            ax.set_xlabel(x_label)
            ax.set_ylabel("Accuracy")
            ax.set_ylim(0.0, 1.0)
            ax.legend(loc="best")
            fig.tight_layout()
            name = table_name.replace(".csv", ".svg")
            if many_runs:
                name = f"{os.path.basename(os.path.normpath(run_dir))}_{name}"
            written.append(store.save_figure(name, fig))
            plt.close(fig)
    Logger.harness.info(f"Wrote plots: {written}")
    return written
