"""
Experiment commands tying the pipeline together.

Every run gets its own directory under the output directory (prototypes, model, training
history) and one JSON line in metrics.jsonl. summary.tsv is regenerated from metrics.jsonl
after each command.
"""

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from joblib import Parallel, delayed

import neural_model as nm
import prototypes as pr
from config import PER_CLASS_GRID, RATIO_GRID, ConfigError, ExperimentConfig, TauMode
from data_io import (
    Dataset,
    load_split,
    load_ucr_tsv,
    stratified_subsample,
    write_ucr_tsv,
    z_normalize,
)
from dtw_core import (
    Label,
    MoveSet,
    ShapeError,
    TimeSeries,
    brute_force_dtw,
    cost_matrix,
    dtw_downdiag,
    dtw_full,
    dtw_rolling,
    nearest_neighbor,
    path_cost,
)
from storage import RunLedger, RunRecord

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.tsv"

NN_DTW = "nn-dtw"
WARPNET = "warpnet"


@dataclass(frozen=True)
class MetricsReport:
    """One run's results. Accuracies are fractions in [0, 1]."""

    run_id: str
    dataset: str
    method: str
    rate: float
    selection_seed: int
    train_seed: int
    subsample_seed: int
    config_hash: str
    accuracy: float
    per_class_accuracy: dict[str, float]
    cold_start_accuracy: float | None = None
    train_seconds: float = 0.0
    epochs_run: int = 0
    final_loss: float | None = None
    model_path: str | None = None
    per_class: int | None = None
    shorten_ratio: float | None = None
    n_prototypes: int | None = None
    prototype_length: int | None = None
    tau: float | None = None
    best_over_grid: bool = False
    created: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def __post_init__(self) -> None:
        for v in (self.accuracy, self.cold_start_accuracy, *self.per_class_accuracy.values()):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"Accuracy {v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _per_class_keys(per_class: dict[Label, float]) -> dict[str, float]:
    return {str(c): v for c, v in per_class.items()}


def _run_stem(config: ExperimentConfig, method: str, rate: float) -> str:
    return (
        f"{config.name()}-{method}-r{rate:g}-s{config.selection_seed}"
        f"-{config.hash()[:10]}"
    )


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.train_path is None or config.test_path is None:
        raise ConfigError("Both train_path and test_path are required")
    return load_split(config.train_path, config.test_path, config.normalize, config.name())


def write_report(config: ExperimentConfig, ledger: RunLedger, report: MetricsReport) -> None:
    """Append one record to metrics.jsonl and the run ledger. Single writer."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    with open(config.output_dir / METRICS_FILE, "a") as f:
        f.write(report.to_json() + "\n")
    ledger.append(
        RunRecord(
            run_id=report.run_id,
            dataset=report.dataset,
            method=report.method,
            rate=report.rate,
            selection_seed=report.selection_seed,
            train_seed=report.train_seed,
            subsample_seed=report.subsample_seed,
            config_hash=report.config_hash,
            accuracy=report.accuracy,
            run_dir=str(config.output_dir / report.run_id),
        )
    )
    logger.info(f"{report.run_id}: accuracy {report.accuracy:.4f}")


def summarize(output_dir: Path) -> Path:
    """
    Regenerate summary.tsv: mean and std of accuracy per (dataset, method, rate,
    per_class, shorten_ratio), plus the cold-start columns where present.
    """
    records: list[dict[str, Any]] = []
    metrics = output_dir / METRICS_FILE
    if metrics.exists():
        with open(metrics, "r") as f:
            records = [json.loads(line) for line in f if line.strip()]

    groups: dict[tuple[Any, ...], list[dict[str, Any]]] = {}
    for r in records:
        key = (
            r["dataset"], r["method"], r["rate"], r.get("per_class"), r.get("shorten_ratio"),
            r.get("best_over_grid", False),
        )
        groups.setdefault(key, []).append(r)

    def mean_std(values: list[float]) -> str:
        if not values:
            return "\t"
        std = statistics.pstdev(values) if len(values) > 1 else 0.0
        return f"{statistics.fmean(values):.6f}\t{std:.6f}"

    path = output_dir / SUMMARY_FILE
    with open(path, "w") as f:
        f.write("dataset\tmethod\trate\tper_class\tshorten_ratio\tbest_over_grid\truns"
                "\taccuracy_mean\taccuracy_std\tcold_start_mean\tcold_start_std\n")
        for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
            rs = groups[key]
            acc = [r["accuracy"] for r in rs]
            cold = [r["cold_start_accuracy"] for r in rs
                    if r.get("cold_start_accuracy") is not None]
            cells = "\t".join("" if v is None else str(v) for v in key)
            f.write(f"{cells}\t{len(rs)}\t{mean_std(acc)}\t{mean_std(cold)}\n")
    return path


# ---- NN-DTW baseline --------------------------------------------------------------------------


def cmd_baseline_nndtw(
    train: Dataset, test: Dataset, n_jobs: int = 1
) -> tuple[float, dict[Label, float]]:
    """1-NN under full DTW; ties go to the lower training index"""
    if train.length != test.length:
        raise ShapeError(f"Train length {train.length} != test length {test.length}")
    unknown = [c for c in test.classes if c not in train.classes]
    if unknown:
        raise ValueError(f"Test classes {unknown} do not appear in the training split")

    idx, _ = nearest_neighbor(test.instances, train.instances, n_jobs=n_jobs)
    predicted = [train.instances[i].label for i in idx]
    truth = [x.label for x in test.instances]
    hits = [p == t for p, t in zip(predicted, truth)]
    per_class = {}
    for c in test.classes:
        ch = [h for h, t in zip(hits, truth) if t == c]
        if ch:
            per_class[c] = sum(ch) / len(ch)
    return sum(hits) / len(hits), per_class


def run_baseline(config: ExperimentConfig) -> list[MetricsReport]:
    """NN-DTW on a stratified subsample of the training split, for every rate and repeat"""
    train, test = load_data(config)
    ledger = RunLedger(config.output_dir)
    reports: list[MetricsReport] = []
    for rate in config.rates:
        for r in range(config.repeats):
            cfg = config.repeat(r)
            sub = stratified_subsample(train, rate, cfg.subsample_seed) if rate < 1 else train
            t0 = time.perf_counter()
            accuracy, per_class = cmd_baseline_nndtw(sub, test, cfg.n_jobs)
            run_dir = ledger.allocate_run_dir(_run_stem(cfg, NN_DTW, rate))
            report = MetricsReport(
                run_id=run_dir.name,
                dataset=cfg.name(),
                method=NN_DTW,
                rate=rate,
                selection_seed=cfg.selection_seed,
                train_seed=cfg.train_seed,
                subsample_seed=cfg.subsample_seed,
                config_hash=cfg.hash(),
                accuracy=accuracy,
                per_class_accuracy=_per_class_keys(per_class),
                train_seconds=time.perf_counter() - t0,
            )
            write_report(cfg, ledger, report)
            reports.append(report)
    summarize(config.output_dir)
    return reports


# ---- the model pipeline -----------------------------------------------------------------------


def run_pipeline(
    config: ExperimentConfig, train: Dataset, test: Dataset, rate: float, run_dir: Path,
    n_jobs: int = 1,
) -> MetricsReport:
    """
    Subsample, build prototypes, initialize, evaluate cold start, train, evaluate again, and
    write prototypes, model and history into run_dir.
    """
    sub = stratified_subsample(train, rate, config.subsample_seed) if rate < 1 else train
    protos = pr.build_prototype_set(
        sub, config.per_class, config.shorten_ratio, config.strategy, config.selection_seed
    )
    params = nm.init_from_prototypes(protos, config.sentinel, config.tau)
    batch = sub.instances[: config.calibration_size]
    nm.validate_sentinel(params, batch)
    if config.tau_mode is TauMode.CALIBRATED:
        params = replace(params, tau=nm.calibrate_tau(params, batch, config.min_mode))
    logger.info(f"{run_dir.name}: K={params.K} L={params.L} tau={params.tau:.6g}")

    cold = nm.evaluate(params, test, config.min_mode, n_jobs)
    t0 = time.perf_counter()
    params, history = nm.train(params, sub, config.train_config())
    elapsed = time.perf_counter() - t0
    final = nm.evaluate(params, test, config.min_mode, n_jobs) if history else cold

    pr.save_prototype_set(protos, run_dir / "prototypes.proto")
    model_path = run_dir / "warpnet.model"
    nm.save_model(params, model_path)
    with open(run_dir / "history.tsv", "w") as f:
        f.write("epoch\tmean_loss\ttrain_accuracy\n")
        for h in history:
            f.write(f"{h.epoch}\t{h.mean_loss!r}\t{h.train_accuracy!r}\n")
    with open(run_dir / "config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)

    return MetricsReport(
        run_id=run_dir.name,
        dataset=config.name(),
        method=WARPNET,
        rate=rate,
        selection_seed=config.selection_seed,
        train_seed=config.train_seed,
        subsample_seed=config.subsample_seed,
        config_hash=config.hash(),
        accuracy=final.accuracy,
        per_class_accuracy=_per_class_keys(final.per_class),
        cold_start_accuracy=cold.accuracy,
        train_seconds=elapsed,
        epochs_run=len(history),
        final_loss=history[-1].mean_loss if history else None,
        model_path=str(model_path),
        per_class=config.per_class,
        shorten_ratio=config.shorten_ratio,
        n_prototypes=params.K,
        prototype_length=params.L,
        tau=params.tau,
    )


def _guarded_pipeline(
    config: ExperimentConfig, train: Dataset, test: Dataset, rate: float, run_dir: Path,
    n_jobs: int,
) -> MetricsReport | Exception:
    try:
        return run_pipeline(config, train, test, rate, run_dir, n_jobs)
    except Exception as e:
        logger.error(f"{run_dir.name} failed: {type(e).__name__}: {e}")
        return e


def _run_tasks(
    configs: list[tuple[ExperimentConfig, float]], train: Dataset, test: Dataset,
    ledger: RunLedger, n_jobs: int,
) -> list[MetricsReport]:
    """
    Run every (config, rate) pair. A failed run does not stop the others: every finished run
    is recorded, then the first failure is raised.
    """
    # directories are allocated up front so names do not depend on scheduling
    dirs = [ledger.allocate_run_dir(_run_stem(c, WARPNET, rate)) for c, rate in configs]
    inner_jobs = 1 if len(configs) > 1 else n_jobs
    outcomes: list[MetricsReport | Exception] = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_guarded_pipeline)(c, train, test, rate, d, inner_jobs)
        for (c, rate), d in zip(configs, dirs)
    )
    reports: list[MetricsReport] = []
    for (c, _), outcome in zip(configs, outcomes):
        if isinstance(outcome, MetricsReport):
            write_report(c, ledger, outcome)
            reports.append(outcome)
    failures = [o for o in outcomes if isinstance(o, Exception)]
    if failures:
        summarize(configs[0][0].output_dir)
        logger.error(f"{len(failures)} of {len(configs)} runs failed")
        raise failures[0]
    return reports


def cmd_train(config: ExperimentConfig) -> MetricsReport:
    """One run at the first configured rate (1.0 unless set)"""
    train, test = load_data(config)
    if len(config.rates) > 1:
        logger.warning(f"train uses only the first rate {config.rates[0]}; use sweep for more")
    ledger = RunLedger(config.output_dir)
    (report,) = _run_tasks([(config, config.rates[0])], train, test, ledger, config.n_jobs)
    summarize(config.output_dir)
    return report


def cmd_sweep(config: ExperimentConfig) -> list[MetricsReport]:
    """Every (rate, repeat) pair: subsample, cold-start eval, train, final eval"""
    train, test = load_data(config)
    ledger = RunLedger(config.output_dir)
    tasks = [(config.repeat(r), rate) for rate in config.rates for r in range(config.repeats)]
    logger.info(f"Sweep: {len(tasks)} runs over rates {list(config.rates)}")
    reports = _run_tasks(tasks, train, test, ledger, config.n_jobs)
    summarize(config.output_dir)
    return reports


def cmd_grid(config: ExperimentConfig) -> tuple[list[MetricsReport], MetricsReport]:
    """
    Exhaustive grid over prototypes per class and shortening ratio at the first rate.
    The cell with the best median accuracy over repeats is recorded once more, flagged
    best_over_grid.
    """
    train, test = load_data(config)
    ledger = RunLedger(config.output_dir)
    rate = config.rates[0]
    cells = [
        replace(config, per_class=k, shorten_ratio=ratio)
        for k in PER_CLASS_GRID
        for ratio in RATIO_GRID
    ]
    tasks = [(cell.repeat(r), rate) for cell in cells for r in range(config.repeats)]
    reports = _run_tasks(tasks, train, test, ledger, config.n_jobs)

    by_cell: dict[tuple[int | None, float | None], list[MetricsReport]] = {}
    for rep in reports:
        by_cell.setdefault((rep.per_class, rep.shorten_ratio), []).append(rep)
    best_key = max(
        by_cell, key=lambda k: statistics.median(r.accuracy for r in by_cell[k])
    )
    group = sorted(by_cell[best_key], key=lambda r: r.accuracy)
    median_run = group[(len(group) - 1) // 2]
    best = replace(
        median_run,
        run_id=median_run.run_id + ".best",
        accuracy=statistics.median(r.accuracy for r in group),
        best_over_grid=True,
    )
    write_report(config, ledger, best)
    summarize(config.output_dir)
    logger.info(
        f"Best over grid: per_class={best.per_class} ratio={best.shorten_ratio} "
        f"median accuracy {best.accuracy:.4f}"
    )
    return reports, best


# ---- inspection -------------------------------------------------------------------------------


def cmd_explain(
    model_path: Path, data_path: Path, index: int, out_path: Path, normalize: bool = True,
    mode: nm.MinMode = nm.MinMode.DIRECT,
) -> dict[str, Any]:
    """
    Dump, for one instance, every prototype's distance, softmax weight, class score and the
    alignment it took, as JSON for external plotting. Each prototype entry also carries its
    learned values (L x D), scale W[i] and bias b[i].
    """
    params = nm.load_model(model_path)
    ds = load_ucr_tsv(data_path)
    if normalize:
        ds = z_normalize(ds)
    if not 0 <= index < len(ds):
        raise IndexError(f"Instance {index} outside [0, {len(ds)})")
    x = ds.instances[index]

    scores, distances, weights = nm.class_scores(params, x, mode)
    _, trace = nm.forward(params, x, mode)
    predicted = params.classes[int(scores.argmax())]

    dump: dict[str, Any] = {
        "instance": {"index": index, "id": x.id, "label": x.label, "length": len(x)},
        "predicted": predicted,
        "class_scores": [
            {"class": c, "score": float(s)} for c, s in zip(params.classes, scores)
        ],
        "prototypes": [
            {
                "row": i,
                "class": params.classes[int(params.row_class[i])],
                "distance": float(distances[i]),
                "weight": float(weights[i]),
                "class_score": float(scores[params.row_class[i]]),
                "values": params.P[i].tolist(),
                "scale": params.W[i].tolist(),
                "bias": float(params.b[i]),
                "alignment": [list(p) for p in nm.alignment(trace, i)],
            }
            for i in range(params.K)
        ],
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(dump, f, indent=1)
    logger.info(f"Wrote explanation of instance {index} to {out_path}, predicted {predicted!r}")
    return dump


def cmd_shorten(
    data_path: Path, ratio: float, out_path: Path, normalize: bool = False
) -> float:
    """
    Shorten every series of a UCR file and write the result in the same layout. Returns the
    median relative change of full DTW between neighbouring series after shortening.
    """
    ds = load_ucr_tsv(data_path)
    if normalize:
        ds = z_normalize(ds)
    length = pr.target_length(ds.length, ratio)
    short = [pr.shorten(s, length) for s in ds.instances]
    out = replace(
        ds,
        instances=tuple(
            TimeSeries(p.values, label=s.label, id=s.id) for p, s in zip(short, ds.instances)
        ),
    )
    write_ucr_tsv(out, out_path)
    if len(ds) < 2:
        return 0.0
    change = pr.shortening_report(ds.instances[:-1], ds.instances[1:], ratio)
    logger.info(
        f"Shortened {len(ds)} series {ds.length} -> {length}; median DTW change {change:.4%}"
    )
    return change


def cmd_dtw(
    path_a: Path, index_a: int, path_b: Path, index_b: int, variant: str = "full",
    normalize: bool = False,
) -> dict[str, Any]:
    """DTW between two series taken from UCR files"""
    a = load_ucr_tsv(path_a)
    b = load_ucr_tsv(path_b)
    if normalize:
        a, b = z_normalize(a), z_normalize(b)
    x, y = a.instances[index_a], b.instances[index_b]
    out: dict[str, Any] = {"variant": variant, "x": x.id, "y": y.id}
    if variant == "full":
        distance, path = dtw_full(x, y)
        out["distance"] = distance
        out["path"] = [list(s) for s in path.steps]
        out["path_cost"] = path_cost(cost_matrix(x, y), path)
    elif variant == "downdiag":
        out["distance"] = dtw_downdiag(x, y)
    elif variant == "rolling":
        out["distance"] = dtw_rolling(x, y)
    elif variant == "brute":
        out["distance"] = brute_force_dtw(x, y, MoveSet.FULL)
    else:
        raise ConfigError(f"Unknown DTW variant {variant!r}")
    return out
