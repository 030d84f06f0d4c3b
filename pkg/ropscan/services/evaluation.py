"""Splitting, cross-validation, grid search and detection metrics.

Real is the positive class: detection rate is the true-positive rate on real
chains and false-positive rate is measured on benign chains.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import StratifiedKFold, train_test_split

from ropscan.schemas import FoldResult, GridResult, GridSpec, Metrics, ModelConfig, TrainConfig
from ropscan.services.cnn import CnnModel, TrainingDivergedError, TrainingHistory, predict, train
from ropscan.services.encoding import Dataset, Label

ECONOMY_ACCURACY_MARGIN = 0.0005
ECONOMY_EPOCH_RATIO = 1.2
HOLDOUT_TEST_FRACTION = 0.2


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    tn, fp, fn, tp = (
        int(v) for v in confusion_matrix(labels, predictions, labels=[Label.BENIGN, Label.REAL]).ravel()
    )
    return Metrics(
        detection_rate=_rate(tp, tp + fn),
        false_positive_rate=_rate(fp, fp + tn),
        accuracy=_rate(tp + tn, tp + tn + fp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def _require_both_classes(dataset: Dataset) -> None:
    counts = dataset.class_counts
    missing = [label.name for label, n in counts.items() if n == 0]
    if missing:
        raise ValueError(f"class {', '.join(missing)} absent from dataset")


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test split."""
    _require_both_classes(dataset)
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    train_idx, test_idx = train_test_split(
        np.arange(len(dataset)),
        train_size=train_fraction,
        stratify=dataset.labels,
        random_state=seed,
    )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def stratified_sample(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    if n >= len(dataset):
        return dataset
    keep, _ = train_test_split(np.arange(len(dataset)), train_size=n, stratify=dataset.labels, random_state=seed)
    return dataset.subset(np.sort(keep))


def fit(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig, program: str = "",
        snapshot_id: str = "", progress: bool = False) -> tuple[CnnModel, TrainingHistory]:
    model = CnnModel(dataset.n_max, model_config, train_config, program=program, snapshot_id=snapshot_id)
    history = train(model, dataset, progress=progress)
    return model, history


def score_model(model: CnnModel, dataset: Dataset) -> Metrics:
    preds, _ = predict(model, dataset)
    return compute_metrics(preds, dataset.labels)


@dataclass
class HoldoutResult:
    metrics: Metrics
    history: TrainingHistory
    model: CnnModel
    train_size: int
    test_size: int


def holdout_evaluate(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> HoldoutResult:
    """Train on `train_fraction` of the data, test on the fixed 20% held out.

    Fractions below 0.8 subsample the training part so that every fraction is
    scored on the same test set.
    """
    if not 0 < train_fraction <= 1 - HOLDOUT_TEST_FRACTION:
        raise ValueError(f"train_fraction must lie in (0, {1 - HOLDOUT_TEST_FRACTION}]")
    pool, test = split(dataset, 1 - HOLDOUT_TEST_FRACTION, seed)
    train_set = stratified_sample(pool, max(2, round(train_fraction * len(dataset))), seed)
    model, history = fit(train_set, model_config, train_config)
    metrics = score_model(model, test)
    logger.info(
        "Holdout ({} train / {} test): DR={:.4f} FPR={:.4f} acc={:.4f}",
        len(train_set), len(test), metrics.detection_rate, metrics.false_positive_rate, metrics.accuracy,
    )
    return HoldoutResult(metrics, history, model, len(train_set), len(test))


@dataclass
class CrossValidation:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.metrics.accuracy for f in self.folds])) if self.folds else 0.0

    @property
    def mean_detection_rate(self) -> float:
        return float(np.mean([f.metrics.detection_rate for f in self.folds])) if self.folds else 0.0

    @property
    def mean_false_positive_rate(self) -> float:
        return float(np.mean([f.metrics.false_positive_rate for f in self.folds])) if self.folds else 0.0


def _run_fold(dataset, train_idx, test_idx, model_config, train_config, k):
    train_set, test_set = dataset.subset(train_idx), dataset.subset(test_idx)
    model, history = fit(train_set, model_config, train_config)
    metrics = score_model(model, test_set)
    logger.info("Fold {}: acc={:.4f} DR={:.4f} FPR={:.4f}", k, metrics.accuracy,
                metrics.detection_rate, metrics.false_positive_rate)
    return FoldResult(name=f"fold{k}", metrics=metrics, epochs=len(history.epochs))


def cross_validate(
    dataset: Dataset,
    folds: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    workers: int = 1,
) -> CrossValidation:
    """Stratified k-fold; every sample is tested exactly once."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(dataset) < folds or min(dataset.class_counts.values()) < folds:
        raise ValueError(f"too few samples per class for {folds} folds: {dataset.class_counts}")
    kfold = StratifiedKFold(n_splits=folds, shuffle=True, random_state=train_config.seed)
    jobs = (
        delayed(_run_fold)(dataset, train_idx, test_idx, model_config, train_config, k)
        for k, (train_idx, test_idx) in enumerate(kfold.split(np.zeros(len(dataset)), dataset.labels), start=1)
    )
    return CrossValidation(folds=list(Parallel(n_jobs=workers, prefer="threads")(jobs)))


def factor_sweep(
    dataset: Dataset,
    factors: Sequence[float],
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> dict[float, Metrics]:
    """One holdout run per penalizing factor, same data and seed."""
    results = {}
    for factor in factors:
        config = train_config.model_copy(update={"penalizing_factor": float(factor)})
        results[float(factor)] = holdout_evaluate(dataset, model_config, config, train_fraction, seed).metrics
    return results


def _run_cell(dataset, cell, train_config, repeat, seed):
    config = train_config.model_copy(update={
        "dropout": cell.dropout,
        "learning_rate": cell.learning_rate,
        "seed": train_config.seed + repeat,
    })
    model_config = ModelConfig(filters=cell.filters, kernels=cell.kernels)
    try:
        result = holdout_evaluate(dataset, model_config, config, seed=seed)
    except TrainingDivergedError as e:
        logger.warning("Grid cell {} repeat {} diverged: {}", cell.index, repeat, e)
        return cell.index, None, None
    return cell.index, result.metrics.accuracy, result.history.epochs_to_convergence()


def rank_results(results: list[GridResult]) -> list[GridResult]:
    """Order by accuracy, letting a cheaper cell overtake one that is barely more accurate.

    A cell that is less than 0.05 points of accuracy ahead while needing at
    least 20% more epochs to converge drops below the cheaper one.
    """
    alive = sorted(
        (r for r in results if not r.diverged),
        key=lambda r: (-r.accuracy, r.epochs_to_convergence, r.index),
    )
    swapped = True
    while swapped:
        swapped = False
        for i in range(len(alive) - 1):
            a, b = alive[i], alive[i + 1]
            if (a.accuracy - b.accuracy < ECONOMY_ACCURACY_MARGIN
                    and a.epochs_to_convergence > b.epochs_to_convergence
                    and a.epochs_to_convergence >= ECONOMY_EPOCH_RATIO * b.epochs_to_convergence):
                alive[i], alive[i + 1] = b, a
                swapped = True
    ranked = [r.model_copy(update={"rank": i}) for i, r in enumerate(alive, start=1)]
    return ranked + [r for r in results if r.diverged]


def grid_search(
    dataset: Dataset,
    grid: GridSpec,
    train_config: TrainConfig,
    subset: int | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[GridResult]:
    cells = grid.cells()
    if not cells:
        raise ValueError("grid is empty")
    if subset:
        dataset = stratified_sample(dataset, subset, seed)
    logger.info("Grid search: {} cells x {} repeats on {} samples", len(cells), grid.repeats, len(dataset))
    jobs = (
        delayed(_run_cell)(dataset, cell, train_config, r, seed)
        for cell in cells for r in range(grid.repeats)
    )
    runs = Parallel(n_jobs=workers, prefer="threads")(jobs)

    results = []
    for cell in cells:
        outcomes = [(acc, ep) for idx, acc, ep in runs if idx == cell.index]
        done = [(acc, ep) for acc, ep in outcomes if acc is not None]
        diverged = len(done) < len(outcomes)
        results.append(GridResult(
            index=cell.index,
            filters=cell.filters,
            kernels=cell.kernels,
            dropout=cell.dropout,
            learning_rate=cell.learning_rate,
            accuracy=float(np.mean([a for a, _ in done])) if done else 0.0,
            epochs_to_convergence=float(np.mean([e for _, e in done])) if done else 0.0,
            diverged=diverged,
        ))
        if diverged:
            logger.warning("Grid cell {} excluded from ranking", cell.index)
    return rank_results(results)


# --- reports ----------------------------------------------------------------

METRIC_FIELDS = ["detection_rate", "false_positive_rate", "accuracy", "tp", "fp", "tn", "fn"]


def write_metrics_tsv(path: str | Path, rows: list[tuple[str, Metrics]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["name"] + METRIC_FIELDS)
        for name, m in rows:
            data = m.model_dump()
            writer.writerow([name] + [repr(data[f]) if isinstance(data[f], float) else data[f] for f in METRIC_FIELDS])


def write_grid_tsv(path: str | Path, results: list[GridResult]) -> None:
    fields = list(GridResult.model_fields)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(fields)
        for r in results:
            data = r.model_dump()
            writer.writerow([",".join(map(str, v)) if isinstance(v, tuple) else v for v in (data[f] for f in fields)])


def write_summary(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
