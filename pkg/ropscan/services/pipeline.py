"""Training phase end to end: scan -> gen -> train -> eval, every artifact on disk."""
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from loguru import logger

from ropscan.config import versions
from ropscan.schemas import Metrics, PipelineConfig
from ropscan.services.chain_file import write_chains
from ropscan.services.chain_gen import balance_to, build_catalog
from ropscan.services.cnn import save_model
from ropscan.services.encoding import dataset_from_sequences
from ropscan.services.evaluation import (
    cross_validate,
    fit,
    score_model,
    split,
    write_metrics_tsv,
    write_summary,
)
from ropscan.services.memory_image import load_image
from ropscan.services.scanner import iter_inputs, scan_corpus

STAGES = ("scan", "gen", "train", "eval")


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineArtifacts:
    out_dir: Path
    files: dict[str, Path] = field(default_factory=dict)
    holdout: Metrics | None = None
    cv_mean_accuracy: float | None = None


@contextmanager
def _stage(name: str):
    logger.info("Pipeline stage: {}", name)
    try:
        yield
    except Exception as e:
        logger.error("Pipeline stopped in stage {}: {}", name, e)
        raise PipelineStageError(name, e) from e


def run_pipeline(config: PipelineConfig) -> PipelineArtifacts:
    if not config.image.is_file():
        raise FileNotFoundError(f"image not found: {config.image}")
    if not config.corpus.exists():
        raise FileNotFoundError(f"corpus not found: {config.corpus}")
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    art = PipelineArtifacts(out)
    train_config = config.train.model_copy(update={"seed": config.seed})

    record = {"config": json.loads(config.model_dump_json()), "versions": versions()}
    art.files["run"] = out / "run.json"
    art.files["run"].write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    with _stage("scan"):
        image = load_image(config.image)
        scan = scan_corpus(image, iter_inputs(config.corpus), config.workers, min_gadgets=config.min_gadgets)
        if not scan.chains:
            raise ValueError("no potential gadget chains found in the corpus")
        art.files["benign"] = out / "benign.tsv"
        write_chains(art.files["benign"], scan.chains)

    with _stage("gen"):
        catalog = build_catalog(image)
        real = balance_to(scan.chains, catalog, config.seed, config.long_fraction, config.workers)
        art.files["real"] = out / "real.tsv"
        write_chains(art.files["real"], real)

    with _stage("train"):
        dataset = dataset_from_sequences([c.concat_bytes for c in scan.chains], [c.concat_bytes for c in real])
        train_set, test_set = split(dataset, config.train_fraction, config.seed)
        model, history = fit(train_set, config.model, train_config,
                             program=image.program_name, snapshot_id=image.snapshot_id)
        art.files["model"] = out / "model.ropnn"
        save_model(model, art.files["model"])
        logger.info("Trained {} epochs{}", len(history.epochs), " (early stop)" if history.stopped_early else "")

    with _stage("eval"):
        art.holdout = score_model(model, test_set)
        rows = [("holdout", art.holdout)]
        summary = {"holdout": art.holdout.model_dump(), "n_max": dataset.n_max,
                   "samples": len(dataset), "epochs": len(history.epochs)}
        if config.folds >= 2:
            cv = cross_validate(dataset, config.folds, config.model, train_config, config.workers)
            rows += [(f.name, f.metrics) for f in cv.folds]
            art.cv_mean_accuracy = cv.mean_accuracy
            summary["cv"] = {
                "mean_accuracy": cv.mean_accuracy,
                "mean_detection_rate": cv.mean_detection_rate,
                "mean_false_positive_rate": cv.mean_false_positive_rate,
            }
        art.files["report"] = out / "eval.tsv"
        art.files["summary"] = out / "summary.json"
        write_metrics_tsv(art.files["report"], rows)
        write_summary(art.files["summary"], summary)
    return art
