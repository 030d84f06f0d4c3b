"""Production path: scan an input, classify every potential chain, decide."""
import csv
from pathlib import Path
from typing import Iterable

from joblib import Parallel, delayed
from loguru import logger

from ropscan.schemas import DetectionVerdict, FlaggedChain, Verdict
from ropscan.services.cnn import CnnModel, classify_many
from ropscan.services.encoding import Label
from ropscan.services.memory_image import MemoryImage
from ropscan.services.scanner import MIN_GADGETS, GadgetCache, InputSource, load_source, scan_input


def model_matches_image(model: CnnModel, image: MemoryImage) -> bool:
    if not model.snapshot_id or not image.snapshot_id:
        return True
    if model.snapshot_id != image.snapshot_id:
        logger.warning(
            "Model was trained on snapshot {} ({}) but the image is {} ({})",
            model.snapshot_id, model.program or "?", image.snapshot_id, image.program_name or "?",
        )
        return False
    return True


def detect_input(
    image: MemoryImage,
    model: CnnModel,
    data: bytes,
    source_id: str = "",
    cache: GadgetCache | None = None,
    min_gadgets: int = MIN_GADGETS,
) -> DetectionVerdict:
    """RopPayload iff at least one potential gadget chain is classified as real."""
    chains = scan_input(image, data, source_id, cache, min_gadgets)
    results = classify_many(model, [c.concat_bytes for c in chains])
    flagged = [
        FlaggedChain(start_offset=chain.start_offset, probability=result.p_real)
        for chain, result in zip(chains, results)
        if result.label == Label.REAL.name
    ]
    return DetectionVerdict(
        source_id=source_id,
        verdict=Verdict.ROP_PAYLOAD if flagged else Verdict.BENIGN,
        chains_found=len(chains),
        flagged_chains=flagged,
    )


def _detect_one(image, model, source_id, source, cache, min_gadgets):
    try:
        data = load_source(source)
    except OSError as e:
        logger.warning("Skipping {}: {}", source_id, e)
        return source_id, None, str(e)
    return source_id, detect_input(image, model, data, source_id, cache, min_gadgets), None


def detect_corpus(
    image: MemoryImage,
    model: CnnModel,
    inputs: Iterable[tuple[str, InputSource]],
    workers: int = 1,
    min_gadgets: int = MIN_GADGETS,
) -> tuple[list[DetectionVerdict], list[tuple[str, str]]]:
    """Verdicts in input order plus (source_id, error) for unreadable inputs."""
    model_matches_image(model, image)
    cache = GadgetCache(image)
    jobs = (delayed(_detect_one)(image, model, sid, src, cache, min_gadgets) for sid, src in inputs)
    verdicts, errors = [], []
    for source_id, verdict, error in Parallel(n_jobs=workers, prefer="threads")(jobs):
        if error is not None:
            errors.append((source_id, error))
        else:
            verdicts.append(verdict)
            if verdict.verdict is Verdict.ROP_PAYLOAD:
                logger.warning("ROP payload in {}: {} of {} chains flagged", source_id,
                               len(verdict.flagged_chains), verdict.chains_found)
    return verdicts, errors


def write_verdicts(path: str | Path, verdicts: list[DetectionVerdict]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for v in verdicts:
            flagged = ",".join(f"{f.start_offset}:{f.probability!r}" for f in v.flagged_chains)
            writer.writerow([v.source_id, v.verdict.value, v.chains_found, flagged])
