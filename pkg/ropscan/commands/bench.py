import json
import time
from pathlib import Path

import numpy as np
import typer

from ropscan.commands.common import WORKERS_OPTION, tracked_run
from ropscan.services.cnn import classify_many, load_model
from ropscan.services.memory_image import load_image
from ropscan.services.scanner import GadgetCache, iter_inputs, scan_corpus


def bench(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    corpus: Path = typer.Option(..., "--corpus", exists=True, help="Input file or directory"),
    model_path: Path | None = typer.Option(None, "--model", exists=True, dir_okay=False,
                                           help="Also time classification of the chains found"),
    runs: int = typer.Option(3, "--runs", min=3, help="Timed repetitions; the median is reported"),
    workers: int = WORKERS_OPTION,
    out: Path | None = typer.Option(None, "--out", help="JSON report (default: stdout only)"),
):
    """Scan (and classify) throughput; measurement only."""
    with tracked_run("bench", workers=workers,
                     paths={"image": image_path, "corpus": corpus, "model": model_path, "out": out}, runs=runs):
        image = load_image(image_path)
        model = load_model(model_path) if model_path else None
        scan_times, classify_times = [], []
        for _ in range(runs):
            # fresh cache per run so every run disassembles from scratch
            start = time.perf_counter()
            result = scan_corpus(image, iter_inputs(corpus), workers, GadgetCache(image))
            scan_times.append(time.perf_counter() - start)
            if model is not None:
                start = time.perf_counter()
                classify_many(model, [c.concat_bytes for c in result.chains])
                classify_times.append(time.perf_counter() - start)
        if result.bytes_scanned == 0:
            raise typer.BadParameter(f"{corpus} holds no input bytes", param_hint="--corpus")

        scan_seconds = float(np.median(scan_times))
        report = {
            "runs": runs,
            "scanned_bytes": result.bytes_scanned,
            "median_scan_seconds": scan_seconds,
            "bytes_per_second": result.bytes_scanned / scan_seconds if scan_seconds else None,
            "chains": len(result.chains),
        }
        if model is not None:
            classify_seconds = float(np.median(classify_times))
            report["median_classify_seconds"] = classify_seconds
            report["chains_per_second"] = len(result.chains) / classify_seconds if classify_seconds else None
        text = json.dumps(report, indent=2, sort_keys=True)
        if out is not None:
            out.write_text(text + "\n", encoding="utf-8")
        typer.echo(text)
