import json

import numpy as np
import pytest
from typer.testing import CliRunner

from conftest import CHAIN_POP_EAX, CHAIN_POP_ESI_EDI, CHAIN_POP_ESI_EDI_EBP, RICH_SNIPPETS, biased_model
from ropscan.database import get_session
from ropscan.controllers import run_controller
from ropscan.main import app
from ropscan.services.chain_file import read_chains
from ropscan.services.cnn import save_model
from ropscan.services.memory_image import write_image

runner = CliRunner()

SMALL_NET = ["--filters", "4,4,2", "--kernels", "3,3,3", "--dropout", "0.2", "--validation-fraction", "0"]


@pytest.fixture
def chain_files(tmp_path, chain_image, chain_payload):
    image = tmp_path / "chain.rmim"
    write_image(chain_image, image)
    payload = tmp_path / "payload.bin"
    payload.write_bytes(chain_payload)
    return image, payload


@pytest.fixture
def rich_files(tmp_path, rich_image, rich_addrs):
    image = tmp_path / "rich.rmim"
    write_image(rich_image, image)
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rng = np.random.default_rng(0)
    for i in range(24):
        data = bytearray(rng.integers(0, 0x40, 96).astype(np.uint8).tobytes())
        picks = rng.choice(RICH_SNIPPETS, int(rng.integers(2, 4)))
        for k, snippet in enumerate(picks):
            data[16 + 4 * k:20 + 4 * k] = rich_addrs[snippet].to_bytes(4, "little")
        (corpus / f"blob{i:02d}.bin").write_bytes(bytes(data))
    return image, corpus


def invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def test_image_build_and_info(tmp_path):
    low, high = tmp_path / "low.bin", tmp_path / "high.bin"
    low.write_bytes(bytes.fromhex("5e5f5dc3"))
    high.write_bytes(bytes.fromhex("58c3"))
    out = tmp_path / "built.rmim"
    result = invoke("image", "build", "--out", out, "--segment", f"0x080bcbec:{high}", "--segment", f"0x0804c51c:{low}")
    assert result.exit_code == 0, result.output
    info = invoke("image", "info", out)
    assert info.exit_code == 0, info.output
    assert "0x0804c51c" in info.stdout
    assert "total\t6" in info.stdout


def test_image_build_bad_segment(tmp_path):
    result = invoke("image", "build", "--out", tmp_path / "x.rmim", "--segment", "nothing")
    assert result.exit_code == 2


def test_disasm_gadget(chain_files):
    image, _ = chain_files
    result = invoke("disasm", "--image", image, "--addr", "0x0804c69a", "--gadget")
    assert result.exit_code == 0, result.output
    assert result.stdout.splitlines() == [
        "0x0804c69a\t5e\tpop esi",
        "0x0804c69b\t5f\tpop edi",
        "0x0804c69c\tc3\tret",
    ]


def test_scan_chain_payload(chain_files, tmp_path):
    image, payload = chain_files
    out = tmp_path / "chains.tsv"
    result = invoke("scan", "--image", image, "--in", payload, "--out", out)
    assert result.exit_code == 0, result.output
    (record,) = read_chains(out)
    assert record.addresses == (CHAIN_POP_ESI_EDI, CHAIN_POP_EAX, CHAIN_POP_ESI_EDI_EBP)
    assert record.start_offset == 12


def test_config_file_sets_defaults(chain_files, tmp_path):
    image, payload = chain_files
    config = tmp_path / "ropscan.yaml"
    config.write_text("scan:\n  min-gadgets: 4\n")
    out = tmp_path / "chains.tsv"
    assert invoke("--config", config, "scan", "--image", image, "--in", payload, "--out", out).exit_code == 0
    assert read_chains(out) == []
    assert invoke("--config", config, "scan", "--image", image, "--in", payload, "--out", out,
                  "--min-gadgets", "3").exit_code == 0
    assert len(read_chains(out)) == 1


def test_bad_config_file_is_usage_error(chain_files, tmp_path):
    image, payload = chain_files
    config = tmp_path / "bad.yaml"
    config.write_text("- just\n- a list\n")
    result = invoke("--config", config, "scan", "--image", image, "--in", payload, "--out", tmp_path / "c.tsv")
    assert result.exit_code == 2


def test_run_log(chain_files, tmp_path):
    image, payload = chain_files
    log = tmp_path / "run.json"
    result = invoke("--run-log", log, "scan", "--image", image, "--in", payload, "--out", tmp_path / "c.tsv",
                    "--workers", "2")
    assert result.exit_code == 0, result.output
    record = json.loads(log.read_text())
    assert record["config"]["command"] == "scan"
    assert record["config"]["workers"] == 2
    assert set(record["versions"]) == {"python", "numpy", "ropscan"}


def test_missing_path_is_usage_error(tmp_path):
    result = invoke("scan", "--image", tmp_path / "nope.rmim", "--in", tmp_path, "--out", tmp_path / "c.tsv")
    assert result.exit_code == 2


def test_corrupt_image_is_internal_error(tmp_path):
    bad = tmp_path / "bad.rmim"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    result = invoke("scan", "--image", bad, "--in", bad, "--out", tmp_path / "c.tsv")
    assert result.exit_code == 4
    with get_session() as db:
        (run,) = run_controller.list_runs(db)
        assert run.status == "failed"
        assert run.exit_code == 4


def test_gen_train_eval(rich_files, tmp_path):
    image, corpus = rich_files
    benign, real, model = tmp_path / "benign.tsv", tmp_path / "real.tsv", tmp_path / "model.ropnn"
    assert invoke("scan", "--image", image, "--in", corpus, "--out", benign).exit_code == 0
    n_benign = len(read_chains(benign))
    assert n_benign >= 20

    result = invoke("gen", "--image", image, "--match", benign, "--out", real, "--seed", 3, "--validate")
    assert result.exit_code == 0, result.output
    assert len(read_chains(real)) == n_benign
    assert f"validated {n_benign}/{n_benign}" in result.stdout

    result = invoke("train", "--benign", benign, "--real", real, "--out", model, "--image", image,
                    "--epochs", 2, *SMALL_NET)
    assert result.exit_code == 0, result.output
    assert model.read_text().startswith("ROPNN-MODEL v1\n")

    result = invoke("train", "--benign", benign, "--real", real, "--out", model, "--resume", model, "--epochs", 1)
    assert result.exit_code == 0, result.output
    assert "epochs_trained=3" in model.read_text().splitlines()[1]

    report = tmp_path / "eval.tsv"
    result = invoke("eval", "--benign", benign, "--real", real, "--out", report, "--folds", 2,
                    "--factors", "1,100", "--epochs", 2, *SMALL_NET)
    assert result.exit_code == 0, result.output
    names = [line.split("\t")[0] for line in report.read_text().splitlines()[1:]]
    assert names == ["holdout", "fold1", "fold2", "factor=1.0", "factor=100.0"]
    summary = json.loads(report.with_suffix(".json").read_text())
    assert {"holdout", "cv", "factors", "best"} <= set(summary)


def test_invalid_hyperparameter_is_usage_error(tmp_path):
    f = tmp_path / "c.tsv"
    f.write_text("a\t0\t0x1000\tc3\n")
    result = invoke("train", "--benign", f, "--real", f, "--out", tmp_path / "m", "--kernels", "4,3,3")
    assert result.exit_code == 2
    result = invoke("train", "--benign", f, "--real", f, "--out", tmp_path / "m", "--factor", "0.5")
    assert result.exit_code == 2


@pytest.mark.parametrize("fraction", ["0", "0.0", "-0.1"])
def test_zero_train_fraction_is_usage_error(tmp_path, fraction):
    f = tmp_path / "c.tsv"
    f.write_text("a\t0\t0x1000\tc3\n")
    result = invoke("eval", "--benign", f, "--real", f, "--out", tmp_path / "r.tsv", "--train-fraction", fraction)
    assert result.exit_code == 2
    result = invoke("pipeline", "--image", f, "--corpus", tmp_path, "--out-dir", tmp_path / "o",
                    "--train-fraction", fraction)
    assert result.exit_code == 2


def test_detect_exit_codes_and_ledger(chain_files, tmp_path):
    image, payload = chain_files
    flagged, clean = tmp_path / "real.ropnn", tmp_path / "benign.ropnn"
    save_model(biased_model(True), flagged)
    save_model(biased_model(False), clean)
    verdicts = tmp_path / "verdicts.tsv"

    result = invoke("detect", "--image", image, "--model", flagged, "--in", payload, "--out", verdicts)
    assert result.exit_code == 3, result.output
    assert verdicts.read_text().startswith("payload.bin\tRopPayload\t1\t12:")

    result = invoke("detect", "--image", image, "--model", clean, "--in", payload)
    assert result.exit_code == 0, result.output

    with get_session() as db:
        runs = run_controller.list_runs(db, command="detect")
        assert [r.exit_code for r in runs] == [0, 3]
        assert all(r.status == "ok" for r in runs)
        (stored,) = run_controller.get_verdicts(db, runs[1].id)
        assert stored.verdict == "RopPayload"
        assert json.loads(stored.flagged_json)[0]["start_offset"] == 12

    listing = invoke("runs", "list")
    assert listing.exit_code == 0
    assert "detect" in listing.stdout


def test_ledger_can_be_disabled(chain_files, tmp_path, monkeypatch):
    monkeypatch.setenv("ROPSCAN_LEDGER", "0")
    image, payload = chain_files
    assert invoke("scan", "--image", image, "--in", payload, "--out", tmp_path / "c.tsv").exit_code == 0
    with get_session() as db:
        assert run_controller.list_runs(db) == []


def test_bench(rich_files, tmp_path):
    image, corpus = rich_files
    model = tmp_path / "m.ropnn"
    save_model(biased_model(True, n_max=32), model)
    result = invoke("bench", "--image", image, "--corpus", corpus, "--model", model, "--out", tmp_path / "b.json")
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "b.json").read_text())
    assert report["runs"] == 3
    assert report["scanned_bytes"] == 24 * 96
    assert report["chains"] >= 20
    assert "chains_per_second" in report
    assert invoke("bench", "--image", image, "--corpus", corpus, "--runs", 2).exit_code == 2


def test_pipeline_is_deterministic(rich_files, tmp_path):
    image, corpus = rich_files
    outputs = []
    for name in ("one", "two"):
        out_dir = tmp_path / name
        result = invoke("pipeline", "--image", image, "--corpus", corpus, "--out-dir", out_dir, "--seed", 5,
                        "--folds", 2, "--epochs", 2, *SMALL_NET)
        assert result.exit_code == 0, result.output
        assert {p.name for p in out_dir.iterdir()} == {
            "run.json", "benign.tsv", "real.tsv", "model.ropnn", "eval.tsv", "summary.json",
        }
        outputs.append(out_dir)
    for artifact in ("benign.tsv", "real.tsv", "model.ropnn", "eval.tsv", "summary.json"):
        assert (outputs[0] / artifact).read_bytes() == (outputs[1] / artifact).read_bytes(), artifact


def test_pipeline_missing_image(tmp_path):
    result = invoke("pipeline", "--image", tmp_path / "missing.rmim", "--corpus", tmp_path, "--out-dir", tmp_path / "o")
    assert result.exit_code == 2
    assert not (tmp_path / "o").exists()


def test_pipeline_stage_failure_keeps_partial_artifacts(rich_files, tmp_path):
    image, _ = rich_files
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "zeros.bin").write_bytes(b"\x00" * 64)
    out_dir = tmp_path / "out"
    result = invoke("pipeline", "--image", image, "--corpus", empty, "--out-dir", out_dir)
    assert result.exit_code == 4
    assert (out_dir / "run.json").exists()
    assert "scan" in result.output
