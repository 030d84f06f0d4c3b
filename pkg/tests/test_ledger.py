import json

from ropscan.controllers import run_controller
from ropscan.database import get_session
from ropscan.schemas import DetectionVerdict, FlaggedChain, RunConfig, Verdict


def test_run_lifecycle():
    with get_session() as db:
        run = run_controller.create_run(db, RunConfig(command="scan", seed=3, paths={"in": "corpus"}))
        assert run.status == "running"
        assert run.finished_at is None
        assert json.loads(run.config_json)["paths"] == {"in": "corpus"}

        done = run_controller.finish_run(db, run.id, 0)
        assert done.status == "ok"
        assert done.exit_code == 0
        assert done.finished_at is not None


def test_detection_exit_code_counts_as_ok():
    with get_session() as db:
        run = run_controller.create_run(db, RunConfig(command="detect"))
        assert run_controller.finish_run(db, run.id, 3).status == "ok"
        other = run_controller.create_run(db, RunConfig(command="detect"))
        assert run_controller.finish_run(db, other.id, 4).status == "failed"


def test_finish_unknown_run():
    with get_session() as db:
        assert run_controller.finish_run(db, 12345, 0) is None
        assert run_controller.get_run(db, 12345) is None


def test_list_runs_filters_and_orders():
    with get_session() as db:
        ids = [run_controller.create_run(db, RunConfig(command=c)).id for c in ("scan", "gen", "scan")]
        assert [r.id for r in run_controller.list_runs(db)] == ids[::-1]
        assert [r.id for r in run_controller.list_runs(db, command="scan")] == [ids[2], ids[0]]
        assert len(run_controller.list_runs(db, limit=1)) == 1


def test_verdicts_round_trip():
    verdicts = [
        DetectionVerdict(source_id="a.bin", verdict=Verdict.BENIGN, chains_found=0),
        DetectionVerdict(
            source_id="b.bin",
            verdict=Verdict.ROP_PAYLOAD,
            chains_found=2,
            flagged_chains=[FlaggedChain(start_offset=12, probability=0.9)],
        ),
    ]
    with get_session() as db:
        run = run_controller.create_run(db, RunConfig(command="detect"))
        for v in verdicts:
            run_controller.record_verdict(db, run.id, v)
        stored = run_controller.get_verdicts(db, run.id)
        assert [s.source_id for s in stored] == ["a.bin", "b.bin"]
        assert [s.verdict for s in stored] == ["Benign", "RopPayload"]
        assert json.loads(stored[0].flagged_json) == []
        assert json.loads(stored[1].flagged_json) == [{"start_offset": 12, "probability": 0.9}]
        assert run_controller.get_run(db, run.id).verdicts[1].chains_found == 2
