import json
from datetime import datetime, timezone

from sqlalchemy.orm import Session

from ropscan.models import RunRecord, VerdictRecord
from ropscan.schemas import DetectionVerdict, RunConfig


def create_run(db: Session, run: RunConfig):
    db_run = RunRecord(command=run.command, config_json=run.model_dump_json())
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def finish_run(db: Session, run_id: int, exit_code: int):
    db_run = get_run(db, run_id)
    if not db_run:
        return None
    db_run.finished_at = datetime.now(timezone.utc)
    db_run.exit_code = exit_code
    db_run.status = "ok" if exit_code in (0, 3) else "failed"
    db.commit()
    db.refresh(db_run)
    return db_run


def get_run(db: Session, run_id: int):
    return db.query(RunRecord).filter(RunRecord.id == run_id).first()


def list_runs(db: Session, command: str | None = None, limit: int = 50):
    query = db.query(RunRecord)
    if command:
        query = query.filter(RunRecord.command == command)
    return query.order_by(RunRecord.id.desc()).limit(limit).all()


def record_verdict(db: Session, run_id: int, verdict: DetectionVerdict):
    db_verdict = VerdictRecord(
        run_id=run_id,
        source_id=verdict.source_id,
        verdict=verdict.verdict.value,
        chains_found=verdict.chains_found,
        flagged_json=json.dumps([f.model_dump() for f in verdict.flagged_chains]),
    )
    db.add(db_verdict)
    db.commit()
    db.refresh(db_verdict)
    return db_verdict


def get_verdicts(db: Session, run_id: int):
    return db.query(VerdictRecord).filter(VerdictRecord.run_id == run_id).order_by(VerdictRecord.id).all()
