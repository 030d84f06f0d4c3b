from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from ropscan.database import Base


def _now():
    return datetime.now(timezone.utc)


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)
    config_json = Column(Text)
    started_at = Column(DateTime(timezone=True), default=_now)
    finished_at = Column(DateTime(timezone=True), nullable=True)
    status = Column(String, default="running")
    exit_code = Column(Integer, nullable=True)

    verdicts = relationship("VerdictRecord", back_populates="run", cascade="all, delete-orphan")


class VerdictRecord(Base):
    __tablename__ = "verdicts"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    source_id = Column(String)
    verdict = Column(String)
    chains_found = Column(Integer)
    flagged_json = Column(Text, default="[]")

    run = relationship("RunRecord", back_populates="verdicts")
