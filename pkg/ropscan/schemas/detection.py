import enum

from pydantic import BaseModel


class Verdict(str, enum.Enum):
    BENIGN = "Benign"
    ROP_PAYLOAD = "RopPayload"


class Classification(BaseModel):
    label: str
    probability: float
    p_real: float


class FlaggedChain(BaseModel):
    start_offset: int
    probability: float


class DetectionVerdict(BaseModel):
    source_id: str
    verdict: Verdict
    chains_found: int
    flagged_chains: list[FlaggedChain] = []
