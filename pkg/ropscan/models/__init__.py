from .run import RunRecord, VerdictRecord

__all__ = ["RunRecord", "VerdictRecord"]
