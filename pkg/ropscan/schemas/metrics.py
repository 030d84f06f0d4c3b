from pydantic import BaseModel


class Metrics(BaseModel):
    detection_rate: float
    false_positive_rate: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class FoldResult(BaseModel):
    name: str
    metrics: Metrics
    epochs: int = 0


class GridResult(BaseModel):
    index: int
    filters: tuple[int, int, int]
    kernels: tuple[int, int, int]
    dropout: float
    learning_rate: float
    accuracy: float = 0.0
    epochs_to_convergence: float = 0.0
    diverged: bool = False
    rank: int | None = None
