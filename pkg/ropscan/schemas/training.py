from itertools import product

from pydantic import BaseModel, field_validator


class ModelConfig(BaseModel):
    filters: tuple[int, int, int] = (64, 32, 16)
    kernels: tuple[int, int, int] = (7, 5, 3)

    @field_validator("filters")
    @classmethod
    def positive_filters(cls, v):
        if any(f < 1 for f in v):
            raise ValueError("filter counts must be positive")
        return v

    @field_validator("kernels")
    @classmethod
    def odd_kernels(cls, v):
        if any(k < 1 or k % 2 == 0 for k in v):
            raise ValueError("kernel sizes must be positive and odd")
        return v


class TrainConfig(BaseModel):
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 100
    penalizing_factor: float = 5.0
    dropout: float = 0.5
    seed: int = 0
    patience: int = 10
    validation_fraction: float = 0.1

    @field_validator("learning_rate")
    @classmethod
    def positive_lr(cls, v):
        if not v > 0:
            raise ValueError("learning_rate must be > 0")
        return v

    @field_validator("penalizing_factor")
    @classmethod
    def factor_at_least_one(cls, v):
        if v < 1:
            raise ValueError("penalizing_factor must be >= 1")
        return v

    @field_validator("momentum", "dropout", "validation_fraction")
    @classmethod
    def unit_interval(cls, v):
        if not 0 <= v < 1:
            raise ValueError("must lie in [0, 1)")
        return v

    @field_validator("batch_size", "patience")
    @classmethod
    def positive_count(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("max_epochs")
    @classmethod
    def non_negative_epochs(cls, v):
        if v < 0:
            raise ValueError("max_epochs must be >= 0")
        return v


class GridCell(BaseModel):
    index: int
    filters: tuple[int, int, int]
    kernels: tuple[int, int, int]
    dropout: float
    learning_rate: float


class GridSpec(BaseModel):
    filters: list[tuple[int, int, int]] = [(32, 16, 8), (48, 24, 12), (64, 32, 16), (96, 48, 24), (128, 64, 32)]
    kernels: list[tuple[int, int, int]] = [(3, 3, 3), (5, 3, 3), (5, 5, 3), (7, 5, 3), (9, 5, 3), (9, 7, 5)]
    dropout: list[float] = [0.2, 0.5, 0.8]
    learning_rate: list[float] = [1.0, 0.1, 0.01, 0.001]
    repeats: int = 3

    def cells(self) -> list[GridCell]:
        combos = product(self.filters, self.kernels, self.dropout, self.learning_rate)
        return [
            GridCell(index=i, filters=f, kernels=k, dropout=d, learning_rate=lr)
            for i, (f, k, d, lr) in enumerate(combos)
        ]
