"""One-hot byte encoding and the labelled dataset container.

Samples are kept as uint8 byte codes padded with 0x90 to a shared n_max; the
(n_max, 256) one-hot matrices are only materialised per batch.
"""
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from loguru import logger

from ropscan.services.chain_file import read_chains

PAD_BYTE = 0x90
N_SYMBOLS = 256


class Label(enum.IntEnum):
    BENIGN = 0
    REAL = 1


class EmptySequenceError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def bytes_to_onehot(data: bytes) -> np.ndarray:
    """One row per byte with a single 1 at the byte value."""
    if not data:
        raise EmptySequenceError("cannot encode an empty byte sequence")
    codes = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.zeros((len(codes), N_SYMBOLS), dtype=np.float64)
    out[np.arange(len(codes)), codes] = 1.0
    return out


def onehot_codes(codes: np.ndarray) -> np.ndarray:
    """(..., n) uint8 codes -> (..., n, 256) float64 one-hot."""
    return np.eye(N_SYMBOLS, dtype=np.float64)[codes]


def pad_codes(data: bytes, n_max: int) -> tuple[np.ndarray, int]:
    """Pad with 0x90 (or truncate) to n_max; returns (codes, kept length)."""
    if not data:
        raise EmptySequenceError("cannot encode an empty byte sequence")
    if len(data) > n_max:
        logger.warning("Chain of {} bytes truncated to n_max={}", len(data), n_max)
        data = data[:n_max]
    codes = np.full(n_max, PAD_BYTE, dtype=np.uint8)
    codes[:len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)
    return codes, len(data)


def unpad(codes: np.ndarray, true_len: int) -> bytes:
    return bytes(np.asarray(codes, dtype=np.uint8)[:true_len])


@dataclass(frozen=True)
class EncodedSample:
    codes: np.ndarray
    true_len: int
    label: Label

    @property
    def matrix(self) -> np.ndarray:
        return onehot_codes(self.codes)

    @property
    def raw(self) -> bytes:
        return unpad(self.codes, self.true_len)


class Dataset:
    def __init__(self, codes: np.ndarray, true_lens: np.ndarray, labels: np.ndarray, n_max: int):
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim != 2 or codes.shape[1] != n_max:
            raise DatasetError(f"codes must have shape (N, {n_max}), got {codes.shape}")
        if not len(codes) == len(true_lens) == len(labels):
            raise DatasetError("codes, lengths and labels disagree in size")
        self.codes = codes
        self.true_lens = np.asarray(true_lens, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.n_max = int(n_max)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> EncodedSample:
        return EncodedSample(self.codes[i], int(self.true_lens[i]), Label(int(self.labels[i])))

    @property
    def samples(self) -> list[EncodedSample]:
        return [self[i] for i in range(len(self))]

    @property
    def class_counts(self) -> dict[Label, int]:
        return {label: int((self.labels == label).sum()) for label in Label}

    def onehot(self, indices=None) -> np.ndarray:
        codes = self.codes if indices is None else self.codes[indices]
        return onehot_codes(codes)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.codes[indices], self.true_lens[indices], self.labels[indices], self.n_max)

    def sequences(self) -> list[bytes]:
        return [unpad(c, n) for c, n in zip(self.codes, self.true_lens)]


def dataset_from_sequences(benign: Sequence[bytes], real: Sequence[bytes], n_max: int | None = None) -> Dataset:
    """Label by origin, pad every sequence to the longest one (or to a given n_max)."""
    seqs = list(benign) + list(real)
    if not seqs:
        raise DatasetError("dataset is empty")
    if any(len(s) == 0 for s in seqs):
        raise EmptySequenceError("dataset contains an empty chain")
    n_max = n_max or max(len(s) for s in seqs)
    codes = np.empty((len(seqs), n_max), dtype=np.uint8)
    true_lens = np.empty(len(seqs), dtype=np.int64)
    for i, seq in enumerate(seqs):
        codes[i], true_lens[i] = pad_codes(seq, n_max)
    labels = np.array([Label.BENIGN] * len(benign) + [Label.REAL] * len(real), dtype=np.int64)
    dataset = Dataset(codes, true_lens, labels, n_max)
    logger.debug("Dataset: {} samples, n_max={}, counts={}", len(dataset), n_max, dataset.class_counts)
    return dataset


def build_dataset(benign: str | Path, real: str | Path) -> Dataset:
    benign_chains = [r.concat_bytes for r in read_chains(benign)]
    real_chains = [r.concat_bytes for r in read_chains(real)]
    return dataset_from_sequences(benign_chains, real_chains)
