import numpy as np
import pytest

from ropscan.schemas import ModelConfig, TrainConfig
from ropscan.services.cnn import CnnModel
from ropscan.services.encoding import dataset_from_sequences
from ropscan.services.memory_image import build_image

CHAIN_POP_ESI_EDI = 0x0804C69A
CHAIN_POP_EAX = 0x080BCBEC
CHAIN_POP_ESI_EDI_EBP = 0x0804C51C

RICH_BASE = 0x08048000
RICH_SNIPPETS = [
    "58c3",          # pop eax; ret
    "5bc3",          # pop ebx; ret
    "59c3",          # pop ecx; ret
    "5ac3",          # pop edx; ret
    "5ec3",          # pop esi; ret
    "5fc3",          # pop edi; ret
    "40c3",          # inc eax; ret
    "01d8c3",        # add eax, ebx; ret
    "89c1c3",        # mov ecx, eax; ret
    "31c0c3",        # xor eax, eax; ret
    "90c3",          # nop; ret
    "c3",            # ret
    "585bc3",        # pop eax; pop ebx; ret
    "87d9c3",        # xchg ecx, ebx; ret
    "8d0419c3",      # lea eax, [ecx+ebx]; ret
    "c20800",        # ret 8
    "8b442404c3",    # mov eax, [esp+4]; ret
    "5e5f5dc3",      # pop esi; pop edi; pop ebp; ret
    "9090905859c3",  # nop; nop; nop; pop eax; pop ecx; ret
]


def _chain_segments():
    low = bytearray(b"\xf4" * (CHAIN_POP_ESI_EDI + 3 - CHAIN_POP_ESI_EDI_EBP))
    low[0:4] = bytes.fromhex("5e5f5dc3")
    low[CHAIN_POP_ESI_EDI - CHAIN_POP_ESI_EDI_EBP:] = bytes.fromhex("5e5fc3")
    return [(CHAIN_POP_ESI_EDI_EBP, bytes(low)), (CHAIN_POP_EAX, bytes.fromhex("58c3"))]


@pytest.fixture
def chain_image():
    return build_image(_chain_segments(), program_name="payload")


@pytest.fixture
def chain_payload():
    filler = b"\x41\x41\x41\x41"
    return (
        bytes.fromhex("94f06a45") + b"\x41" * 8
        + CHAIN_POP_ESI_EDI.to_bytes(4, "little") + filler + filler
        + CHAIN_POP_EAX.to_bytes(4, "little") + filler
        + CHAIN_POP_ESI_EDI_EBP.to_bytes(4, "little") + b"\x41" * 8
    )


def rich_layout() -> tuple[bytes, dict[str, int]]:
    """Snippets separated by hlt, plus the address of each snippet."""
    blob, addrs = bytearray(), {}
    for snippet in RICH_SNIPPETS:
        addrs[snippet] = RICH_BASE + len(blob)
        blob += bytes.fromhex(snippet) + b"\xf4"
    return bytes(blob), addrs


@pytest.fixture
def rich_image():
    blob, _ = rich_layout()
    return build_image([(RICH_BASE, blob)], program_name="rich")


@pytest.fixture
def rich_addrs():
    return rich_layout()[1]


def toy_sequences(n_per_class: int = 40, seed: int = 0) -> tuple[list[bytes], list[bytes]]:
    """Benign sequences are 0x00-0x3f noise, real ones are pop/ret-heavy; lengths 6-12."""
    rng = np.random.default_rng(seed)
    benign = [bytes(rng.integers(0x00, 0x40, rng.integers(6, 13)).astype(np.uint8)) for _ in range(n_per_class)]
    gadget_bytes = np.array([0x58, 0x59, 0x5A, 0x5B, 0x5E, 0x5F, 0xC3], dtype=np.uint8)
    real = [bytes(rng.choice(gadget_bytes, rng.integers(6, 13))) for _ in range(n_per_class)]
    return benign, real


def biased_model(real: bool, n_max: int = 16, snapshot_id: str = "") -> CnnModel:
    """A model whose output ignores the input: always real or always benign."""
    model = CnnModel(n_max, ModelConfig(filters=(2, 2, 2), kernels=(3, 3, 3)), TrainConfig(dropout=0.0),
                     snapshot_id=snapshot_id)
    dense = model.layers[-1]
    dense.params["W"][:] = 0.0
    dense.params["b"][:] = [0.0, 4.0] if real else [4.0, 0.0]
    return model


@pytest.fixture
def toy_dataset():
    benign, real = toy_sequences()
    return dataset_from_sequences(benign, real)


@pytest.fixture(autouse=True)
def isolated_ledger(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("ROPSCAN_DB_URL", f"sqlite:///{tmp_path_factory.mktemp('ledger') / 'ledger.db'}")
