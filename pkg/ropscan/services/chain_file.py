"""chains.tsv: one chain per line.

    source_id <TAB> start_offset <TAB> addr,addr,... <TAB> concat_bytes_hex
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

GENERATED_SOURCE = "gen"


class ChainFileError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class ChainRecord:
    source_id: str
    start_offset: int
    addresses: tuple[int, ...]
    concat_bytes: bytes

    @property
    def byte_len(self) -> int:
        return len(self.concat_bytes)


def to_record(chain, index: int = 0) -> ChainRecord:
    """Scanner chains keep their origin; generated chains are numbered under source `gen`."""
    if isinstance(chain, ChainRecord):
        return chain
    source_id = getattr(chain, "source_id", None)
    if source_id is None:
        return ChainRecord(GENERATED_SOURCE, index, tuple(chain.addresses), chain.concat_bytes)
    return ChainRecord(source_id, chain.start_offset, tuple(chain.addresses), chain.concat_bytes)


def format_record(record: ChainRecord) -> str:
    if "\t" in record.source_id or "\n" in record.source_id:
        raise ValueError(f"source id {record.source_id!r} contains a tab or newline")
    addrs = ",".join(f"{a:#010x}" for a in record.addresses)
    return f"{record.source_id}\t{record.start_offset}\t{addrs}\t{record.concat_bytes.hex()}"


def parse_record(line: str, path="<chains>", line_no: int = 0) -> ChainRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 4:
        raise ChainFileError(path, line_no, f"expected 4 tab-separated fields, got {len(fields)}")
    source_id, offset, addrs, hexbytes = fields
    try:
        start_offset = int(offset)
        addresses = tuple(int(a, 16) for a in addrs.split(",")) if addrs else ()
        concat = bytes.fromhex(hexbytes)
    except ValueError as e:
        raise ChainFileError(path, line_no, str(e)) from e
    if start_offset < 0:
        raise ChainFileError(path, line_no, "negative start offset")
    if not concat:
        raise ChainFileError(path, line_no, "empty chain bytes")
    if any(not 0 <= a < 1 << 32 for a in addresses):
        raise ChainFileError(path, line_no, "address outside 32 bits")
    return ChainRecord(source_id, start_offset, addresses, concat)


def read_chains(path: str | Path) -> list[ChainRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(parse_record(line, path, line_no))
    return records


def write_chains(path: str | Path, chains: Iterable) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for i, chain in enumerate(chains):
            fh.write(format_record(to_record(chain, i)) + "\n")
            count += 1
    return count
