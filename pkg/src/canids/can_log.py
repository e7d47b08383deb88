"""HCRL-style CAN log parsing and 29-bit identifier encoding.

One message per line::

    1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R

timestamp, hex arbitration ID, DLC, DLC data bytes, label (``R`` normal,
``T`` injected). Attack-free captures may drop the label column.
"""

from __future__ import annotations

import enum
import io
import logging
import os
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

ID_BITS = 29
MAX_CAN_ID = (1 << ID_BITS) - 1
MAX_DLC = 8


class CanLogError(ValueError):
    """Raised for lines that violate the CAN frame limits or, in strict mode, any malformed line."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class Flag(enum.IntEnum):
    NORMAL = 0
    INJECTED = 1


_LABELS = {"R": Flag.NORMAL, "T": Flag.INJECTED}
_LABEL_TOKENS = {Flag.NORMAL: "R", Flag.INJECTED: "T"}


@dataclass(frozen=True, slots=True)
class CanRecord:
    timestamp: float
    can_id: int
    dlc: int
    data: bytes
    flag: Flag = Flag.NORMAL

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_CAN_ID:
            raise CanLogError(f"CAN ID {self.can_id:#x} exceeds 29 bits")
        if not 0 <= self.dlc <= MAX_DLC:
            raise CanLogError(f"DLC {self.dlc} out of range [0, 8]")
        if len(self.data) != self.dlc:
            raise CanLogError(f"payload has {len(self.data)} bytes, DLC says {self.dlc}")
        if self.timestamp < 0:
            raise CanLogError("negative timestamp")

    @property
    def injected(self) -> bool:
        return self.flag is Flag.INJECTED


@dataclass
class ParseStats:
    total: int = 0
    normal: int = 0
    injected: int = 0
    skipped: int = 0

    def __str__(self):
        return (f"total={self.total} normal={self.normal} "
                f"injected={self.injected} skipped={self.skipped}")


class _Malformed(Exception):
    pass


def _hex_byte(token: str) -> int:
    if not 1 <= len(token) <= 2:
        raise _Malformed(f"bad data byte {token!r}")
    try:
        return int(token, 16)
    except ValueError:
        raise _Malformed(f"bad data byte {token!r}") from None


def parse_line(line: str, line_no: int | None = None) -> CanRecord:
    """Parse one CSV line into a record.

    Raises ``_Malformed`` for unparseable text and :class:`CanLogError`
    for out-of-range IDs or DLCs.
    """
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) < 3:
        raise _Malformed("too few columns")
    try:
        timestamp = float(fields[0])
        can_id = int(fields[1], 16)
        dlc = int(fields[2])
    except ValueError as exc:
        raise _Malformed(str(exc)) from None
    if can_id > MAX_CAN_ID:
        raise CanLogError(f"CAN ID {fields[1]} exceeds 29 bits", line_no)
    if dlc < 0 or dlc > MAX_DLC:
        raise CanLogError(f"DLC {dlc} out of range [0, 8]", line_no)

    rest = fields[3:]
    flag = Flag.NORMAL
    if rest and rest[-1].upper() in _LABELS:
        flag = _LABELS[rest[-1].upper()]
        rest = rest[:-1]
    # Column-count-driven: exactly dlc byte columns, or padded out to 8.
    if len(rest) == dlc:
        payload = rest
    elif len(rest) == MAX_DLC and dlc < MAX_DLC:
        payload = rest[:dlc]
        for tok in rest[dlc:]:
            _hex_byte(tok)
    else:
        raise _Malformed(f"{len(rest)} data columns for DLC {dlc}")
    data = bytes(_hex_byte(t) for t in payload)
    if timestamp < 0:
        raise _Malformed("negative timestamp")
    return CanRecord(timestamp, can_id, dlc, data, flag)


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            yield from _iter_lines(fh)
        return
    for raw in source:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        yield raw.rstrip("\r\n")


def iter_hcrl_csv(source, strict: bool = False, stats: ParseStats | None = None) -> Iterator[CanRecord]:
    """Lazily parse ``source`` (path, binary/text stream, or iterable of lines)."""
    stats = stats if stats is not None else ParseStats()
    for line_no, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        stats.total += 1
        try:
            rec = parse_line(line, line_no)
        except _Malformed as exc:
            if strict:
                raise CanLogError(f"malformed line: {exc}", line_no) from None
            stats.skipped += 1
            log.warning("skipping line %d: %s", line_no, exc)
            continue
        if rec.injected:
            stats.injected += 1
        else:
            stats.normal += 1
        yield rec


def parse_hcrl_csv(source, strict: bool = False) -> tuple[list[CanRecord], ParseStats]:
    """Parse a whole capture; returns records in file order plus counters.

    Malformed lines are skipped and counted unless ``strict`` is set, in which
    case the first one aborts with its line number. IDs over 29 bits and DLCs
    over 8 always raise :class:`CanLogError`.
    """
    stats = ParseStats()
    records = list(iter_hcrl_csv(source, strict=strict, stats=stats))
    return records, stats


def format_record(rec: CanRecord, with_label: bool = True) -> str:
    id_width = 4 if rec.can_id <= 0xFFFF else 8
    parts = [f"{rec.timestamp:.6f}", f"{rec.can_id:0{id_width}x}", str(rec.dlc)]
    parts.extend(f"{b:02x}" for b in rec.data)
    if with_label:
        parts.append(_LABEL_TOKENS[rec.flag])
    return ",".join(parts)


def write_hcrl_csv(records: Iterable[CanRecord], sink: Union[str, os.PathLike, IO[str]],
                   with_label: bool = True) -> int:
    """Write records in the HCRL CSV layout (LF line endings). Returns line count."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            return write_hcrl_csv(records, fh, with_label)
    n = 0
    for rec in records:
        sink.write(format_record(rec, with_label))
        sink.write("\n")
        n += 1
    return n


def dumps_hcrl_csv(records: Iterable[CanRecord], with_label: bool = True) -> str:
    buf = io.StringIO()
    write_hcrl_csv(records, buf, with_label)
    return buf.getvalue()


def encode_id_29bit(can_id: int) -> np.ndarray:
    """MSB-first 29-bit expansion of an arbitration ID (11-bit IDs are left-zero-padded)."""
    can_id = int(can_id)
    if not 0 <= can_id <= MAX_CAN_ID:
        raise CanLogError(f"CAN ID {can_id:#x} outside [0, 2^29)")
    return encode_ids(np.array([can_id]))[0]


def encode_ids(can_ids: Sequence[int] | np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode_id_29bit`; returns uint8 array of shape (n, 29)."""
    ids = np.asarray(can_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > MAX_CAN_ID):
        raise CanLogError("CAN ID outside [0, 2^29)")
    shifts = np.arange(ID_BITS - 1, -1, -1, dtype=np.int64)
    return ((ids[:, None] >> shifts) & 1).astype(np.uint8)


def decode_id_29bit(bits: Sequence[int] | np.ndarray) -> int:
    bits = np.asarray(bits)
    if bits.shape != (ID_BITS,) or not np.isin(bits, (0, 1)).all():
        raise CanLogError("expected 29 binary values")
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def records_to_arrays(records: Sequence[CanRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column view (timestamps, ids, injected flags) of a record sequence."""
    n = len(records)
    ts = np.fromiter((r.timestamp for r in records), dtype=np.float64, count=n)
    ids = np.fromiter((r.can_id for r in records), dtype=np.int64, count=n)
    flags = np.fromiter((r.flag for r in records), dtype=np.uint8, count=n)
    return ts, ids, flags
