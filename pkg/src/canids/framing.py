"""Sliding-window framing of CAN ID streams into 29x29 binary matrices."""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .can_log import ID_BITS, CanRecord, encode_ids, records_to_arrays

log = logging.getLogger(__name__)

WINDOW = 29
FRAME_BITS = WINDOW * ID_BITS
PACKED_BYTES = (FRAME_BITS + 7) // 8  # 106

DEFAULT_SOURCE_STRIDE = 15
DEFAULT_TARGET_STRIDE = 10

MAGIC = b"CANF"
FORMAT_VERSION = 1


class FrameFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names or self.names[0] != "normal":
            raise ValueError("index 0 of a label space must be 'normal'")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, idx: int) -> str:
        return self.names[idx]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; expected one of {self.names}") from None


SOURCE_LABELS = LabelSpace(("normal", "DoS", "fuzzy", "gear", "RPM"))
TARGET_LABELS = LabelSpace(("normal", "DoS", "fuzzy", "malfunction"))


@dataclass(frozen=True)
class Frame:
    matrix: np.ndarray  # (29, 29) uint8
    label: int


@dataclass
class FrameSet:
    """Frames sharing one label space; ``matrices`` is (n, 29, 29) uint8."""

    matrices: np.ndarray
    labels: np.ndarray
    label_space: LabelSpace
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.uint8).reshape(-1, WINDOW, ID_BITS)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.matrices) != len(self.labels):
            raise ValueError("matrices and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_space)):
            raise ValueError("label outside label space")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx: int) -> Frame:
        return Frame(self.matrices[idx], int(self.labels[idx]))

    def subset(self, indices) -> "FrameSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FrameSet(self.matrices[indices], self.labels[indices], self.label_space,
                        dict(self.provenance))

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.label_space))
        return {name: int(c) for name, c in zip(self.label_space, counts)}

    @classmethod
    def empty(cls, label_space: LabelSpace, **provenance) -> "FrameSet":
        return cls(np.zeros((0, WINDOW, ID_BITS), np.uint8), np.zeros(0, np.int64), label_space,
                   provenance)

    @classmethod
    def concat(cls, sets: Sequence["FrameSet"]) -> "FrameSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        space = sets[0].label_space
        if any(s.label_space != space for s in sets):
            raise ValueError("frame sets use different label spaces")
        sources: list[str] = []
        for s in sets:
            sources.extend(s.provenance.get("sources", []))
        prov = {"sources": sources, "window": WINDOW}
        strides = {s.provenance.get("stride") for s in sets} - {None}
        if len(strides) == 1:
            prov["stride"] = strides.pop()
        return cls(np.concatenate([s.matrices for s in sets]),
                   np.concatenate([s.labels for s in sets]), space, prov)


def frame_count(n_messages: int, stride: int) -> int:
    if n_messages < WINDOW:
        return 0
    return (n_messages - WINDOW) // stride + 1


def label_window(flags: Iterable, attack_class: int) -> int:
    """0 if no message in the window was injected, else ``attack_class``."""
    return attack_class if any(int(f) for f in flags) else 0


def build_frames(records: Sequence[CanRecord], stride: int, attack_class: int,
                 label_space: LabelSpace, source: str = "") -> FrameSet:
    """Cut one capture into windows of 29 IDs spaced ``stride`` messages apart.

    Window ``i`` covers records ``[i*stride, i*stride + 29)``. A window is
    labelled ``attack_class`` if it holds at least one injected record.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if not 0 <= attack_class < len(label_space):
        raise ValueError(f"attack class {attack_class} outside label space")
    prov = {"sources": [source] if source else [], "stride": stride, "window": WINDOW}
    n = frame_count(len(records), stride)
    if n == 0:
        log.warning("%s: %d records is fewer than one window of %d; no frames",
                    source or "capture", len(records), WINDOW)
        return FrameSet.empty(label_space, **prov)
    _, ids, flags = records_to_arrays(records)
    return frames_from_arrays(ids, flags, stride, attack_class, label_space, prov)


def frames_from_arrays(ids: np.ndarray, flags: np.ndarray, stride: int, attack_class: int,
                       label_space: LabelSpace, provenance: dict | None = None) -> FrameSet:
    n = frame_count(len(ids), stride)
    bits = encode_ids(ids)
    idx = (np.arange(n) * stride)[:, None] + np.arange(WINDOW)
    matrices = bits[idx]
    labels = np.where(np.asarray(flags)[idx].any(axis=1), attack_class, 0)
    return FrameSet(matrices, labels, label_space, provenance or {})


def split_train_test(frames: FrameSet, train_fraction: float = 0.7,
                     seed: int = 0) -> tuple[FrameSet, FrameSet]:
    """Shuffled frame-level split; ``round(train_fraction * N)`` frames go to train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(frames) == 0:
        raise ValueError("cannot split an empty frame set")
    perm = np.random.default_rng(seed).permutation(len(frames))
    n_train = int(np.floor(train_fraction * len(frames) + 0.5))
    return frames.subset(np.sort(perm[:n_train])), frames.subset(np.sort(perm[n_train:]))


# -- container I/O ------------------------------------------------------------

_RECORD = np.dtype([("label", "<u2"), ("bits", "u1", (PACKED_BYTES,))])


def pack_frames(frames: FrameSet, sink: BinaryIO | str | os.PathLike) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            return pack_frames(frames, fh)
    sink.write(MAGIC)
    sink.write(struct.pack("<HHH", FORMAT_VERSION, WINDOW, len(frames.label_space)))
    for name in frames.label_space:
        raw = name.encode("utf-8")
        sink.write(struct.pack("<H", len(raw)))
        sink.write(raw)
    sink.write(struct.pack("<Q", len(frames)))
    body = np.empty(len(frames), dtype=_RECORD)
    body["label"] = frames.labels
    body["bits"] = np.packbits(frames.matrices.reshape(len(frames), FRAME_BITS), axis=1)
    sink.write(body.tobytes())


def _read_exact(src: BinaryIO, n: int) -> bytes:
    buf = src.read(n)
    if len(buf) != n:
        raise FrameFormatError("truncated frame container")
    return buf


def unpack_frames(source: BinaryIO | str | os.PathLike | bytes) -> FrameSet:
    if isinstance(source, (bytes, bytearray)):
        return unpack_frames(io.BytesIO(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            fs = unpack_frames(fh)
        fs.provenance.setdefault("sources", [os.fspath(source)])
        return fs
    if _read_exact(source, 4) != MAGIC:
        raise FrameFormatError("not a frame container (bad magic)")
    version, window, n_labels = struct.unpack("<HHH", _read_exact(source, 6))
    if version != FORMAT_VERSION:
        raise FrameFormatError(f"unsupported container version {version}")
    if window != WINDOW:
        raise FrameFormatError(f"window size {window} != {WINDOW}")
    names = []
    for _ in range(n_labels):
        (length,) = struct.unpack("<H", _read_exact(source, 2))
        names.append(_read_exact(source, length).decode("utf-8"))
    (count,) = struct.unpack("<Q", _read_exact(source, 8))
    body = np.frombuffer(_read_exact(source, count * _RECORD.itemsize), dtype=_RECORD)
    if source.read(1):
        raise FrameFormatError("trailing bytes after frame payload")
    # The last packed byte only carries one matrix bit.
    if count and np.any(body["bits"][:, -1] & 0x7F):
        raise FrameFormatError("nonzero padding bits")
    bits = np.unpackbits(body["bits"], axis=1, count=FRAME_BITS) if count else np.zeros((0, FRAME_BITS), np.uint8)
    labels = body["label"].astype(np.int64)
    if count and labels.max() >= n_labels:
        raise FrameFormatError("frame label outside label space")
    return FrameSet(bits.reshape(count, WINDOW, ID_BITS), labels, LabelSpace(tuple(names)),
                    {"window": window})
