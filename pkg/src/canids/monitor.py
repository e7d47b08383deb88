"""Streaming classification of live CAN logs with a rolling 29-ID window."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .can_log import CanLogError, CanRecord, _Malformed, encode_id_29bit, parse_line
from .framing import WINDOW
from .model import SupConResNet, as_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    start: float
    end: float
    class_index: int
    class_name: str
    score: float

    @property
    def alert(self) -> bool:
        return self.class_index != 0

    def format(self) -> str:
        status = "ALERT" if self.alert else "ok"
        return f"{self.start:.6f},{self.end:.6f},{self.class_name},{self.score:.4f},{status}"


class FrameMonitor:
    """Holds at most 29 encoded IDs; classifies every ``stride``-th full window."""

    def __init__(self, model: SupConResNet, stride: int = 15, dedup: int = 0):
        if stride <= 0:
            raise ValueError("stride must be positive")
        self.model = model.eval()
        self.stride = stride
        self.dedup = dedup
        self.rows: deque[np.ndarray] = deque(maxlen=WINDOW)
        self.times: deque[float] = deque(maxlen=WINDOW)
        self._since = 0
        self._last_alert: tuple[int, int] | None = None  # (class, frame number)
        self.frames = 0

    def push(self, rec: CanRecord) -> Detection | None:
        self.rows.append(encode_id_29bit(rec.can_id))
        self.times.append(rec.timestamp)
        if len(self.rows) < WINDOW:
            return None
        if self.frames and self._since < self.stride - 1:
            self._since += 1
            return None
        self._since = 0
        return self._classify()

    @torch.inference_mode()
    def _classify(self) -> Detection | None:
        self.frames += 1
        probs = F.softmax(self.model(as_input(np.stack(self.rows)[None])), dim=1)[0]
        idx = int(probs.argmax())
        det = Detection(self.times[0], self.times[-1], idx, self.model.labels[idx], float(probs[idx]))
        if det.alert and self.dedup > 0:
            last = self._last_alert
            self._last_alert = (idx, self.frames)
            if last is not None and last[0] == idx and self.frames - last[1] <= self.dedup:
                return None
        return det


def monitor_stream(model: SupConResNet, lines: Iterable[str | bytes], stride: int = 15,
                   dedup: int = 0) -> Iterator[Detection]:
    """Yield one detection per classified frame, in input order. Bad lines are logged and skipped."""
    mon = FrameMonitor(model, stride, dedup)
    for line_no, raw in enumerate(lines, start=1):
        line = raw.decode("utf-8", "replace") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            rec = parse_line(line, line_no)
        except (_Malformed, CanLogError) as exc:
            log.warning("line %d: %s", line_no, exc)
            continue
        det = mon.push(rec)
        if det is not None:
            yield det
