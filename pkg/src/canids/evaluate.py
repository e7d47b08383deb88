"""Confusion-matrix metrics, multi-run averaging and inference benchmarking."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import checkpoint_size
from .framing import WINDOW, FrameSet
from .model import SupConResNet, as_input, count_parameters, predict

log = logging.getLogger(__name__)

METRICS = ("fnr", "recall", "precision", "f1")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    labels: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.labels])
        for name, row in zip(self.labels, self.counts):
            w.writerow([name, *map(int, row)])
        return buf.getvalue()


def confusion_matrix(preds, labels, num_classes: int,
                     names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    for arr in (preds, labels):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError("class index out of range")
    counts = np.bincount(labels * num_classes + preds, minlength=num_classes ** 2)
    names = tuple(names) if names is not None else tuple(str(i) for i in range(num_classes))
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), names)


@dataclass
class ClassMetrics:
    """One-vs-rest rates; ``None`` marks an undefined value (see ``flags``)."""

    name: str
    fnr: float | None
    recall: float | None
    precision: float | None
    f1: float | None
    support: int = 0
    flags: list[str] = field(default_factory=list)

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass
class EvalReport:
    classes: list[ClassMetrics]
    overall: ClassMetrics
    micro: ClassMetrics
    confusion: ConfusionMatrix | None = None
    meta: dict = field(default_factory=dict)
    runs: list["EvalReport"] = field(default_factory=list)

    def by_name(self, name: str) -> ClassMetrics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def attack_classes(self) -> list[ClassMetrics]:
        return self.classes[1:]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"classes": [asdict(c) for c in self.classes], "overall": asdict(self.overall),
             "micro": asdict(self.micro), "meta": self.meta,
             "runs": [r.to_dict() for r in self.runs]}
        if self.confusion is not None:
            d["confusion"] = {"labels": list(self.confusion.labels),
                              "counts": self.confusion.counts.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cm = None
        if d.get("confusion"):
            cm = ConfusionMatrix(np.asarray(d["confusion"]["counts"], dtype=np.int64),
                                 tuple(d["confusion"]["labels"]))
        return cls([ClassMetrics(**c) for c in d["classes"]], ClassMetrics(**d["overall"]),
                   ClassMetrics(**d["micro"]), cm, d.get("meta", {}),
                   [cls.from_dict(r) for r in d.get("runs", [])])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def rows(self) -> list[ClassMetrics]:
        return [*self.classes, self.overall]

    def to_csv(self, model_name: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["class", *METRICS, "support", "flags"]
        w.writerow(["model", *head] if model_name else head)
        for c in self.rows():
            row = [c.name, *("" if c.get(m) is None else repr(c.get(m)) for m in METRICS),
                   c.support, ";".join(c.flags)]
            w.writerow([model_name, *row] if model_name else row)
        return buf.getvalue()

    def format_table(self, model_name: str = "model") -> str:
        return format_comparison({model_name: self})


def _fmt(value: float | None, percent: bool = False) -> str:
    if value is None:
        return "n/a"
    return f"{100 * value:.2f}%" if percent else f"{value:.4f}"


def format_comparison(reports: dict[str, EvalReport]) -> str:
    """Attack-type x model table: FNR (as %), Rec, Prec, F1."""
    names = [c.name for c in next(iter(reports.values())).rows()]
    width = max(len(n) for n in [*names, "Attack Type"])
    mwidth = max(len(m) for m in [*reports, "Model"])
    lines = [f"{'Attack Type':<{width}} | {'Model':<{mwidth}} | {'FNR':>8} | {'Rec':>6} | "
             f"{'Prec':>6} | {'F1':>6}"]
    lines.append("-" * len(lines[0]))
    for name in names:
        for i, (model, rep) in enumerate(reports.items()):
            c = rep.overall if name == rep.overall.name else rep.by_name(name)
            label = name if i == 0 else ""
            lines.append(f"{label:<{width}} | {model:<{mwidth}} | {_fmt(c.fnr, True):>8} | "
                         f"{_fmt(c.recall):>6} | {_fmt(c.precision):>6} | {_fmt(c.f1):>6}")
        lines.append("-" * len(lines[0]))
    return "\n".join(lines)


def comparison_csv(reports: dict[str, EvalReport]) -> str:
    parts = []
    for i, (model, rep) in enumerate(reports.items()):
        text = rep.to_csv(model_name=model)
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(parts)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def _class_metrics(name: str, tp: int, fn: int, fp: int) -> ClassMetrics:
    flags = []
    support = tp + fn
    fnr, rec = _ratio(fn, support), _ratio(tp, support)
    if support == 0:
        flags.append("no_true_samples")
    prec = _ratio(tp, tp + fp)
    if prec is None:
        flags.append("no_predictions")
        # Nothing predicted: precision is 0 by convention when positives exist.
        if support > 0:
            prec = 0.0
    if rec is None or prec is None:
        f1 = None
    elif prec + rec == 0:
        f1 = 0.0
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return ClassMetrics(name, fnr, rec, prec, f1, support, flags)


def _mean_metrics(name: str, items: Sequence[ClassMetrics]) -> ClassMetrics:
    out = {}
    for m in METRICS:
        vals = [c.get(m) for c in items if c.get(m) is not None]
        out[m] = float(np.mean(vals)) if vals else None
    return ClassMetrics(name, out["fnr"], out["recall"], out["precision"], out["f1"],
                        int(sum(c.support for c in items)))


def per_class_metrics(m: ConfusionMatrix) -> EvalReport:
    """One-vs-rest FNR/Rec/Prec/F1 per class; ``overall`` is the macro mean over
    classes that occur in the ground truth, ``micro`` pools the counts."""
    counts = m.counts
    tp = np.diag(counts)
    fn = counts.sum(1) - tp
    fp = counts.sum(0) - tp
    classes = [_class_metrics(name, int(tp[i]), int(fn[i]), int(fp[i]))
               for i, name in enumerate(m.labels)]
    present = [c for c in classes if c.support > 0]
    overall = _mean_metrics("Overall", present)
    micro = _class_metrics("Micro", int(tp.sum()), int(fn.sum()), int(fp.sum()))
    micro.name = "Micro"
    return EvalReport(classes, overall, micro, m)


def evaluate_model(model: SupConResNet, test: FrameSet) -> EvalReport:
    if tuple(model.labels) != tuple(test.label_space):
        raise ValueError(f"label space mismatch: model {model.labels} vs data "
                         f"{tuple(test.label_space)}")
    preds, _ = predict(model, test.matrices)
    cm = confusion_matrix(preds, test.labels, len(test.label_space), test.label_space.names)
    report = per_class_metrics(cm)
    report.meta["n_frames"] = len(test)
    return report


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of each metric over runs; per-run reports are kept in ``runs``."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    classes = [_mean_metrics(c.name, [r.classes[i] for r in reports])
               for i, c in enumerate(first.classes)]
    cm = None
    if all(r.confusion is not None for r in reports):
        cm = ConfusionMatrix(sum(r.confusion.counts for r in reports), first.confusion.labels)
    return EvalReport(classes, _mean_metrics("Overall", [r.overall for r in reports]),
                      _mean_metrics("Micro", [r.micro for r in reports]), cm,
                      {"n_runs": len(reports)}, list(reports))


class RunFailure(RuntimeError):
    def __init__(self, message, partial: list[EvalReport]):
        super().__init__(message)
        self.partial = partial


def multi_run_protocol(run: Callable[[int], EvalReport], runs: int = 5,
                       base_seed: int = 0) -> EvalReport:
    """Call ``run(seed)`` for seeds ``base_seed + k`` and average the reports.

    ``run`` is expected to perform its own split, training and evaluation.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    done: list[EvalReport] = []
    for k in range(runs):
        seed = base_seed + k
        try:
            rep = run(seed)
        except Exception as exc:
            raise RunFailure(f"run {k} (seed {seed}) failed: {exc}", done) from exc
        rep.meta.setdefault("seed", seed)
        done.append(rep)
    avg = average_reports(done)
    avg.meta["seeds"] = [base_seed + k for k in range(runs)]
    return avg


@dataclass
class BenchmarkResult:
    mean_ms: float
    median_ms: float
    p95_ms: float
    parameters: int
    checkpoint_bytes: int
    threads: int
    n_frames: int
    repetitions: int
    deployed_parameters: int = 0
    times_ms: list[float] = field(default_factory=list, repr=False)

    @property
    def frames_per_second(self) -> float:
        return 1000.0 / self.mean_ms

    @property
    def messages_per_second(self) -> float:
        """Upper bound on sustainable bus load when every message starts a frame."""
        return WINDOW * self.frames_per_second

    def summary(self) -> str:
        return (f"latency mean={self.mean_ms:.3f} ms median={self.median_ms:.3f} ms "
                f"p95={self.p95_ms:.3f} ms (threads={self.threads}, {self.n_frames} frames x "
                f"{self.repetitions})\nparameters={self.parameters} ({self.parameters / 1e6:.2f}M)  "
                f"checkpoint={self.checkpoint_bytes / 1e6:.2f} MB\n"
                f"throughput={self.frames_per_second:.0f} frames/s, up to "
                f"{self.messages_per_second:.0f} messages/s")


def benchmark_inference(model: SupConResNet, n_frames: int = 200, repetitions: int = 3,
                        seed: int = 0, warmup: int = 20) -> BenchmarkResult:
    """Single-thread, batch-size-1 eval-mode latency of encoder + classifier."""
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    frames = np.random.default_rng(seed).integers(0, 2, (n_frames, WINDOW, WINDOW), dtype=np.uint8)
    inputs = [as_input(frames[i:i + 1]) for i in range(n_frames)]
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    model.eval()
    times = []
    try:
        with torch.inference_mode():
            for x in inputs[:warmup]:
                model(x)
            for _ in range(repetitions):
                for x in inputs:
                    t0 = time.perf_counter()
                    model(x)
                    times.append((time.perf_counter() - t0) * 1000.0)
    finally:
        torch.set_num_threads(prev_threads)
    times_arr = np.asarray(times)
    deployed = count_parameters(model.encoder) + count_parameters(model.classifier)
    return BenchmarkResult(
        mean_ms=float(times_arr.mean()),
        median_ms=float(statistics.median(times)),
        p95_ms=float(np.percentile(times_arr, 95)),
        parameters=count_parameters(model),
        checkpoint_bytes=checkpoint_size(model),
        threads=1,
        n_frames=n_frames,
        repetitions=repetitions,
        deployed_parameters=deployed,
        times_ms=times,
    )


def write_report(report: EvalReport, out_dir, model_name: str = "model") -> dict[str, str]:
    """Table, CSV, JSON and confusion-matrix CSV for one report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "table": os.path.join(out_dir, "report.txt"),
        "csv": os.path.join(out_dir, "report.csv"),
        "json": os.path.join(out_dir, "report.json"),
    }
    with open(paths["table"], "w", encoding="utf-8") as fh:
        fh.write(report.format_table(model_name) + "\n")
    with open(paths["csv"], "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(paths["json"], "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    if report.confusion is not None:
        paths["confusion"] = os.path.join(out_dir, "confusion.csv")
        with open(paths["confusion"], "w", encoding="utf-8") as fh:
            fh.write(report.confusion.to_csv())
    return paths
