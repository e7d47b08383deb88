"""``canids`` command line: preprocess | synth | train | transfer | eval | bench | monitor.

Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from . import can_log
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .framing import (DEFAULT_SOURCE_STRIDE, SOURCE_LABELS, TARGET_LABELS, FrameFormatError,
                      FrameSet, LabelSpace, build_frames, pack_frames, unpack_frames)
from .train import (CE_BASELINE_DEFAULTS, CLASSIFIER_DEFAULTS, SUPCON_DEFAULTS, TrainConfig,
                    TrainingDivergence)

log = logging.getLogger("canids")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _labels(spec: str) -> LabelSpace:
    if spec == "source":
        return SOURCE_LABELS
    if spec == "target":
        return TARGET_LABELS
    return LabelSpace(tuple(s.strip() for s in spec.split(",")))


def _read_manifest(path) -> list[tuple[str, str]]:
    base = os.path.dirname(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                name, cls = line.rsplit("=", 1)
                out.append((os.path.join(base, name), cls))
    return out


def _load_frames(path) -> FrameSet:
    if not os.path.exists(path):
        raise DataError(f"frames file not found: {path}")
    return unpack_frames(path)


def _load_model(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# -- subcommands ------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    space = _labels(args.labels)
    inputs = []
    for item in args.inputs:
        if "=" not in item:
            raise DataError(f"input {item!r} must be PATH=CLASS")
        path, cls = item.rsplit("=", 1)
        inputs.append((path, cls))
    if args.manifest:
        inputs.extend(_read_manifest(args.manifest))
    if not inputs:
        raise DataError("no input captures given")
    sets = []
    for path, cls in inputs:
        attack_class = space.index(cls)
        if not os.path.exists(path):
            raise DataError(f"cannot read {path}")
        records, stats = can_log.parse_hcrl_csv(path, strict=args.strict)
        print(f"{path}: {stats}")
        sets.append(build_frames(records, args.stride, attack_class, space, source=path))
    frames = FrameSet.concat(sets)
    pack_frames(frames, args.out)
    print(f"wrote {len(frames)} frames (stride {args.stride}) to {args.out}")
    for name, count in frames.class_counts().items():
        print(f"  {name:<12} {count}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .traffic_synth import SCENARIOS, generate_scenario

    os.makedirs(args.out, exist_ok=True)
    captures = generate_scenario(args.scenario, seed=args.seed, duration=args.duration)
    lines = []
    for cap in captures:
        fname = f"{cap.name}.csv"
        n = can_log.write_hcrl_csv(cap.records, os.path.join(args.out, fname))
        lines.append(f"{fname}={cap.class_name}")
        print(f"{fname}: {n} messages ({cap.class_name})")
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# labels={','.join(SCENARIOS[args.scenario].labels)}\n")
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def _train_config(args, defaults: TrainConfig) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config, defaults) if args.config else defaults
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "seed")
                 if getattr(args, k, None) is not None}
    return cfg.replace(**overrides)


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .train import train_ce_baseline, train_linear_classifier, train_supcon_encoder

    frames = _load_frames(args.frames)
    defaults = {"supcon": SUPCON_DEFAULTS, "ce": CE_BASELINE_DEFAULTS,
                "classifier": CLASSIFIER_DEFAULTS}[args.mode]
    cfg = _train_config(args, defaults)
    if args.mode == "supcon":
        model, trace = train_supcon_encoder(frames, cfg)
        logs = [trace]
        if not args.no_classifier:
            head_cfg = CLASSIFIER_DEFAULTS.replace(seed=cfg.seed)
            model, head = train_linear_classifier(model, frames, head_cfg)
            logs.append(head)
    elif args.mode == "ce":
        model, trace = train_ce_baseline(frames, cfg)
        logs = [trace]
    else:
        if not args.init:
            raise DataError("--mode classifier needs --init CHECKPOINT")
        model = _load_model(args.init)
        model, trace = train_linear_classifier(model, frames, cfg)
        logs = [trace]
    save_checkpoint(model, args.out, extra={"mode": args.mode})
    stem = os.path.splitext(args.out)[0]
    with open(stem + ".config.txt", "w", encoding="utf-8") as fh:
        fh.write(f"mode={args.mode}\n")
        fh.write(cfg.to_text())
    for trace in logs:
        trace.to_csv(f"{stem}.{trace.stage}.log.csv")
    plot_training_curves(logs, stem + ".loss.png")
    print(f"saved {args.mode} model to {args.out}; final loss {logs[0].losses[-1]:.5f}")
    return EXIT_OK


def _parse_sources(items) -> dict:
    out = {}
    for item in items or []:
        mode, path = item.split("=", 1) if "=" in item else ("supcon", item)
        out[mode] = _load_model(path)
    return out


def cmd_transfer(args) -> int:
    from .evaluate import comparison_csv, format_comparison
    from .plotting import plot_fnr_by_attack
    from .transfer import MODES, TransferSettings, transfer_protocol

    target = _load_frames(args.frames)
    modes = args.pretrained or list(MODES)
    pretrained = _parse_sources(args.source)
    for mode in modes:
        if mode != "random" and mode not in pretrained:
            raise DataError(f"--pretrained {mode} needs --source {mode}=CHECKPOINT")
    head = TrainConfig.from_file(args.config, CLASSIFIER_DEFAULTS) if args.config else CLASSIFIER_DEFAULTS
    if args.head_epochs is not None:
        head = head.replace(epochs=args.head_epochs)
    finetune = head.replace(lr=head.lr / 10)
    if args.finetune_epochs is not None:
        finetune = finetune.replace(epochs=args.finetune_epochs)
    settings = TransferSettings(head, finetune)
    table = transfer_protocol(target, pretrained, modes=modes, runs=args.runs,
                              base_seed=args.seed, settings=settings)
    os.makedirs(args.out, exist_ok=True)
    text = format_comparison(table)
    print(text)
    with open(os.path.join(args.out, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    with open(os.path.join(args.out, "comparison.csv"), "w", encoding="utf-8") as fh:
        fh.write(comparison_csv(table))
    plot_fnr_by_attack(table, os.path.join(args.out, "fnr_by_attack.png"))
    if args.save_model:
        from .transfer import run_mode
        best = next(m for m in ("supcon", "ce", "random") if m in modes)
        res = run_mode(best, target, pretrained, settings.seeded(args.seed))
        save_checkpoint(res.model, os.path.join(args.out, f"target_{best}.canw"),
                        extra={"mode": f"transfer-{best}"})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_model, write_report
    from .plotting import plot_confusion_matrix, plot_fnr_by_attack

    model = _load_model(args.checkpoint)
    frames = _load_frames(args.frames)
    try:
        report = evaluate_model(model, frames)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(report.format_table(args.name))
    if args.out:
        paths = write_report(report, args.out, args.name)
        plot_confusion_matrix(report.confusion, os.path.join(args.out, "confusion.png"))
        plot_fnr_by_attack({args.name: report}, os.path.join(args.out, "fnr_by_attack.png"))
        print(f"report written to {paths['csv']}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluate import benchmark_inference
    from .model import ModelConfig, init_weights

    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model = init_weights(ModelConfig(SOURCE_LABELS.names), seed=args.seed)
    result = benchmark_inference(model, n_frames=args.frames, repetitions=args.repetitions,
                                 seed=args.seed)
    print(result.summary())
    if args.out:
        from .plotting import plot_latency_histogram
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "latency.csv"), "w", encoding="utf-8") as fh:
            fh.write("frame,ms\n")
            fh.writelines(f"{i},{t:.6f}\n" for i, t in enumerate(result.times_ms))
        plot_latency_histogram(result.times_ms, os.path.join(args.out, "latency.png"))
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .monitor import monitor_stream

    model = _load_model(args.checkpoint)
    if args.input == "-":
        stream = sys.stdin
        lines = iter(stream.readline, "")
    else:
        if not os.path.exists(args.input):
            raise DataError(f"cannot read {args.input}")
        stream = open(args.input, encoding="utf-8", errors="replace")
        lines = stream
    alerts = 0
    try:
        for det in monitor_stream(model, lines, stride=args.stride, dedup=args.dedup):
            alerts += det.alert
            print(det.format(), flush=True)
    finally:
        if stream is not sys.stdin:
            stream.close()
    log.info("%d alerts", alerts)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canids", description="CAN-bus intrusion detection with SupCon ResNet.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="parse HCRL CSV captures into a frame container")
    s.add_argument("inputs", nargs="*", metavar="PATH=CLASS")
    s.add_argument("--manifest", help="manifest.txt written by 'synth'")
    s.add_argument("--labels", default="source", help="source | target | comma-separated names")
    s.add_argument("--stride", type=int, default=DEFAULT_SOURCE_STRIDE)
    s.add_argument("--strict", action="store_true", help="abort on the first malformed line")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="write synthetic HCRL captures")
    s.add_argument("--scenario", choices=["source", "target"], default="source")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, help="seconds per capture")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--mode", choices=["supcon", "ce", "classifier"], required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--config", help="key=value training config")
    s.add_argument("--init", help="checkpoint to start from (classifier mode)")
    s.add_argument("--no-classifier", action="store_true",
                   help="supcon mode: skip the linear-head stage")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transfer", help="compare transfer configurations on a target set")
    s.add_argument("--source", action="append", metavar="[MODE=]CHECKPOINT")
    s.add_argument("--frames", required=True)
    s.add_argument("--pretrained", action="append", choices=["random", "ce", "supcon"])
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key=value config for the head stage")
    s.add_argument("--head-epochs", type=int)
    s.add_argument("--finetune-epochs", type=int)
    s.add_argument("--save-model", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a frame container")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--name", default="model")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="single-thread batch-1 latency benchmark")
    s.add_argument("--checkpoint")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("monitor", help="classify a live HCRL CSV stream")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", default="-", help="file path or '-' for stdin")
    s.add_argument("--stride", type=int, default=DEFAULT_SOURCE_STRIDE)
    s.add_argument("--dedup", type=int, default=0,
                   help="suppress repeated alerts of one class within K frames")
    s.set_defaults(func=cmd_monitor)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CANIDS_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, KeyError, OSError, CheckpointError, FrameFormatError,
            can_log.CanLogError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
