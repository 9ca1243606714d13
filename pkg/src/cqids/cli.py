"""Command-line front end.

Every command writes a ``<output>.manifest.json`` next to its main output
recording the resolved configuration, seeds, paths and wall time, so a
run can be repeated from the manifest alone. Options may also come from a
JSON file passed with ``--config``; explicit flags win over the file,
which wins over the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .can_core import CaptureParseError, Label, read_capture, write_capture
from .cqmlp import ModelFileError, load_model
from .dataflow import bench, check_equivalence, load_pipeline, save_pipeline, streamline
from .evalkit import (confusion_from_arrays, format_table, inference_cost, metrics, metrics_rows,
                      read_confusion_csv, weight_density, write_csv)
from .features import BlockSet, build_blocks, read_blocks, split_dataset, write_blocks
from .plotting import plot_confusion, plot_loss_curve
from .traffic_sim import DEFAULT_RATES, simulate
from .training import TrainConfig, export_loss_csv, train_qat

log = logging.getLogger("cqids")

ATTACK_CHOICES = ("dos", "fuzzing", "spoof", "none")


class CliError(Exception):
    """A failed postcondition; reported on stderr with exit status 1."""


class _SingleAttack(argparse.Action):
    def __call__(self, parser, namespace, value, option_string=None):
        if getattr(namespace, "_attack_seen", False) and value != getattr(namespace, self.dest):
            parser.error(f"conflicting {option_string} values: "
                         f"{getattr(namespace, self.dest)!r} and {value!r}")
        namespace._attack_seen = True
        setattr(namespace, self.dest, value)


def _capture_arg(text: str) -> tuple[str, Label]:
    path, sep, cls = text.rpartition("=")
    if not sep or not path:
        raise argparse.ArgumentTypeError(f"expected PATH=CLASS, got {text!r}")
    try:
        return path, Label.parse(cls)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def write_manifest(output: Path, args: argparse.Namespace, inputs, outputs, started: float,
                   extra: dict | None = None) -> Path:
    config = {k: v for k, v in vars(args).items() if not k.startswith("_") and k != "func"}
    if config.get("capture"):
        config["capture"] = [f"{path}={cls.name.lower()}" for path, cls in config["capture"]]
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": {"seed": config.get("seed")},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    if extra:
        doc.update(extra)
    path = Path(str(output) + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def load_dataset(args) -> tuple[BlockSet, list[str]]:
    """Concatenate block files and freshly encoded captures into one set."""
    parts, inputs = [], []
    for path in args.data or []:
        parts.append(read_blocks(path))
        inputs.append(path)
    for path, cls in args.capture or []:
        frames, _ = read_capture(path, cls, strict=not getattr(args, "lenient", False))
        parts.append(build_blocks(frames, stride=getattr(args, "stride", None)))
        inputs.append(f"{path}={cls.name.lower()}")
    if not parts:
        raise CliError("no input data: pass --data BLOCKS or --capture PATH=CLASS")
    blocks = BlockSet.concat(parts)
    if len(blocks) == 0:
        raise CliError("inputs produced no blocks")
    return blocks, inputs


# commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.perf_counter()
    attack = None if args.attack == "none" else args.attack
    frames = simulate(attack, args.duration, seed=args.seed, rate=args.rate, on=args.on,
                      off=args.off)
    out = Path(args.output)
    n = write_capture(frames, out)
    write_manifest(out, args, [], [out], started, {"frames": n})
    print(f"wrote {n} frames to {out}")
    return 0


def cmd_ingest(args) -> int:
    started = time.perf_counter()
    blocks, inputs = load_dataset(args)
    out = Path(args.output)
    write_blocks(blocks, out)
    counts = {lab.display: c for lab, c in blocks.class_counts().items()}
    write_manifest(out, args, inputs, [out], started, {"blocks": len(blocks), "class_counts": counts})
    print(f"wrote {len(blocks)} blocks to {out}: {counts}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    blocks, inputs = load_dataset(args)
    split = split_dataset(blocks, seed=args.seed)
    out = Path(args.output)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, bits=args.bits,
                      seed=args.seed, loss_kind=args.loss, mode=args.mode, checkpoint=str(out))

    def progress(epoch, tr, va):
        log.info("epoch %d/%d train %.6f val %.6f", epoch, cfg.epochs, tr, va)

    model, curve = train_qat(cfg, split, progress=progress)
    loss_csv, loss_png = _sibling(out, ".loss.csv"), _sibling(out, ".loss.png")
    test_blk = _sibling(out, ".test.blk")
    export_loss_csv(curve, loss_csv)
    outputs = [out, loss_csv, test_blk]
    if len(curve):
        plot_loss_curve(curve, loss_png, title=f"{cfg.bits}-bit training loss")
        outputs.append(loss_png)
    write_blocks(split.test, test_blk)
    write_manifest(out, args, inputs, outputs, started,
                   {"train_config": cfg.as_dict(), "split_sizes": split.sizes(),
                    "best_epoch": model.meta.get("best_epoch"),
                    "best_val_loss": model.meta.get("best_val_loss")})
    print(f"saved model to {out} (best epoch {model.meta.get('best_epoch')}, "
          f"val loss {model.meta.get('best_val_loss')})")
    return 0


def _report(cm, out: Path | None, started: float, args, inputs) -> int:
    rep = metrics(cm)
    print(format_table(cm.to_rows()))
    print()
    print(format_table(metrics_rows(rep)))
    if rep.undefined:
        print(f"warning: undefined metrics (class absent from data): {', '.join(rep.undefined)}",
              file=sys.stderr)
    if out is not None:
        cm_csv, m_csv, png = (_sibling(out, ".confusion.csv"), _sibling(out, ".metrics.csv"),
                              _sibling(out, ".confusion.png"))
        write_csv(cm.to_rows(), cm_csv)
        write_csv(metrics_rows(rep), m_csv)
        plot_confusion(cm, png)
        write_manifest(out, args, inputs, [cm_csv, m_csv, png], started,
                       {"macro_f1": rep.macro_f1, "accuracy": rep.accuracy,
                        "undefined": rep.undefined})
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    out = Path(args.output) if args.output else None
    if args.from_confusion:
        return _report(read_confusion_csv(args.from_confusion), out, started, args,
                       [args.from_confusion])
    if bool(args.model) == bool(args.pipeline):
        raise CliError("pass exactly one of --model, --pipeline or --from-confusion")
    blocks, inputs = load_dataset(args)
    if args.model:
        pred = load_model(args.model).predict(blocks.data, args.mode)
        inputs.insert(0, args.model)
    else:
        pred = load_pipeline(args.pipeline).predict(blocks.data)
        inputs.insert(0, args.pipeline)
    return _report(confusion_from_arrays(blocks.labels, pred), out, started, args, inputs)


def cmd_streamline(args) -> int:
    started = time.perf_counter()
    model = load_model(args.model)
    pipe = streamline(model)
    rng = np.random.default_rng(args.seed)
    probe = rng.integers(-128, 128, (args.check_blocks, model.dims[0])).astype(np.int8)
    bad = check_equivalence(pipe, model, probe)
    if bad:
        first = bad[0]
        where = "predicted class" if first.layer < 0 else f"hidden layer {first.layer}"
        raise CliError(f"self-check failed: {len(bad)} mismatches on {args.check_blocks} random "
                       f"blocks; first at block {first.index} ({where})\n"
                       f"  block: {first.block.tolist()}\n"
                       f"  fake-quant: {np.asarray(first.expected).tolist()}\n"
                       f"  pipeline:   {np.asarray(first.got).tolist()}")
    out = Path(args.output)
    save_pipeline(pipe, out)
    write_manifest(out, args, [args.model], [out], started, {"self_check_blocks": args.check_blocks})
    print(f"self-check passed on {args.check_blocks} blocks; wrote pipeline to {out}")
    return 0


def cmd_bench(args) -> int:
    started = time.perf_counter()
    pipe = load_pipeline(args.pipeline)
    if args.capture:
        frames, inputs = [], []
        for path, cls in args.capture:
            frames.extend(read_capture(path, cls)[0])
            inputs.append(path)
    else:
        duration = 1.0
        frames = simulate(None, duration, seed=args.seed)
        while len(frames) < args.frames:
            duration *= 2
            frames = simulate(None, duration, seed=args.seed)
        frames = frames[:args.frames]
        inputs = []
    stream = frames if args.mode == "per_message_sliding" else build_blocks(frames).data
    rep = bench(pipe, stream, args.mode, args.workers)
    out = Path(args.output)
    write_csv([list(rep.as_row()), list(rep.as_row().values())], out)
    write_manifest(out, args, [args.pipeline, *inputs], [out], started, {"frames": len(frames)})
    print(rep.summary())
    return 0


def cmd_cost(args) -> int:
    started = time.perf_counter()
    density = None
    if args.model:
        model = load_model(args.model)
        if model.bits != args.bits:
            log.warning("model is %d-bit; costing its sparsity at --bits %d", model.bits, args.bits)
        density = weight_density(model)
    rep = inference_cost(bits=args.bits, density=density)
    print(format_table(rep.rows()))
    print(f"normalised inference cost ({args.bits}-bit vs 4-bit): {rep.normalized:.6f}")
    if args.output:
        out = Path(args.output)
        write_csv(rep.rows(), out)
        write_manifest(out, args, [args.model] if args.model else [], [out], started,
                       {"normalized": rep.normalized})
    return 0


# parser ---------------------------------------------------------------------

def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", action="append", metavar="BLOCKS",
                   help="block file written by 'ingest' (repeatable)")
    p.add_argument("--capture", action="append", type=_capture_arg, metavar="PATH=CLASS",
                   help="capture file and its attack class: benign, dos, fuzzing or spoof (repeatable)")
    p.add_argument("--lenient", action="store_true", help="skip malformed capture lines")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="cqids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--config", metavar="JSON", help="option defaults for the subcommand")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["simulate"] = sub.add_parser("simulate", help="generate a synthetic capture")
    p.add_argument("--attack", choices=ATTACK_CHOICES, default="none", action=_SingleAttack)
    p.add_argument("--duration", type=float, default=60.0, help="seconds of traffic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=None,
                   help="injection rate in frames/s (default per attack: "
                        + ", ".join(f"{k.display} {v:g}" for k, v in DEFAULT_RATES.items()) + ")")
    p.add_argument("--on", type=float, default=2.0, help="attack burst length in seconds")
    p.add_argument("--off", type=float, default=3.0, help="gap between bursts in seconds")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_simulate)

    p = subs["ingest"] = sub.add_parser("ingest", help="encode captures into a block file")
    _add_data_args(p)
    p.add_argument("--stride", type=int, default=None, help="window stride (default: 4, disjoint)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = subs["train"] = sub.add_parser("train", help="quantisation-aware training")
    _add_data_args(p)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--bits", type=int, choices=(2, 3, 4, 8), default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--loss", choices=("bce", "ce"), default="bce")
    p.add_argument("--mode", choices=("fake_quant", "real"), default="fake_quant")
    p.add_argument("--seed", type=int, default=0, help="drives the split, init and shuffling")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = subs["eval"] = sub.add_parser("eval", help="confusion matrix and detection metrics")
    _add_data_args(p)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--model")
    p.add_argument("--pipeline")
    p.add_argument("--mode", choices=("fake_quant", "real"), default="fake_quant")
    p.add_argument("--from-confusion", metavar="CSV", help="score a stored 4x4 confusion matrix")
    p.add_argument("-o", "--output", help="prefix for the CSV and PNG reports")
    p.set_defaults(func=cmd_eval)

    p = subs["streamline"] = sub.add_parser("streamline", help="build the integer threshold pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--check-blocks", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_streamline)

    p = subs["bench"] = sub.add_parser("bench", help="latency and throughput of a pipeline")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--capture", action="append", type=_capture_arg, metavar="PATH=CLASS")
    p.add_argument("--frames", type=int, default=10_000, help="simulated benign frames when no capture is given")
    p.add_argument("--mode", choices=("per_block", "per_message_sliding"), default="per_block")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_bench)

    p = subs["cost"] = sub.add_parser("cost", help="normalised inference cost")
    p.add_argument("--bits", type=int, choices=(2, 3, 4, 8), default=2)
    p.add_argument("--model", help="also report a sparsity-discounted cost for this model")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_cost)
    return parser, subs


def _apply_config(parser, subs, argv) -> None:
    pre, _ = parser.parse_known_args(argv)
    if not pre.config:
        return
    try:
        cfg = json.loads(Path(pre.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {pre.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    sp = subs[pre.command]
    known = {a.dest for a in sp._actions}
    unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
    if unknown:
        parser.error(f"unknown {pre.command} options in config: {', '.join(unknown)}")
    sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    _apply_config(parser, subs, argv)
    args = parser.parse_args(argv)
    if getattr(args, "capture", None):
        # entries coming from a config file are still PATH=CLASS strings
        args.capture = [c if isinstance(c, tuple) else _capture_arg(c) for c in args.capture]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ModelFileError, CaptureParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
