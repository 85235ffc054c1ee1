"""Command-line entry point: ``vid2log <subcommand> ...``.

Every run writes ``run.json`` (a RunRecord) next to its outputs; ``vid2log
rerun run.json`` repeats it.  Exit codes: 0 success, 2 usage, 3 validation,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError, Vid2LogError

log = logging.getLogger("vid2log")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "VID2LOG_OUTPUT_ROOT"
BASELINES = ("no-event", "random", "forest", "net")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


def _train_config(args):
    from .netcore import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       threshold=args.threshold)


def _load_manifest(path):
    from .ingest import load_manifest

    if not Path(path).is_file():
        raise ValidationError(f"manifest {path} does not exist")
    return load_manifest(path)


def _write_curve(curve, path: Path) -> Path:
    from .eval import curve_csv

    path.write_text(curve_csv(curve), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands; each returns (input paths, output paths)


def cmd_synth(args, out: Path):
    from .ingest import save_manifest
    from .logsink import save_log
    from .synth import config_from_dict, generate

    cfg = {}
    if args.synth_config:
        cfg = json.loads(Path(args.synth_config).read_text(encoding="utf-8"))
    for key in ("style", "seed", "frame_count", "empty_fraction", "max_cooccurring", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.events:
        cfg["events"] = args.events.split(",")
    config = config_from_dict(cfg)
    manifest, truth = generate(config)
    outputs = [save_manifest(manifest, out / "manifest.jsonl"), save_log(truth, out / "groundtruth.jsonl")]
    outputs.append(out / "frames")
    print(f"wrote {len(manifest)} frames ({manifest.mode} mode) to {out}")
    return [Path(args.synth_config)] if args.synth_config else [], outputs


def cmd_ingest(args, out: Path):
    from .ingest import (
        EventVocabulary,
        extract_frames,
        list_frame_files,
        pair_labels,
        read_event_log,
        save_manifest,
    )

    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise ValidationError(f"frames directory {frames_dir} does not exist")
    files = extract_frames(list_frame_files(frames_dir), args.source_fps, args.target_fps)
    if not files:
        raise ValidationError(f"no image files in {frames_dir}")
    events = read_event_log(args.log)
    if args.vocab:
        names = [ln.strip() for ln in Path(args.vocab).read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        names = sorted({name for name, _ in events})
    out.mkdir(parents=True, exist_ok=True)
    rel = [os.path.relpath(f.resolve(), out.resolve()) for f in files]
    manifest = pair_labels(rel, events, EventVocabulary(tuple(names)), args.target_fps, root=str(out))
    path = save_manifest(manifest, out / "manifest.jsonl")
    if manifest.late_events:
        log.warning("%d events fell after the last frame and were put on it", manifest.late_events)
    print(f"{len(manifest)} frames, {len(events)} events, empty fraction {manifest.empty_fraction():.4f}")
    inputs = [frames_dir, Path(args.log)] + ([Path(args.vocab)] if args.vocab else [])
    return inputs, [path]


def _build_spec(args, manifest):
    from .netcore import build_activity_net, build_event_net

    h = w = args.input_size
    channels = manifest.image(0).shape[2]
    if manifest.mode == "event":
        return build_event_net(manifest.event_count, args.scale, (h, w, channels))
    return build_activity_net(manifest.event_count, args.two_stream, args.depth, (h, w, channels))


def _maybe_holdout(args, manifest):
    from .eval import holdout_split

    if args.holdout:
        return holdout_split(manifest, args.holdout, args.split_seed)
    return manifest, None


def cmd_train(args, out: Path):
    from .netcore import save_checkpoint, train

    manifest = _load_manifest(args.manifest)
    train_part, held = _maybe_holdout(args, manifest)
    ckpt, curve = train(_build_spec(args, manifest), train_part, _train_config(args), heldout=held)
    outputs = [save_checkpoint(ckpt, out / "model.pxlg"), _write_curve(curve, out / "curve.csv")]
    print(f"trained {args.epochs} epochs; final train accuracy {curve.train_accuracy[-1]:.4f}")
    return [Path(args.manifest)], outputs


def cmd_transfer(args, out: Path):
    from .netcore import load_checkpoint, save_checkpoint, train
    from .transfer import domain_adapt, make_student, transfer_last_layer

    teacher = load_checkpoint(args.teacher)
    manifests = [_load_manifest(p) for p in args.manifests]
    target_train, held = _maybe_holdout(args, manifests[-1])
    config = _train_config(args)
    size = target_train.event_count
    if args.mode == "student-teacher":
        if len(manifests) != 1:
            raise UsageError("student-teacher transfer takes exactly one manifest")
        ckpt, curve = train(make_student(teacher, size, args.seed), target_train, config, heldout=held)
    elif args.mode == "last-layer":
        if len(manifests) != 1:
            raise UsageError("last-layer transfer takes exactly one manifest")
        ckpt, curve = transfer_last_layer(teacher, size, target_train, config, heldout=held)
    else:
        ckpt, curve = domain_adapt(teacher.spec, [*manifests[:-1], target_train], config, heldout=held)
    outputs = [save_checkpoint(ckpt, out / "model.pxlg"), _write_curve(curve, out / "curve.csv")]
    print(f"{args.mode}: final train accuracy {curve.train_accuracy[-1]:.4f}")
    return [Path(args.teacher), *map(Path, args.manifests)], outputs


def cmd_eval(args, out: Path):
    from .baselines import ForestConfig, forest_predictor, max_cooccurring, no_event_predictor, random_predictor, train_forest
    from .eval import evaluate, holdout_split, kfold_split, merge_reports
    from .netcore import checkpoint_predictor, load_checkpoint, train

    manifest = _load_manifest(args.manifest)
    if args.kfold and args.holdout:
        raise UsageError("choose either --kfold or --holdout")
    if args.kfold:
        splits = kfold_split(manifest, args.kfold)
    elif args.holdout:
        splits = [holdout_split(manifest, args.holdout, args.split_seed)]
    else:
        splits = [(manifest, manifest)]

    inputs = [Path(args.manifest)]
    ckpt = None
    if args.predictor not in BASELINES:
        ckpt = load_checkpoint(args.predictor)
        inputs.append(Path(args.predictor))
        vocab = ckpt.vocabulary
        if vocab is not None and tuple(vocab) != manifest.vocabulary.names:
            raise ValidationError(
                f"checkpoint vocabulary {list(vocab)} does not match manifest vocabulary "
                f"{list(manifest.vocabulary.names)}"
            )
    name = args.name or (Path(args.predictor).stem if ckpt is not None else args.predictor)
    reports = []
    for k, (train_part, test) in enumerate(splits):
        if ckpt is not None:
            predictor = checkpoint_predictor(ckpt, args.threshold)
        elif args.predictor == "no-event":
            predictor = no_event_predictor
        elif args.predictor == "random":
            predictor = random_predictor(
                max_cooccurring(train_part) if manifest.mode == "event" else None, seed=args.seed + k
            )
        elif args.predictor == "forest":
            forest = train_forest(train_part, ForestConfig(tree_count=args.trees, max_depth=args.max_depth,
                                                           input_size=(args.input_size, args.input_size),
                                                           seed=args.seed + k))
            predictor = forest_predictor(forest)
        else:
            model, _ = train(_build_spec(args, manifest), train_part, _train_config(args))
            predictor = checkpoint_predictor(model, args.threshold)
        reports.append(evaluate(predictor, test, name))
        log.info("split %d: %.4f", k, reports[-1].mean)
    report = merge_reports(name, reports)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return inputs, [out / "report.json", out / "report.txt"]


def cmd_predict(args, out: Path):
    from .errors import LabelError
    from .ingest import EventVocabulary, extract_frames, list_frame_files, read_image
    from .logsink import emit_log, save_log
    from .netcore import load_checkpoint, predict_labels, stack_inputs

    ckpt = load_checkpoint(args.checkpoint)
    names = ckpt.vocabulary
    if args.vocab:
        given = tuple(ln.strip() for ln in Path(args.vocab).read_text(encoding="utf-8").splitlines() if ln.strip())
        if names is not None and given != names:
            raise LabelError(f"checkpoint vocabulary {list(names)} does not match {list(given)}")
        names = given
    if names is None:
        names = tuple(f"event_{i}" for i in range(ckpt.spec.output_size))
    if len(names) != ckpt.spec.output_size:
        raise LabelError(f"vocabulary has {len(names)} names but the model outputs {ckpt.spec.output_size}")
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise ValidationError(f"frames directory {frames_dir} does not exist")
    files = extract_frames(list_frame_files(frames_dir), args.source_fps or args.fps, args.fps)
    if not files:
        raise ValidationError(f"no image files in {frames_dir}")
    images = np.stack([read_image(f) for f in files])
    labels = predict_labels(ckpt, stack_inputs(images, ckpt.spec), args.threshold)
    if ckpt.spec.mode == "activity":
        onehot = np.zeros((len(labels), ckpt.spec.output_size), dtype=np.uint8)
        onehot[np.arange(len(labels)), labels] = 1
        labels = onehot
    game_log = emit_log(labels, args.fps, EventVocabulary(names), source=_sha256(frames_dir)[:16])
    path = save_log(game_log, out / "log.jsonl")
    print(f"{len(files)} frames, {len(game_log.frame_events)} with events")
    return [Path(args.checkpoint), frames_dir], [path]


def cmd_report(args, out: Path):
    import csv

    from .eval import EvalReport, comparison_table
    from .netcore import TrainingCurve
    from .transfer import epochs_to_threshold

    reports, curves = [], {}
    for raw in args.inputs:
        path = Path(raw)
        if not path.is_file():
            raise ValidationError(f"{path} does not exist")
        if path.suffix == ".csv":
            with path.open(newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            curve = TrainingCurve(
                [float(r["train_accuracy"]) for r in rows],
                [float(r["train_loss"]) for r in rows],
                [float(r["heldout_accuracy"]) for r in rows] if rows and rows[0]["heldout_accuracy"] else None,
            )
            label = path.parent.name if path.stem == "curve" else path.stem
            curves[label] = curve
        else:
            reports.append(EvalReport.from_record(json.loads(path.read_text(encoding="utf-8"))))
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    lines = []
    if reports:
        lines += ["## average test accuracy", "", comparison_table(reports)]
    summary = {"reports": {r.name: {"mean": r.mean, "std": r.table_std} for r in reports}, "curves": {}}
    if curves:
        lines += [f"## epochs to {args.threshold:g} accuracy", "", "| run | epochs to threshold | final accuracy |",
                  "|---|---|---|"]
        for label, curve in curves.items():
            use = "heldout" if curve.heldout_accuracy is not None else "train"
            hit = epochs_to_threshold(curve, args.threshold, use)
            series = curve.heldout_accuracy if use == "heldout" else curve.train_accuracy
            lines.append(f"| {label} | {'never' if hit is None else hit} | {series[-1]:.4f} |")
            summary["curves"][label] = {"epochs_to_threshold": hit, "accuracy": use, "final": series[-1]}
            with (out / "curves" / f"{label}.csv").open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["epoch", "accuracy", "loss"])
                for epoch, (acc, loss) in enumerate(zip(series, curve.train_loss)):
                    writer.writerow([epoch, repr(acc), repr(loss)])
        lines.append("")
    table = out / "table.md"
    table.write_text("\n".join(lines), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(table.read_text(encoding="utf-8"), end="")
    return [Path(p) for p in args.inputs], [table, out / "summary.json", out / "curves"]


def cmd_rerun(args, out: Path):
    record = json.loads(Path(args.record).read_text(encoding="utf-8"))
    argv = list(record["argv"])
    if args.out:
        args.out = str(Path(args.out).resolve())
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    here = os.getcwd()
    os.chdir(record.get("cwd", here))
    try:
        code = main(argv)
    finally:
        os.chdir(here)
    if code:
        raise SystemExit(code)
    return None


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "report": cmd_report,
    "rerun": cmd_rerun,
}


def _add_train_flags(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--scale", choices=("desk", "paper"), default="desk")
    g.add_argument("--input-size", type=int, default=64, help="model input height and width")
    g.add_argument("--two-stream", action="store_true", help="activity mode: add the frame-difference stream")
    g.add_argument("--depth", type=int, default=10, help="activity mode: residual net depth")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--threshold", type=float, default=0.5, help="decode threshold for event scores")


def _add_split_flags(p):
    p.add_argument("--holdout", type=float, help="train fraction for a holdout split")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vid2log", description="Learn game-event logs from gameplay frames.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--config", help="JSON file of flag values; explicit flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1, help="torch threads; 1 is the reproducible mode")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("synth", "render a synthetic gameplay dataset")
    p.add_argument("synth_config", nargs="?", help="JSON SynthConfig file")
    p.add_argument("--style")
    p.add_argument("--frame-count", type=int)
    p.add_argument("--empty-fraction", type=float)
    p.add_argument("--max-cooccurring", type=int)
    p.add_argument("--events", help="comma-separated event names")
    p.add_argument("--mode", choices=("event", "activity"))
    p.set_defaults(seed=None)

    p = add("ingest", "pair a frame directory with an event log")
    p.add_argument("frames")
    p.add_argument("log", help="CSV (event,timestamp) or JSON-lines event log")
    p.add_argument("--source-fps", type=float, required=True)
    p.add_argument("--target-fps", type=float, default=12.0)
    p.add_argument("--vocab", help="file with one event name per line (default: sorted names in the log)")

    p = add("train", "train a classifier from scratch")
    p.add_argument("manifest")
    _add_train_flags(p)
    _add_split_flags(p)

    p = add("transfer", "transfer a trained model to a new dataset")
    p.add_argument("manifests", nargs="+", help="target manifest (domain-adapt: source manifests first)")
    p.add_argument("--teacher", required=True)
    p.add_argument("--mode", choices=("student-teacher", "last-layer", "domain-adapt"), default="student-teacher")
    _add_train_flags(p)
    _add_split_flags(p)

    p = add("eval", "evaluate a checkpoint or baseline")
    p.add_argument("predictor", help=f"checkpoint path or one of {', '.join(BASELINES)}")
    p.add_argument("manifest")
    p.add_argument("--kfold", type=int)
    p.add_argument("--name")
    p.add_argument("--trees", type=int, default=10)
    p.add_argument("--max-depth", type=int, default=100)
    _add_train_flags(p)
    _add_split_flags(p)

    p = add("predict", "turn frames into a game log")
    p.add_argument("checkpoint")
    p.add_argument("frames")
    p.add_argument("--fps", type=float, default=12.0)
    p.add_argument("--source-fps", type=float)
    p.add_argument("--vocab")
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("report", "compare reports and training curves")
    p.add_argument("inputs", nargs="+", help="report.json and curve.csv files")
    p.add_argument("--threshold", type=float, default=0.9, help="accuracy for epochs-to-threshold")

    p = add("rerun", "repeat a run from its run.json")
    p.add_argument("record")
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(max(1, args.threads))
    if args.command == "rerun":
        try:
            cmd_rerun(args, None)
        except SystemExit as exc:
            return int(exc.code)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot rerun {args.record}: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        return EXIT_OK

    out = _out_dir(args)
    started = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Vid2LogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("unexpected failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    record = {
        "command": args.command,
        "argv": argv,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "seed": args.seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
        "cwd": os.getcwd(),
        "version": __version__,
    }
    (out / "run.json").write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
