"""Command-line entry point: ``copymove <gen|attack|train|eval|sweep|ablate|infer>``.

Relative output paths are resolved under ``$CMFD_OUTPUT_ROOT`` when it is set.
Every command writes a ``run.json`` next to its outputs recording the
arguments, resolved config, timestamps and a SHA-256 of each output file.
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
import torch
from PIL import Image

from . import __version__, evaluation
from .attacks import AttackSpec, AttackSpecError, all_tags, attack_dataset
from .data import DatasetError, generate_samples, read_dataset, split_counts, write_dataset
from .training import (
    DEFAULT_DEPTHS,
    DEFAULT_GAMMAS,
    CheckpointError,
    CheckpointRecord,
    ConfigFileError,
    fit,
    load_train_config,
    run_ablation,
    run_sweep,
    write_table_csv,
)

log = logging.getLogger("copymove")

OUTPUT_ROOT_ENV = "CMFD_OUTPUT_ROOT"
RUN_MANIFEST = "run.json"


class CommandError(RuntimeError):
    pass


def output_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path, exclude=(RUN_MANIFEST,)) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in exclude)
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in files}


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, started: float, **extra) -> Path:
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "parser")},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": hash_tree(out_dir),
        **extra,
    }
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    verify_run_manifest(path)
    return path


def verify_run_manifest(path: str | Path) -> None:
    """Raise CommandError when any recorded output is missing or changed."""
    path = Path(path)
    record = json.loads(path.read_text())
    for rel, digest in record["outputs"].items():
        f = path.parent / rel
        if not f.is_file():
            raise CommandError(f"output {f} listed in {path} is missing")
        if sha256_file(f) != digest:
            raise CommandError(f"output {f} does not match its recorded hash")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigFileError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _splits(data_root: Path):
    train = read_dataset(data_root / "train")
    val = read_dataset(data_root / "val")
    test = read_dataset(data_root / "test") if (data_root / "test" / "manifest.txt").exists() else val
    return train, val, test


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> None:
    started = time.time()
    out = output_path(args.out)
    counts = split_counts(args.n, args.split_fractions)
    if len(counts) != 3:
        raise CommandError("--split-fractions needs three values: train,val,test")
    samples = generate_samples(args.n, args.seed, size=args.size)
    start = 0
    for split, count in zip(("train", "val", "test"), counts):
        ids = list(range(start, start + count))
        write_dataset(samples[start : start + count], out / split, split, args.seed, sample_ids=ids)
        log.info("%s: %d samples", split, count)
        start += count
    write_run_manifest(out, "gen", args, started, seed=args.seed, splits=dict(zip(("train", "val", "test"), counts)))


def cmd_attack(args) -> None:
    started = time.time()
    try:
        spec = AttackSpec.parse(args.spec)
    except AttackSpecError as exc:
        msg = str(exc)
        if "valid tags" not in msg:
            msg += "; valid tags: " + ", ".join(all_tags())
        args.parser.error(msg)
    out = output_path(args.out)
    attack_dataset(read_dataset(args.input), spec, out, seed=args.seed)
    write_run_manifest(out, "attack", args, started, seed=args.seed, attack=spec.tag)


def cmd_train(args) -> None:
    if args.resume:
        raise CommandError("resuming a run is not supported; start a new run with the same config instead")
    started = time.time()
    config = load_train_config(args.config, _overrides(args.set))
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, _ = _splits(Path(args.data))
    (out / "config.txt").write_text(config.dumps())
    result = fit(train, val, config, log_path=out / "loss.csv")
    result.checkpoint.save(out / "checkpoint.pt")
    with open(out / "history.csv", "w") as f:
        f.write("epoch,selection_score\n")
        f.writelines(f"{i},{s!r}\n" for i, s in enumerate(result.history, 1))
    log.info("best epoch %d, selection score %.6f", result.checkpoint.epoch, result.checkpoint.selection_score)
    write_run_manifest(
        out,
        "train",
        args,
        started,
        seed=config.seed,
        config=config.to_dict(),
        selection_score=result.checkpoint.selection_score,
        epoch=result.checkpoint.epoch,
    )


def cmd_eval(args) -> None:
    started = time.time()
    record = CheckpointRecord.load(args.checkpoint)
    model = record.build_model()
    out = output_path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    metrics = []
    for root in args.data:
        ds = read_dataset(root)
        metrics += evaluation.evaluate_images(model, ds, args.batch_size)
        if args.export_maps:
            evaluation.export_maps(model, ds, out / "maps" / Path(root).name, args.batch_size)
    evaluation.write_summary_csv(evaluation.detection_summary(metrics), "detection", out / "detection.csv")
    evaluation.write_summary_csv(evaluation.distinguishment_summary(metrics), "distinguishment", out / "distinguishment.csv")
    evaluation.write_category_csv(evaluation.category_reports(metrics, args.threshold), out / "categories.csv")
    evaluation.write_per_image_csv(metrics, out / "per_image.csv")
    score = evaluation.selection_score_from(metrics)
    log.info("selection score %.6f over %d images", score, len(metrics))
    write_run_manifest(out, "eval", args, started, selection_score=score, n_images=len(metrics))


def _multi_run(args, kind: str) -> None:
    started = time.time()
    config = load_train_config(args.config, _overrides(args.set))
    train, val, test = _splits(Path(args.data))
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "ablate":
        rows = run_ablation(train, val, test, config)
        name = "ablation.csv"
    else:
        values = args.values
        if values is None:
            values = DEFAULT_GAMMAS if args.axis == "gamma" else DEFAULT_DEPTHS
        rows = run_sweep(args.axis, list(values), train, val, test, config)
        name = f"sweep_{args.axis}.csv"
    write_table_csv(rows, out / name)
    write_run_manifest(out, kind, args, started, seed=config.seed, config=config.to_dict(), rows=len(rows))


def cmd_sweep(args) -> None:
    _multi_run(args, "sweep")


def cmd_ablate(args) -> None:
    _multi_run(args, "ablate")


def cmd_infer(args) -> None:
    started = time.time()
    record = CheckpointRecord.load(args.checkpoint)
    model = record.build_model()
    size = record.network_config.input_size
    try:
        with Image.open(args.image) as im:
            rgb = im.convert("RGB")
    except OSError as exc:
        raise CommandError(f"cannot read image {args.image}: {exc}") from exc
    orig_w, orig_h = rgb.size
    if rgb.size != (size, size):
        rgb = rgb.resize((size, size), Image.BILINEAR)
    bin_pred, tri_pred = evaluation.predict_masks(model, np.asarray(rgb, dtype=np.uint8))
    bin_img, tri_img = evaluation.render_maps(bin_pred, tri_pred)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for suffix, arr in (("binary", bin_img), ("tri", tri_img)):
        im = Image.fromarray(arr)
        if im.size != (orig_w, orig_h):
            im = im.resize((orig_w, orig_h), Image.NEAREST)
        im.save(out / f"{stem}_{suffix}.png", format="PNG", optimize=False, compress_level=6)
    write_run_manifest(out, "infer", args, started)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="copymove", description="Copy-move forgery detection and source/target toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic train/val/test dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split-fractions", type=_float_list, default=[0.8, 0.1, 0.1])
    g.add_argument("--size", type=int, default=256)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("attack", help="write an attacked copy of a dataset split")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--spec", required=True, help="attack tag, one of: " + " ".join(all_tags()))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack, parser=a)

    t = sub.add_parser("train", help="train a model on <data>/train, selecting on <data>/val")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one or more dataset splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, action="append")
    e.add_argument("--report", required=True, help="output directory for CSV reports")
    e.add_argument("--export-maps", action="store_true")
    e.add_argument("--threshold", type=float, default=evaluation.CORRECT_THRESHOLD)
    e.add_argument("--batch-size", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    for name, func in (("sweep", cmd_sweep), ("ablate", cmd_ablate)):
        s = sub.add_parser(name, help="parameter sweep" if name == "sweep" else "2x2 ablation")
        s.add_argument("--config")
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=["gamma", "depth"])
            s.add_argument("--values", type=_float_list, default=None)
        s.set_defaults(func=func)

    i = sub.add_parser("infer", help="predict maps for a single image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except (CommandError, ConfigFileError, DatasetError, CheckpointError, ValueError, OSError) as exc:
        log.error("%s", exc)
        print(f"copymove {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
