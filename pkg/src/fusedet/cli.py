"""Command line front end.

    fusedet gen-data  --run.data_dir dataset [--force]
    fusedet train     --run.data_dir dataset --run.out_dir run
    fusedet eval      --run.out_dir run
    fusedet gradcheck
    fusedet ablation  --run.data_dir dataset --run.out_dir grid
    fusedet predict IMAGE --run.out_dir run

Shared flags: --config FILE loads flat `section.key = value` lines,
--seed N overrides both train.seed and data.seed, and any --section.key
VALUE pair overrides a single field. Resolution order is defaults, file,
then overrides. Every subcommand writes the fully resolved config next
to its outputs.

Exit codes: 0 success, 1 configuration or data problems, 2 numeric
failures (divergence, gradient check mismatch).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .config import (
    RunConfig,
    resolve_config,
    serialize_run_config,
    write_resolved_config,
)
from .data import (
    CLASS_NAMES,
    generate_synthetic_dataset,
    letterbox,
    load_index,
    read_pgm,
)
from .detector import decode_predictions
from .errors import CheckError, FusedetError, NumericError
from .gradcheck import run_suite
from .metrics import format_summary, write_eval_csv
from .tensor import Tensor
from .train import evaluate_model, fit, load_split

ABLATION_ROWS = (
    ("baseline", dict(use_bifpn=False, use_ddfm=False, use_ac=False, use_caf=False)),
    ("bifpn", dict(use_bifpn=True, use_ddfm=False, use_ac=False, use_caf=False)),
    ("bifpn_ddfm", dict(use_bifpn=True, use_ddfm=True, use_ac=False, use_caf=False)),
    ("bifpn_ddfm_caf", dict(use_bifpn=True, use_ddfm=True, use_ac=False, use_caf=True)),
    ("bifpn_ddfm_ac", dict(use_bifpn=True, use_ddfm=True, use_ac=True, use_caf=False)),
    ("full", dict(use_bifpn=True, use_ddfm=True, use_ac=True, use_caf=True)),
)


def _split_overrides(tokens: list) -> list:
    """Leftover `--section.key VALUE` pairs to (key, value) tuples."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not (tok.startswith("--") and "." in tok):
            raise FusedetError(f"unrecognized argument {tok!r}")
        key, eq, inline = tok[2:].partition("=")
        if eq:
            out.append((key, inline))
            i += 1
            continue
        if i + 1 >= len(tokens):
            raise FusedetError(f"flag --{key} needs a value")
        out.append((key, tokens[i + 1]))
        i += 2
    return out


def _load_config(args, extra: list) -> RunConfig:
    text = None
    origin = "<defaults>"
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as e:
            raise FusedetError(f"cannot read config {path}: {e}") from e
        origin = str(path)
    overrides = _split_overrides(extra)
    if args.seed is not None:
        overrides = [("train.seed", str(args.seed)), ("data.seed", str(args.seed))] + overrides
    return resolve_config(text, overrides, origin)


def cmd_gen_data(args, extra, out) -> int:
    cfg = _load_config(args, extra)
    root = Path(cfg.run.data_dir)
    if (root / "splits.txt").exists() and not args.force:
        raise FusedetError(
            f"{root} already holds a dataset; pass --force to regenerate"
        )
    index = generate_synthetic_dataset(cfg.data, root)
    write_resolved_config(cfg, root)
    counts = {s: len(index.subset(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(index)} images under {root}", file=out)
    print(
        f"splits: train {counts['train']}, val {counts['val']}, test {counts['test']}",
        file=out,
    )
    return 0


def cmd_train(args, extra, out) -> int:
    cfg = _load_config(args, extra)
    write_resolved_config(cfg, cfg.run.out_dir)

    def progress(stats):
        print(
            f"epoch {stats.epoch:>3}  loss {stats.loss_total:.4f}  "
            f"map50 {stats.val_map50:.4f}  map50-95 {stats.val_map50_95:.4f}",
            file=out,
        )

    rows = fit(cfg, progress=progress)
    if rows:
        print(
            f"done: {len(rows)} epochs logged, final map50 {rows[-1].val_map50:.4f}",
            file=out,
        )
    return 0


def cmd_eval(args, extra, out) -> int:
    cfg = _load_config(args, extra)
    ckpt = load_checkpoint(cfg.run.checkpoint_path())
    model = restore_model(ckpt)
    index = load_index(cfg.run.data_dir)
    split = args.split
    data = load_split(index, split, model.config.input_size)
    if len(data.images) == 0:
        raise FusedetError(f"split {split!r} under {cfg.run.data_dir} is empty")
    result = evaluate_model(model, data, model.config.class_count, cfg.run.nms_iou)
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)
    names = _class_names(model.config.class_count)
    write_eval_csv(result, out_dir / f"eval_{split}.csv", names)
    print(format_summary(result, names), file=out)
    print(f"map50 {result.map50:.17g}", file=out)
    print(f"map50_95 {result.map50_95:.17g}", file=out)
    return 0


def cmd_gradcheck(args, extra, out) -> int:
    if extra or args.config or args.seed is not None:
        # the suite is fully pinned; options would silently do nothing
        raise FusedetError("gradcheck takes no configuration")
    reports = run_suite(
        progress=lambda r: print(
            f"{r.name:<24} worst {r.worst:.3e}  tol {r.tolerance:.0e}  "
            f"{'ok' if r.passed else 'FAIL'}",
            file=out,
        )
    )
    failed = [r for r in reports if not r.passed]
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"gradient check FAILED: {names}", file=out)
        raise NumericError(f"gradient mismatch in {names}")
    print("all gradient checks passed", file=out)
    return 0


def cmd_ablation(args, extra, out) -> int:
    cfg = _load_config(args, extra)
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)
    results = []
    for name, flags in ABLATION_ROWS:
        row_overrides = [(f"model.{k}", "true" if v else "false") for k, v in flags.items()]
        row_overrides += [
            ("run.out_dir", str(out_dir / name)),
            ("run.checkpoint", ""),
        ]
        row_cfg = resolve_config(
            serialize_run_config(cfg), row_overrides, origin="<ablation>"
        )
        rows = fit(row_cfg)
        final = rows[-1]
        results.append((name, final.val_map50, final.val_map50_95))
        print(
            f"{name:<16} map50 {final.val_map50:.4f}  map50-95 {final.val_map50_95:.4f}",
            file=out,
        )
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w") as fh:
        fh.write("row,map50,map50_95\n")
        for name, m50, m5095 in results:
            fh.write(f"{name},{m50!r},{m5095!r}\n")
    print(f"wrote {csv_path}", file=out)
    return 0


def _class_names(class_count: int) -> list:
    if class_count == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class{i}" for i in range(class_count)]


def cmd_predict(args, extra, out) -> int:
    cfg = _load_config(args, extra)
    ckpt = load_checkpoint(cfg.run.checkpoint_path())
    model = restore_model(ckpt)
    size = model.config.input_size
    raw_img = read_pgm(args.image) / 255.0
    boxed, tf = letterbox(raw_img, size)
    raw = model.forward(Tensor(boxed.reshape(1, 1, size, size)))
    dets = decode_predictions(raw, model.config, cfg.run.conf_threshold, cfg.run.nms_iou)[0]
    names = _class_names(model.config.class_count)
    print(f"{args.image}: {len(dets)} detection(s)", file=out)
    for d in sorted(dets, key=lambda d: -d.confidence):
        x1, y1, x2, y2 = d.box
        # back to source-image pixels
        sx1, sy1 = (x1 - tf.pad_x) / tf.scale, (y1 - tf.pad_y) / tf.scale
        sx2, sy2 = (x2 - tf.pad_x) / tf.scale, (y2 - tf.pad_y) / tf.scale
        print(
            f"  {names[d.class_id]:<8} conf {d.confidence:.3f}  "
            f"box ({sx1:.1f}, {sy1:.1f}, {sx2:.1f}, {sy2:.1f})",
            file=out,
        )
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedet",
        description="detection toy with directional, concat and cross-layer fusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--seed", type=int, default=None, help="override train and data seeds")
        if name == "gen-data":
            p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
        if name == "eval":
            p.add_argument("--split", default="val", choices=("train", "val", "test"))
        if name == "predict":
            p.add_argument("image", help="input image (PGM)")
    return parser


def main(argv: Optional[list] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra, out)
    except (NumericError, CheckError) as e:
        print(f"error: {e}", file=out)
        return 2
    except FusedetError as e:
        print(f"error: {e}", file=out)
        return 1


def entry() -> None:
    sys.exit(main())
