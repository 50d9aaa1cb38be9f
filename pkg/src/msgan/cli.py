"""``msgan`` command-line tool.

Exit status is 0 on success, 1 on a usage error (bad or missing flags) and
2 on a data error (missing or malformed files, unknown config keys,
missing checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from msgan import memmodel
from msgan.grid import NdimgError, load_volume, save_volume
from msgan.nets import CheckpointError
from msgan.pyramid import build_edge_pyramid, build_pyramid, make_patch_grid
from msgan.textkv import KeyValueError

log = logging.getLogger("msgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands

def cmd_synthdata(args) -> int:
    from msgan.synthdata import gen_dataset

    rows = gen_dataset(args.seed, args.count, args.side, args.ndim, args.out, args.base_size)
    print(f"wrote {len(rows)} pairs to {args.out}")
    return 0


def cmd_pyramid(args) -> int:
    p = build_pyramid(load_volume(args.input), args.base_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (im, ed) in enumerate(zip(p.images, p.edges)):
        save_volume(im, out / f"scale{i}_image.ndimg")
        save_volume(ed, out / f"scale{i}_edges.ndimg")
    print(f"wrote {p.n_scales + 1} scales to {out}")
    return 0


def _load_config(args):
    from msgan.train import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_text(cfg.to_text().replace(f"seed = {cfg.seed}\n", f"seed = {args.seed}\n"))
    return cfg


def cmd_train(args) -> int:
    from msgan.synthdata import read_manifest
    from msgan.train import checkpoint_name, save_checkpoint, train_all, train_scale, write_log

    cfg = _load_config(args)
    rows = read_manifest(args.data_manifest)
    if not rows:
        raise ValueError(f"{args.data_manifest}: manifest lists no pairs")
    key = "path_" + args.domain
    pyramids = [build_pyramid(load_volume(r[key]), args.base_size) for r in rows]
    if args.all:
        ckpts = train_all(pyramids, cfg, args.out_dir)
        print(f"trained {len(ckpts)} checkpoint(s) into {args.out_dir}")
        return 0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = train_scale(pyramids, args.scale, cfg)
    name = checkpoint_name("independent" if cfg.variant == "independent" else args.scale)
    save_checkpoint(ck, out / name)
    write_log(ck.log, (out / name).with_suffix(".log.csv"))
    print(f"wrote {out / name}")
    return 0


def cmd_generate(args) -> int:
    from msgan.synth import generate, load_models

    models_dir = Path(args.models_dir)
    if not models_dir.is_dir():
        raise FileNotFoundError(f"models directory {models_dir} does not exist")
    models = load_models(models_dir)
    if args.mode == "multiscale" and models.lr is not None:
        base = models.lr.input_side
    else:
        base = args.base_size
    patch = args.patch_size
    if patch is None:
        hr = models.independent if args.mode == "independent_overlap" else next(iter(models.hr.values()), None)
        patch = hr.input_side if hr is not None else 32
    source = load_volume(args.edges)
    pyr = build_edge_pyramid(source, base)
    y = generate(models, pyr, args.seed, args.mode, patch)
    save_volume(y, args.out)
    print(f"wrote {args.out}")
    return 0


def _parse_grid_spec(text: str, shape):
    from msgan.synth import make_overlap_grid

    try:
        kind, patch, extra = text.split(":")
        patch, extra = int(patch), int(extra)
    except ValueError:
        raise UsageError(f"--grid-spec must look like trimmed:PATCH:MARGIN or overlap:PATCH:OVERLAP, got {text!r}")
    if kind == "trimmed":
        return make_patch_grid(shape, patch, extra)
    if kind == "overlap":
        return make_overlap_grid(shape, patch, extra)
    raise UsageError(f"unknown grid kind {kind!r}")


def _per_item_scores(paths, preds, truths, metrics, grid_spec):
    from msgan import evaluation as ev
    from msgan.synth import seam_score

    per_item = {"ssim": ev.ssim, "mae": ev.mae, "mse": ev.mse}
    rows = []
    for path, y, t in zip(paths, preds, truths):
        for m in metrics:
            if m in per_item:
                rows.append((path, m, per_item[m](y, t)))
            elif m == "seam":
                rows.append((path, m, seam_score(y, _parse_grid_spec(grid_spec, y.shape))))
    return rows


def cmd_evaluate(args) -> int:
    from msgan import evaluation as ev

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"ssim", "mae", "mse", "fd", "seam"}
    if unknown:
        raise UsageError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    if len(args.pred) != len(args.truth):
        raise UsageError(f"{len(args.pred)} predictions but {len(args.truth)} ground truths")
    if args.baseline and len(args.baseline) != len(args.truth):
        raise UsageError(f"{len(args.baseline)} baseline predictions but {len(args.truth)} ground truths")
    if "seam" in metrics and not args.grid_spec:
        raise UsageError("the seam metric needs --grid-spec")
    if "fd" in metrics and not args.features:
        raise UsageError("the fd metric needs --features CHECKPOINT")
    truths = [load_volume(p) for p in args.truth]
    preds = [load_volume(p) for p in args.pred]
    rows = _per_item_scores(args.pred, preds, truths, metrics, args.grid_spec)
    if args.baseline:
        base = [load_volume(p) for p in args.baseline]
        base_rows = _per_item_scores(args.baseline, base, truths, metrics, args.baseline_grid_spec or args.grid_spec)
        rows += base_rows
        if len(truths) >= 2:
            for m in metrics:
                a = [v for _, mm, v in rows[:len(rows) - len(base_rows)] if mm == m]
                b = [v for _, mm, v in base_rows if mm == m]
                if not a:
                    continue
                try:
                    t, p = ev.paired_ttest(a, b)
                except ValueError:
                    t, p = float("nan"), float("nan")
                rows += [(f"ttest:{m}", "t", t), (f"ttest:{m}", "p", p)]
    if "fd" in metrics:
        from msgan.train import load_checkpoint

        ck = load_checkpoint(args.features)
        fb = np.concatenate([ev.extract_features(t, ck) for t in truths])
        fa = np.concatenate([ev.extract_features(y, ck) for y in preds])
        rows.append(("pred", "fd_pluggable_features", ev.frechet_distance(fa, fb)))
        if args.baseline:
            fc = np.concatenate([ev.extract_features(y, ck) for y in base])
            rows.append(("baseline", "fd_pluggable_features", ev.frechet_distance(fc, fb)))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "metric", "value"])
        for item, m, v in rows:
            w.writerow([item, m, repr(float(v))])
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def cmd_memplan(args) -> int:
    names = memmodel.TEMPLATES if args.template == "all" else args.template.split(",")
    for n in names:
        if n not in memmodel.TEMPLATES:
            raise UsageError(f"unknown template {n!r}; expected one of {', '.join(memmodel.TEMPLATES)} or all")
    table = {n: memmodel.sweep_sizes(n, args.sides) for n in names}
    text = memmodel.sweep_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.fit:
        for n, rows in table.items():
            fit = memmodel.cubic_fit(rows)
            coef = " ".join(f"{c:.6g}" for c in fit.coefficients)
            print(f"# {n}: cubic fit a3..a0 = {coef}, residual {fit.residual:.3g}", file=sys.stderr)
    print("# baseline templates are representative 3D stand-ins, not published layer lists", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="msgan", description="Multi-scale patch GAN pipeline for large 2D/3D images.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthdata", help="write a synthetic two-domain phantom dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--ndim", type=int, choices=(2, 3), default=2)
    p.add_argument("--base-size", type=int, default=32)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synthdata)

    p = sub.add_parser("pyramid", help="dump the image and edge pyramid of one volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--base-size", type=int, default=64)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("train", help="train one scale or the whole cascade")
    p.add_argument("--data-manifest", required=True)
    p.add_argument("--config", help="key = value training config; unknown keys are errors")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--scale", type=int)
    which.add_argument("--all", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--base-size", type=int, default=32)
    p.add_argument("--domain", choices=("A", "B"), default="B", help="manifest column used as the target domain")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="synthesize a full image from a source volume's edges")
    p.add_argument("--models-dir", required=True)
    p.add_argument("--edges", required=True, help="source volume; its edge pyramid conditions generation")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=("multiscale", "independent_overlap"), default="multiscale")
    p.add_argument("--base-size", type=int, default=32, help="used only when no scale-0 checkpoint is loaded")
    p.add_argument("--patch-size", type=int, help="defaults to the patch checkpoint's training side")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="compare predictions with ground truth")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--metrics", default="ssim,mae,mse")
    p.add_argument("--grid-spec", help="trimmed:PATCH:MARGIN or overlap:PATCH:OVERLAP (seam metric)")
    p.add_argument("--baseline", nargs="+", help="second method's predictions; adds paired t-test rows")
    p.add_argument("--baseline-grid-spec", help="grid for the baseline's seam metric (default --grid-spec)")
    p.add_argument("--features", help="checkpoint whose discriminator supplies fd features")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("memplan", help="tabulate the analytic training-memory model")
    p.add_argument("--template", default="all")
    p.add_argument("--sides", type=_int_list, required=True)
    p.add_argument("--fit", action="store_true", help="report a cubic regression per template")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_memplan)
    return ap


DATA_ERRORS = (OSError, NdimgError, CheckpointError, KeyValueError, KeyError, ValueError, LookupError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"msgan: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"msgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"msgan {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
