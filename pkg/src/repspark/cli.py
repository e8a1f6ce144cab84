"""``repspark`` command line.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 I/O or format error.
Tables print 4 decimals; ``--format json`` prints full precision.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import det_eval, io_formats, loss_zoo, repvit, spark
from .io_formats import FormatError, RunConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return "-"
    s = f"{v:.4f}"
    return s[1:] if s == "-0.0000" else s


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines)


def _dump_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False))


def _parse_box(text: str, flag: str) -> loss_zoo.Box:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag} expects x1,y1,x2,y2 numbers, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"{flag} expects 4 comma-separated numbers, got {len(vals)}")
    try:
        return loss_zoo.Box(*vals)
    except ValueError as e:
        raise UsageError(f"{flag}: {e}") from None


def _variant_list(name: str, allowed=loss_zoo.VARIANTS) -> list[str]:
    if name == "all":
        return list(allowed)
    try:
        v = loss_zoo.parse_variant(name).value
    except ValueError as e:
        raise UsageError(str(e)) from None
    if v not in allowed:
        raise UsageError(f"variant {v!r} has no analytic gradient; choose from: {', '.join(allowed)}")
    return [v]


# -- commands ----------------------------------------------------------------


def cmd_init(args, cfg: RunConfig) -> int:
    try:
        channels = tuple(int(c) for c in args.channels.split(","))
        depths = tuple(int(d) for d in args.depths.split(","))
        bcfg = repvit.BackboneConfig(stage_channels=channels, stage_depths=depths, input_channels=args.in_channels)
    except ValueError as e:
        raise UsageError(f"bad backbone shape: {e}") from None
    dtype = np.float32 if args.dtype == "f32" else np.float64
    weights = repvit.init_backbone(bcfg, cfg.seed, dtype)
    container = io_formats.backbone_to_tensors(weights)
    io_formats.write_weights(args.out, container)
    if cfg.format == "json":
        _dump_json({"form": container.form, "params": container.num_params(), "tensors": len(container.tensors)})
    else:
        print(f"form     {container.form}")
        print(f"params   {container.num_params()}")
        print(f"tensors  {len(container.tensors)}")
    return EXIT_OK


def cmd_fuse(args, cfg: RunConfig) -> int:
    container = io_formats.read_weights(args.inp)
    if container.form == "deploy":
        raise UsageError(f"{args.inp} is already in deploy form; nothing to fuse")
    try:
        train = io_formats.backbone_from_tensors(container)
    except ValueError as e:
        raise FormatError(str(e), source=str(args.inp)) from None
    deploy = repvit.reparam_backbone(train)
    dtype = next(iter(container.tensors.values())).dtype if container.tensors else np.float64
    rng = np.random.default_rng(cfg.seed)
    probe = rng.standard_normal((1, train.config.input_channels, 64, 64)).astype(dtype)
    a = repvit.backbone_forward(probe, train)
    b = repvit.backbone_forward(probe, deploy)
    dev = max(float(np.max(np.abs(x - y))) for x, y in zip(a.levels, b.levels))
    out = io_formats.backbone_to_tensors(deploy)
    io_formats.write_weights(args.out, out)
    if cfg.format == "json":
        _dump_json({"train_params": container.num_params(), "deploy_params": out.num_params(), "max_deviation": dev})
    else:
        print(f"train params   {container.num_params()}")
        print(f"deploy params  {out.num_params()}")
        print(f"max deviation  {dev:.3e}")
    return EXIT_OK


def _grad_str(g) -> str:
    return "-" if g is None else "[" + ", ".join(_fmt(v) for v in g) + "]"


def cmd_loss(args, cfg: RunConfig) -> int:
    pred = _parse_box(args.pred, "--pred")
    gt = _parse_box(args.gt, "--gt")
    names = _variant_list(args.variant)
    overrides = {"image_w": args.img_w, "image_h": args.img_h}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    has_img = bool((overrides.get("image_w") or cfg.image_w) and (overrides.get("image_h") or cfg.image_h))
    if args.variant == "all" and not has_img:
        names = [n for n in names if n != "mpdiou"]
    rows = []
    for name in names:
        try:
            lc = cfg.loss_config(variant=name, **overrides)
        except ValueError as e:
            raise UsageError(f"{name}: {e}") from None
        uses_wiou = name == "wiou" or (name == "focaler" and lc.focaler_base is loss_zoo.Variant.WIOU)
        state = cfg.wiou_state() if uses_wiou else None
        row = {"variant": name, "loss": loss_zoo.loss_value(pred, gt, lc, state)}
        if args.grad:
            try:
                an = loss_zoo.loss_grad_analytic(pred, gt, lc)
                row["grad_analytic"] = an.grad.tolist()
                row["kink"] = an.flagged
            except ValueError:
                row["grad_analytic"] = None
                row["kink"] = None
            row["grad_fd"] = loss_zoo.loss_grad_fd(pred, gt, lc, state=state).grad.tolist()
        rows.append(row)
    if cfg.format == "json":
        _dump_json(rows)
        return EXIT_OK
    header = ["variant", "loss"] + (["analytic grad", "fd grad"] if args.grad else [])
    body = []
    for r in rows:
        line = [r["variant"], _fmt(r["loss"])]
        if args.grad:
            line += [_grad_str(r["grad_analytic"]) + (" *" if r["kink"] else ""), _grad_str(r["grad_fd"])]
        body.append(line)
    print(_table(header, body))
    if args.grad and any(r["kink"] for r in rows):
        print("* kink: analytic value is the mean of the one-sided derivatives")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.tol <= 0:
        raise UsageError("--tol must be positive")
    names = _variant_list(args.variant, loss_zoo.ANALYTIC_VARIANTS)
    rows = []
    ok = True
    for name in names:
        lc = cfg.loss_config(variant=name)
        rng = np.random.default_rng(cfg.seed)
        pred, gt = loss_zoo.non_degenerate_pairs(args.trials, rng, lc)
        an, _ = loss_zoo.loss_grad_analytic_batch(pred, gt, lc)
        fd, _ = loss_zoo.loss_grad_fd_batch(pred, gt, lc, h=args.h)
        worst = max(loss_zoo.grad_rel_error(a, b) for a, b in zip(an, fd))
        passed = worst <= args.tol
        ok &= passed
        rows.append({"variant": name, "trials": args.trials, "worst_rel_error": worst, "pass": passed})
    if cfg.format == "json":
        _dump_json({"tol": args.tol, "results": rows, "pass": ok})
    else:
        print(_table(
            ["variant", "trials", "worst rel err", "status"],
            [[r["variant"], str(r["trials"]), f"{r['worst_rel_error']:.3e}", "PASS" if r["pass"] else "FAIL"] for r in rows],
        ))
        print(f"tolerance {args.tol:.1e}: {'all passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_eval(args, cfg: RunConfig) -> int:
    try:
        thresholds = io_formats.parse_iou_thresholds(args.iou_thrs or cfg.iou_thresholds)
    except ValueError as e:
        raise UsageError(str(e)) from None
    gt_data, gt_src = io_formats._read(args.gt)
    dt_data, dt_src = io_formats._read(args.dt)
    gt_file = io_formats.parse_annotations(gt_data, gt_src)
    dt_file = io_formats.parse_detections(dt_data, dt_src)
    classes = sorted(
        {c["id"] for c in gt_file.categories if isinstance(c, dict) and isinstance(c.get("id"), int)}
        | {r.class_id for r in gt_file.records}
        | {r.class_id for r in dt_file.records}
    )
    if not classes:
        raise UsageError("no classes found in either file")
    try:
        result = det_eval.evaluate(
            dt_file.records, gt_file.records, thresholds, classes,
            score_threshold=cfg.score_threshold, operating_iou=cfg.operating_iou, interpolation=cfg.interpolation,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    if cfg.format == "json":
        sys.stdout.write(io_formats.eval_result_to_json(result))
        return EXIT_OK
    print(_table(
        ["Precision", "Recall", "mAP50", "mAP50:95"],
        [[_fmt(result.precision), _fmt(result.recall), _fmt(result.map50), _fmt(result.map50_95)]],
    ))
    print(f"tp {result.tp}  fp {result.fp}  fn {result.fn}")
    rows = []
    for c, aps in result.per_class_ap.items():
        vals = [v for v in aps.values() if v is not None]
        ap50 = next((v for t, v in aps.items() if abs(t - 0.5) < 1e-9), None)
        rows.append([str(c), _fmt(ap50), _fmt(sum(vals) / len(vals) if vals else None)])
    print()
    print(_table(["class", "AP50", "AP50:95"], rows))
    return EXIT_OK


def cmd_mask(args, cfg: RunConfig) -> int:
    patch = args.patch if args.patch is not None else cfg.patch_size
    ratio = args.ratio if args.ratio is not None else cfg.mask_ratio
    try:
        mask = spark.generate_mask(args.h, args.w, patch, ratio, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if cfg.format == "json" or args.json:
        _dump_json(mask.to_dict())
        return EXIT_OK
    print(mask.to_bitmap())
    n = mask.grid.size
    print(f"masked fraction {mask.masked_count / n:.4f} ({mask.masked_count}/{n} patches)")
    return EXIT_OK


def cmd_pretrain_demo(args, cfg: RunConfig) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    images = spark.synthetic_images()
    trace = spark.spark_pretrain_toy(images, args.steps, cfg.seed, per_patch_norm=cfg.pretrain_per_patch_norm)
    ratio = trace[-1] / trace[0] if trace[0] else float("nan")
    descended = trace[-1] < trace[0]
    if cfg.format == "json":
        _dump_json({"seed": cfg.seed, "steps": args.steps, "trace": trace, "ratio": ratio, "descended": descended})
    else:
        every = max(1, args.steps // 20)
        rows = [[str(t), _fmt(v)] for t, v in enumerate(trace) if t % every == 0 or t == len(trace) - 1]
        print(_table(["step", "loss"], rows))
        print(f"initial {trace[0]:.4f}  final {trace[-1]:.4f}  ratio {ratio:.4f}")
    return EXIT_OK if descended else EXIT_VALIDATION


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--format", choices=("table", "json"), default=argparse.SUPPRESS, help="output format")

    parser = argparse.ArgumentParser(prog="repspark", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("init", parents=[common], help="write a random train-form toy backbone")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--channels", default="16,32,64,128")
    p.add_argument("--depths", default="2,2,4,2")
    p.add_argument("--in-channels", type=int, default=3)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fuse", parents=[common], help="reparameterise train-form weights into deploy form")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("loss", parents=[common], help="evaluate box regression losses on one pair")
    p.add_argument("--variant", default="all", help="variant name or 'all'")
    p.add_argument("--pred", required=True, help="x1,y1,x2,y2")
    p.add_argument("--gt", required=True, help="x1,y1,x2,y2")
    p.add_argument("--img-w", type=float)
    p.add_argument("--img-h", type=float)
    p.add_argument("--grad", action="store_true", help="also print analytic and finite-difference gradients")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--variant", default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", parents=[common], help="precision, recall and mAP of a detections file")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--dt", type=Path, required=True)
    p.add_argument("--iou-thrs", help="a:b:step or comma list (default 0.5:0.95:0.05)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask", parents=[common], help="print a random patch mask")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("pretrain-demo", parents=[common], help="toy masked-modelling pretraining run")
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_pretrain_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: --help or usage error
        return int(e.code or 0)
    overrides = {"seed": getattr(args, "seed", None), "format": getattr(args, "format", None)}
    try:
        cfg = io_formats.load_config(getattr(args, "config", None), overrides)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"repspark {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"repspark {args.command}: error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
