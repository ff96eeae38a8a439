"""Command-line entry point: synth, train, predict, evaluate, uncertainty-report."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, parse_indices
from .ensemble import ensemble_predict, error_rate_by_level, head_roi, vvc_dice_scatter
from .errors import ConfigError, DegenerateInputError, FormatError, ShapeError
from .fileio import case_paths, list_cases, load_case, load_checkpoint, read_volume, save_checkpoint, write_volume
from .metrics import dice_score, evaluate
from .phantom import case_spec, generate_phantom
from .preprocess import SCALES
from .training import format_loss_log, train
from .volume import LabelMask, Volume

log = logging.getLogger("gtvseg")


class UsageError(Exception):
    pass


def _load_models(spec: str):
    paths = [p for p in spec.split(",") if p]
    if not paths:
        raise UsageError("--models needs at least one checkpoint")
    models = [load_checkpoint(p)[0] for p in paths]
    first = models[0].config
    for p, m in zip(paths[1:], models[1:]):
        if m.config != first:
            raise ShapeError(f"checkpoint {p} has network config {m.config.to_dict()}, expected {first.to_dict()}")
    return models


# --------------------------------------------------------------------------
# verbs


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        v, m = generate_phantom(case_spec(args.seed, i, args.separable))
        img_p, msk_p = case_paths(out, i)
        write_volume(img_p, v)
        write_volume(msk_p, m)
    log.info("wrote %d phantom pairs to %s", args.count, out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    data_dir = Path(args.data) if args.data else cfg.data_dir
    if data_dir is None:
        raise UsageError("no training data: pass --data DIR or set paths.data in the config")
    cases = parse_indices(args.cases) if args.cases else cfg.cases
    available = [i for i, (img, msk) in list_cases(data_dir).items() if img and msk]
    if cases is None:
        cases = available
    missing = sorted(set(cases) - set(available))
    if missing:
        raise UsageError(f"cases {missing[:10]} have no image/mask pair in {data_dir}")
    if not cases:
        raise UsageError(f"no cases found in {data_dir}")
    overrides = {"scale": args.scale, "seed": args.seed}
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    tcfg = dataclasses.replace(cfg.train, **overrides)
    dataset = [load_case(data_dir, i) for i in cases]
    every = max(1, tcfg.total_iterations // 20)

    def progress(it, lr, loss):
        if it % every == 0 or it == tcfg.total_iterations - 1:
            log.info("iter %d lr %.3g loss %.4f", it, lr, loss)

    result = train(dataset, tcfg, cfg.network, progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, {"train": tcfg.to_dict(), "cases": cases})
    loss_log = Path(f"{out}.loss.tsv")
    loss_log.write_text(format_loss_log(result.log))
    log.info("saved %s and %s", out, loss_log)
    return 0


def cmd_predict(args) -> int:
    models = _load_models(args.models)
    if args.out_uncertainty and len(models) < 2:
        raise UsageError("--out-uncertainty needs at least two models; entropy of one model is undefined")
    v = read_volume(args.input)
    if not isinstance(v, Volume):
        raise FormatError(f"{args.input}: expected an f32 image volume")
    res = ensemble_predict(models, v)
    write_volume(args.out_mask, res.fused)
    if args.out_prob:
        write_volume(args.out_prob, Volume(res.mean.foreground, v.spacing))
    if args.out_uncertainty:
        write_volume(args.out_uncertainty, Volume(res.uncertainty.astype(np.float32), v.spacing))
    if res.vvc is not None:
        log.info("ensemble of %d models, VVC %.4f", len(models), res.vvc)
    return 0


def _mask(path) -> LabelMask:
    m = read_volume(path)
    if not isinstance(m, LabelMask):
        raise FormatError(f"{path}: expected a u8 mask")
    return m


def cmd_evaluate(args) -> int:
    pred, gt = _mask(args.pred), _mask(args.gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    report = evaluate(pred, gt, gt.spacing)
    print(json.dumps(report.to_record(args.case_id)))
    return 0


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


def cmd_uncertainty_report(args) -> int:
    models = _load_models(args.models)
    if len(models) < 2:
        raise UsageError("uncertainty-report needs at least two models")
    if len(models) != 6:
        log.warning("uncertainty levels are calibrated for six models, got %d", len(models))
    cases = list_cases(args.cases)
    wanted = parse_indices(args.indices) if args.indices else sorted(cases)
    per_case, scatter, skipped = [], [], 0
    for i in wanted:
        img_p, msk_p = cases.get(i, (None, None))
        if img_p is None:
            raise UsageError(f"case {i} has no image in {args.cases}")
        if msk_p is None:
            skipped += 1
            continue
        v, gt = load_case(args.cases, i)
        res = ensemble_predict(models, v)
        rows = error_rate_by_level(res.per_model, res.fused, gt, head_roi(v))
        per_case.append((f"case_{i}", rows))
        scatter.append((f"case_{i}", res.vvc, dice_score(res.fused, gt)))
        log.info("case %d: dice %.4f vvc %.4f", i, scatter[-1][2], res.vvc)
    if skipped:
        log.warning("skipped %d case(s) without ground truth", skipped)
    if not per_case:
        raise UsageError("no case with ground truth to report on")

    lines = ["# level\tentropy\terror_rate"]
    by_level: dict[int, list[float]] = {}
    entropy_of: dict[int, float] = {}
    for case_id, rows in per_case:
        lines.append(f"# {case_id}")
        for r in rows:
            lines.append(f"{r.level}\t{r.entropy:.4f}\t{_fmt(r.error_rate)}")
            by_level.setdefault(r.level, []).append(r.error_rate)
            entropy_of[r.level] = r.entropy
    lines.append("# average")
    for level in sorted(by_level):
        lines.append(f"{level}\t{entropy_of[level]:.4f}\t{_fmt(float(np.mean(by_level[level])))}")
    Path(args.out).write_text("\n".join(lines) + "\n")

    sc_lines = ["# case_id\tvvc\tone_minus_dice"]
    sc_lines += [f"{cid}\t{_fmt(v)}\t{_fmt(1.0 - d)}" for cid, v, d in scatter]
    if len(scatter) >= 2:
        rho = vvc_dice_scatter([(v, d) for _, v, d in scatter]).spearman
        sc_lines.append(f"# spearman\t{_fmt(rho)}")
    scatter_path = Path(args.scatter) if args.scatter else Path(f"{args.out}.vvc.tsv")
    scatter_path.write_text("\n".join(sc_lines) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="gtvseg", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic phantom cases", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=25, help="number of cases")
    s.add_argument("--seed", type=int, default=0, help="base seed; case i is seeded from (seed, i)")
    s.add_argument("--separable", action="store_true", help="use a strong GTV contrast (+200 HU)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model at one sampling scale", formatter_class=fmt)
    t.add_argument("--config", default=None, help="TOML run config; built-in desk defaults when omitted")
    t.add_argument("--scale", required=True, choices=SCALES, help="patch sampling region")
    t.add_argument("--seed", type=int, default=0, help="weight init and sampling seed")
    t.add_argument("--out", required=True, help="checkpoint path; the loss log goes to <out>.loss.tsv")
    t.add_argument("--data", default=None, help="case directory (overrides paths.data)")
    t.add_argument("--cases", default=None, help="case indices such as 0-19 (overrides paths.cases)")
    t.add_argument("--iterations", type=int, default=None, help="override train.total_iterations")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="ensemble prediction for one volume", formatter_class=fmt)
    pr.add_argument("--models", required=True, help="comma-separated checkpoints")
    pr.add_argument("--input", required=True, help="HU image volume")
    pr.add_argument("--out-mask", required=True, help="fused mask after the largest-component filter")
    pr.add_argument("--out-prob", default=None, help="mean foreground probability volume")
    pr.add_argument("--out-uncertainty", default=None, help="per-voxel entropy volume (needs >= 2 models)")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="Dice, ASSD and RVE of one mask pair", formatter_class=fmt)
    e.add_argument("--pred", required=True, help="predicted mask")
    e.add_argument("--gt", required=True, help="ground-truth mask")
    e.add_argument("--case-id", default=None, help="label stored in the record")
    e.set_defaults(func=cmd_evaluate)

    u = sub.add_parser("uncertainty-report", help="error rate per entropy level and VVC scatter",
                       formatter_class=fmt)
    u.add_argument("--models", required=True, help="comma-separated checkpoints (six expected)")
    u.add_argument("--cases", required=True, help="case directory")
    u.add_argument("--indices", default=None, help="case indices such as 20-24 (default: all)")
    u.add_argument("--out", required=True, help="level table path")
    u.add_argument("--scatter", default=None, help="VVC scatter path (default <out>.vvc.tsv)")
    u.set_defaults(func=cmd_uncertainty_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, DegenerateInputError, FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"gtvseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
