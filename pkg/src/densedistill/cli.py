"""Command-line surface tying the modules into runnable workflows.

Subcommands: distill, eval-seg, eval-region, dump-attn, gradcheck, ablate,
selftest. Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .affinity import dump_attention_analysis
from .config import parse_config
from .container import read_tensor
from .errors import (
    ConfigError,
    ContainerError,
    DegenerateInputError,
    DistributionError,
    EvaluationError,
    ModeError,
    ParameterError,
    ShapeError,
)
from .gradcheck import run_gradcheck_suite

_VALIDATION_ERRORS = (ConfigError, ParameterError, ShapeError, DistributionError,
                      DegenerateInputError, EvaluationError, ModeError, ValueError)


def _build_parser():
    parser = argparse.ArgumentParser(prog="densedistill",
                                     description="decoupled dense-feature distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="run a full distillation from a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval-seg", help="training-free segmentation mIoU over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)

    p = sub.add_parser("eval-region", help="region classification mAcc over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--regions", choices=["boxes", "masks"], default="boxes")

    p = sub.add_parser("dump-attn", help="attention diagnostics as grey maps + sidecar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer indices")
    p.add_argument("--query", required=True, help="image-token index or 'cls'")
    p.add_argument("--out", default="attn-dumps")

    p = sub.add_parser("gradcheck", help="finite-difference sweep over all differentiable ops")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="coupled-vs-decoupled comparison on the synthetic suite")
    p.add_argument("--config", required=True)

    sub.add_parser("selftest", help="run the built-in example assertions")
    return parser


def _cmd_distill(args):
    from .trainer import distill_run

    cfg = parse_config(args.config)
    result = distill_run(cfg)
    steps = len(result.reports)
    print(f"steps={steps}")
    if result.reports:
        print(result.reports[-1].line(steps - 1))
    print(f"metrics={result.metrics_path}")
    print(f"checkpoint={result.checkpoint_path}")
    return 0


def _load_eval_inputs(args):
    from .evalsuite import load_class_embeddings
    from .trainer import load_student, read_manifest

    student, _ = load_student(args.checkpoint)
    records = read_manifest(args.manifest)
    classes = load_class_embeddings(args.classes)
    return student, records, classes


def _expanded_gt(segments, side, out_side):
    if segments.shape == (out_side, out_side):
        return segments
    if segments.shape == (side, side):
        return np.kron(segments, np.ones((out_side // side, out_side // side),
                                         dtype=segments.dtype))
    raise ShapeError(f"segment map {segments.shape} fits neither the token grid "
                     f"({side}) nor the image ({out_side})")


def _cmd_eval_seg(args):
    from .evalsuite import confusion_matrix, miou_from_confusion, segment_training_free
    from .vit import encode_dense

    student, records, classes = _load_eval_inputs(args)
    k = classes.vectors.shape[0]
    cm = np.zeros((k, k), dtype=np.int64)
    for rec in records:
        image = read_tensor(rec.image_path)["image"]
        segments = read_tensor(rec.segments_path)["labels"]
        enc = encode_dense(image, student, "decoupled")
        out_res = image.shape[-1]
        seg = segment_training_free(enc, classes, out_res=out_res)
        gt = _expanded_gt(segments, student.grid_side, out_res)
        cm += confusion_matrix(seg.upsampled, gt, k)
    score, table = miou_from_confusion(cm)
    print("class                     iou")
    for c, iou in sorted(table.items()):
        print(f"{classes.names[c]:<24} {iou:.4f}")
    for c, iou in sorted(table.items()):
        print(f"iou.{classes.names[c]}={iou:.6f}")
    print(f"miou={score:.6f}")
    return 0


def _cmd_eval_region(args):
    from .evalsuite import macc_tally, merge_tallies, region_classify, regions_from_labels
    from .vit import encode_dense

    student, records, classes = _load_eval_inputs(args)
    tally = {}
    for rec in records:
        image = read_tensor(rec.image_path)["image"]
        segments = read_tensor(rec.segments_path)["labels"]
        if segments.shape != (student.grid_side, student.grid_side):
            raise ShapeError(f"segment map {segments.shape} does not match the "
                             f"token grid ({student.grid_side})")
        enc = encode_dense(image, student, "decoupled")
        annotated = regions_from_labels(segments)
        gt = [lab for _, lab in annotated]
        if args.regions == "boxes":
            regions = [box for box, _ in annotated]
        else:
            regions = [(segments == lab) & _component_mask(segments, box, student.grid_side)
                       for box, lab in annotated]
        pred = region_classify(enc, regions, classes)
        tally = merge_tallies(tally, macc_tally(pred, gt))
    macc = sum(c / t for c, t in tally.values()) / len(tally)
    print("class                     acc      n")
    for c in sorted(tally):
        correct, total = tally[c]
        print(f"{classes.names[c]:<24} {correct / total:.4f}   {total}")
    for c in sorted(tally):
        correct, total = tally[c]
        print(f"acc.{classes.names[c]}={correct / total:.6f}")
    print(f"macc={macc:.6f}")
    return 0


def _component_mask(segments, box, side):
    mask = np.zeros_like(segments, dtype=bool)
    y0, y1 = round(box.y0 * side), round(box.y1 * side)
    x0, x1 = round(box.x0 * side), round(box.x1 * side)
    mask[y0:y1, x0:x1] = True
    return mask


def _cmd_dump_attn(args):
    from .trainer import load_student

    student, _ = load_student(args.checkpoint)
    image = read_tensor(args.image)["image"]
    layers = [int(part) for part in args.layers.split(",") if part]
    if not layers:
        raise ParameterError("need at least one layer index")
    query = args.query if args.query.lower() == "cls" else int(args.query)
    written = dump_attention_analysis(student, image, layers, query, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_gradcheck(args):
    reports = run_gradcheck_suite(seed=args.seed)
    for report in reports:
        print(report.line())
    ok = all(r.passed for r in reports)
    print(f"gradcheck: {sum(r.passed for r in reports)}/{len(reports)} passed")
    return 0 if ok else 1


def _cmd_ablate(args):
    from .evalsuite import ablation_coupled_vs_decoupled

    cfg = parse_config(args.config)
    report = ablation_coupled_vs_decoupled(cfg)
    print(report.text())
    for key, value in report.summary().items():
        print(f"{key}={value:.6f}")
    return 0


def _cmd_selftest(args):
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


_COMMANDS = {
    "distill": _cmd_distill,
    "eval-seg": _cmd_eval_seg,
    "eval-region": _cmd_eval_region,
    "dump-attn": _cmd_dump_attn,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "selftest": _cmd_selftest,
}


def run_cli(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ContainerError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
