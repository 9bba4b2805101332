#!/usr/bin/env python3
"""
OsC toolkit - command line
Every subcommand reads its inputs from files or flags, writes results to
files or stdout, and exits 0 on success, 1 on input errors and 2 on
numerical failures with a one-line diagnostic on stderr.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DegenerateCurve, InvalidConfig, IoFailure, OscError
from geometry import INWARD, OUTWARD, band_mask, offset_polyline, polyline_from_rows, signed_distance
from grid import LabelMask, ScalarField, binary_from_labels, one_hot
from image_io import load_image, load_mask, save_field, save_mask, save_sdf
from losses import LOSS_KINDS, LossConfig, load_loss_config, multiclass_baseline, osc_loss, probmap_from_foreground
from metrics import evaluate_labels, report_csv
from report_summary import summarize_file
from synth import load_synth_spec, synth_generate
from trainer import (
    GRAD_CHECK_SAMPLES,
    GRAD_CHECK_TOLERANCE,
    fit_logits,
    fit_summary,
    grad_check,
    load_experiment_spec,
    load_fit_job,
    random_grad_check_case,
    run_experiment,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

# label values in band files
BAND_OFF, BAND_OUTER, BAND_INNER = 0, 1, 2


class CliParser(argparse.ArgumentParser):
    """Argument errors exit with the input-error code instead of argparse's 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def validate_band_width(value: str) -> Tuple[bool, str]:
    try:
        width = float(value)
    except ValueError:
        return False, f"band width must be a number, got {value!r}"
    if not width > 0:
        return False, f"band width must be positive, got {value}"
    return True, "Valid"


def _band_width(value: str) -> float:
    is_valid, msg = validate_band_width(value)
    if not is_valid:
        raise argparse.ArgumentTypeError(msg)
    return float(value)


def _emit_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _write_text(path: str, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_sdf(args) -> int:
    mask = load_mask(args.mask)
    sdf = signed_distance(binary_from_labels(mask, args.cls))
    save_sdf(sdf, args.output)
    logger.info("signed distance field written to %s", args.output)
    return EXIT_OK


def cmd_band(args) -> int:
    mask = load_mask(args.mask)
    band = band_mask(signed_distance(binary_from_labels(mask, args.cls)), args.band)
    labels = np.full(mask.shape, BAND_OFF, dtype=np.int64)
    labels[band.outer.bits] = BAND_OUTER
    labels[band.inner.bits] = BAND_INNER
    save_mask(LabelMask(labels, 3), args.output)
    _emit_json({
        "half_width": band.half_width,
        "inner_pixels": band.inner.count(),
        "outer_pixels": band.outer.count(),
        "band_pixels": band.pixel_count(),
        "empty": band.empty,
    })
    return EXIT_OK


def cmd_loss(args) -> int:
    cfg = load_loss_config(args.config) if args.config else LossConfig()
    truth = load_mask(args.truth)
    if args.pred_labels:
        pred_mask = load_mask(args.pred)
        probs = one_hot(LabelMask(pred_mask.labels, max(pred_mask.num_classes, truth.num_classes)))
        truth = LabelMask(truth.labels, probs.num_classes)
    else:
        if truth.num_classes != 2:
            raise InvalidConfig("a probability image only describes two classes; use --pred-labels")
        probs = probmap_from_foreground(load_image(args.pred))

    if args.kind == "osc":
        _emit_json(osc_loss(probs, truth, cfg).to_dict())
    else:
        value, _ = multiclass_baseline(args.kind, probs, truth, cfg, smooth=args.dice_smooth)
        _emit_json({"kind": args.kind, "value": value})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_loss_config(args.config) if args.config else LossConfig(phi_mode="soft")
    probs, labels = random_grad_check_case(args.size, args.seed)
    error = grad_check(probs, labels, cfg, h=args.h, samples=args.samples)
    passed = error < GRAD_CHECK_TOLERANCE
    _emit_json({"size": args.size, "seed": args.seed, "h": args.h,
                "max_rel_error": error, "passed": passed})
    if not passed:
        logger.error("gradient check failed: max relative error %.3e >= %g", error, GRAD_CHECK_TOLERANCE)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fit(args) -> int:
    job = load_fit_job(args.spec)
    image: Optional[ScalarField] = None
    if job.synth is not None:
        sample = synth_generate(job.synth)
        image, target, truth = sample.image, sample.noisy, sample.truth
    else:
        target = truth = load_mask(job.truth)
        if job.image:
            image = load_image(job.image)

    trace = fit_logits(image, target, job.fit, truth=truth)
    _write_text(args.output, trace.to_csv())
    if args.prediction:
        save_mask(trace.prediction(), args.prediction)
    _emit_json(fit_summary(trace, truth))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    sample = synth_generate(spec)
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out}: {e}") from e

    save_field(sample.image, out / "image.pgm")
    save_mask(sample.truth, out / "truth.pgm")
    save_mask(sample.noisy, out / "noisy.pgm")
    _emit_json({
        "kind": spec.kind,
        "seed": spec.seed,
        "achieved_fraction": sample.achieved_fraction,
        "flipped_pixels": int((sample.noisy.labels != sample.truth.labels).sum()),
        "files": ["image.pgm", "truth.pgm", "noisy.pgm"],
    })
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = load_mask(args.pred)
    truth = load_mask(args.truth)
    per_class, macro = evaluate_labels(pred, truth)
    image_id = args.image_id or Path(args.pred).stem
    sys.stdout.write(report_csv(image_id, per_class, macro if len(per_class) > 1 else None))
    return EXIT_OK


def _read_curve(path: str) -> List[List[float]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = [row for row in csv.reader(f) if row and any(cell.strip() for cell in row)]
    except OSError as e:
        raise IoFailure(f"cannot read curve {path}: {e}") from e

    points = []
    for number, row in enumerate(rows, start=1):
        try:
            points.append([float(row[0]), float(row[1])])
        except (ValueError, IndexError):
            if number == 1:
                # header line
                continue
            raise DegenerateCurve(f"{path}: line {number} is not an x,y pair: {','.join(row)}")
    return points


def cmd_offset(args) -> int:
    poly = polyline_from_rows(_read_curve(args.curve), closed=True)
    result = offset_polyline(poly, args.band, args.direction)
    _emit_json(result.to_dict())
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = load_experiment_spec(args.spec)
    if args.workers is not None:
        if args.workers < 1:
            raise InvalidConfig(f"--workers must be >= 1, got {args.workers}")
        spec = spec.model_copy(update={"workers": args.workers})
    _write_text(args.output, run_experiment(spec))
    logger.info("experiment report written to %s", args.output)
    return EXIT_OK


def cmd_summary(args) -> int:
    sys.stdout.write(summarize_file(args.report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog="osc", description="Offset Curves segmentation loss toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress with timestamps")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("sdf", help="signed distance field of a mask (16-bit PGM)")
    p.add_argument("mask")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--class", dest="cls", type=int, default=1)
    p.set_defaults(handler=cmd_sdf)

    p = sub.add_parser("band", help="offset band of a mask (0 off, 1 outer, 2 inner)")
    p.add_argument("mask")
    p.add_argument("-B", "--band", type=_band_width, required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--class", dest="cls", type=int, default=1)
    p.set_defaults(handler=cmd_band)

    p = sub.add_parser("loss", help="evaluate a loss on a prediction")
    p.add_argument("pred", help="foreground probability image, or a label mask with --pred-labels")
    p.add_argument("truth")
    p.add_argument("--kind", choices=LOSS_KINDS, default="osc")
    p.add_argument("--config", help="LossConfig JSON")
    p.add_argument("--pred-labels", action="store_true")
    p.add_argument("--dice-smooth", type=float, default=1.0)
    p.set_defaults(handler=cmd_loss)

    p = sub.add_parser("grad-check", help="finite-difference check of the OsC gradient")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=GRAD_CHECK_SAMPLES)
    p.add_argument("--config", help="LossConfig JSON (phi_mode must be soft)")
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("fit", help="fit free logits to a target")
    p.add_argument("--spec", required=True)
    p.add_argument("-o", "--output", required=True, help="trace CSV")
    p.add_argument("--prediction", help="write the final label mask here")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("synth", help="generate a synthetic sample")
    p.add_argument("--spec", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("metrics", help="per-class segmentation metrics as CSV")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--image-id")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("offset", help="parallel curve of a closed polyline")
    p.add_argument("--curve", required=True, help="CSV of x,y vertices")
    p.add_argument("-B", "--band", type=_band_width, required=True)
    p.add_argument("--direction", choices=(INWARD, OUTWARD), default=INWARD)
    p.set_defaults(handler=cmd_offset)

    p = sub.add_parser("experiment", help="compare losses over seeds")
    p.add_argument("--spec", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("summary", help="per-loss means of an experiment report")
    p.add_argument("report")
    p.set_defaults(handler=cmd_summary)

    return parser


def configure_logging(verbose: bool) -> None:
    if verbose:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                            format="%(asctime)s %(levelname)s: %(message)s")
    else:
        logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                            format="%(levelname)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except OscError as e:
        logger.error("%s: %s", args.command, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
