"""``ged`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .data import FILTER_THRESHOLDS, GridDomain, ingest
from .errors import GedError
from .evaluation import MODEL_KINDS, render_report
from .pipeline import (
    Run,
    load_config,
    load_report,
    run_evaluate,
    run_finetune,
    run_nowcast,
    run_train_baseline,
    run_train_diffusion,
    run_train_postprocess,
    summary_lines,
)
from .synth import SynthConfig, synth_generate

log = logging.getLogger("ged")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--filter", choices=sorted(FILTER_THRESHOLDS), default=default,
                        help="rain-fraction selection of sequences")
    parser.add_argument("--rain-threshold", type=float, default=default,
                        help="rain/no-rain cut for binary metrics, metres (strictly greater)")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="torch CPU threads (1 keeps runs bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _grid_flags(p):
    p.add_argument("--grid", type=int, nargs=2, default=(105, 173), metavar=("H", "W"),
                   help="selection window size")
    p.add_argument("--crop", type=int, nargs=2, default=(96, 96), metavar=("H", "W"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="ged", description="Generative ensemble diffusion nowcasting")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic store")
    p.add_argument("--out", required=True)
    p.add_argument("--hours", type=int, default=2000)
    p.add_argument("--start", default="2020-10-01T00")
    _grid_flags(p)

    p = sub.add_parser("ingest", parents=[common], help="build a store from .npz/.nc files")
    p.add_argument("sources", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-gaps", action="store_true")
    _grid_flags(p)

    p = sub.add_parser("train-diffusion", parents=[common], help="train the noise predictor")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory to create")

    for verb, text in (("finetune", "continue training at reduced rates"),
                       ("train-postprocess", "train the ensemble post-processor"),
                       ("train-baseline", "train the direct-regression U-Net")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("nowcast", parents=[common], help="forecast the 3 hours after a timestamp")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--at", required=True, help="issue time, e.g. 2021-03-05T07")
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--agg", choices=("single", "mean", "postprocess"), default="mean")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="score models on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--models", default="single,mean,persistence",
                   help=f"comma-separated subset of {','.join(MODEL_KINDS)}")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="render CSV/JSON/plots from evaluations")
    p.add_argument("inputs", nargs="+", help="eval_*.npz files or directories holding them")
    p.add_argument("--out", required=True)
    return parser


def _flag_overrides(args) -> dict:
    return {"seed": args.seed, "filter": args.filter, "rain_threshold": args.rain_threshold}


def _config(args, checkpoint=None):
    base = Run.stored_config(checkpoint) if checkpoint else None
    return load_config(args.config, base=base, **_flag_overrides(args))


def _domain(args) -> GridDomain:
    return GridDomain(full_size=tuple(args.grid), crop_size=tuple(args.crop))


def _report_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("eval_*.npz")) if p.is_dir() else [p])
    if not files:
        raise GedError("no eval_*.npz files found")
    return files


def run(args) -> int:
    verb = args.verb
    if verb == "synth":
        cfg = SynthConfig(domain=_domain(args), n_hours=args.hours, seed=args.seed or 0, start=args.start)
        store = synth_generate(args.out, cfg)
        print(f"wrote {store.path} ({store.hours.size} hours)")
    elif verb == "ingest":
        store = ingest(args.sources, args.out, _domain(args), allow_gaps=args.allow_gaps)
        print(f"wrote {store.path} ({store.hours.size} hours, {len(store.manifest['gaps'])} gaps)")
    elif verb == "train-diffusion":
        r = run_train_diffusion(args.store, args.out, _config(args))
        print(f"denoiser saved in {r.path}")
    elif verb == "finetune":
        print(json.dumps(run_finetune(args.checkpoint, _config(args, args.checkpoint))))
    elif verb == "train-postprocess":
        r = run_train_postprocess(args.checkpoint, _config(args, args.checkpoint))
        print(f"post-processor saved in {r.path}")
    elif verb == "train-baseline":
        r = run_train_baseline(args.checkpoint, _config(args, args.checkpoint))
        print(f"baseline saved in {r.path}")
    elif verb == "nowcast":
        files = run_nowcast(args.checkpoint, args.at, args.out, args.members, args.agg,
                            _config(args, args.checkpoint), plots=not args.no_plots)
        print(f"forecast written to {files['forecast']}")
    elif verb == "evaluate":
        models = [m.strip() for m in args.models.split(",") if m.strip()]
        reports = run_evaluate(args.checkpoint, args.out, models, _config(args, args.checkpoint))
        print("\n".join(summary_lines(reports)))
    elif verb == "report":
        reports = [load_report(f) for f in _report_inputs(args.inputs)]
        files = render_report(reports, args.out)
        print(f"wrote {files['csv']}, {files['json']} and {len(files['plots'])} plots")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return run(args)
    except GedError as err:
        print(f"ged {args.verb}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
