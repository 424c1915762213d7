"""Command-line interface.

Exit codes: 0 success or certified, 2 invalid input or configuration,
3 numerical failure, 4 not certified.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from threadpoolctl import threadpool_limits

from .. import serialize
from ..errors import NumericalError
from .experiment import (RunConfig, StageError, generate_stage, load_or_generate,
                         run_certification, run_experiment, train_stage)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_NOT_CERTIFIED = 0, 2, 3, 4


def _config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.preset(args.model)
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _print(obj):
    sys.stdout.write(serialize.dumps(obj))


def cmd_gen(args):
    cfg = _config(args)
    _, digest, directory = generate_stage(cfg)
    _print({"dataset": directory, "dataset_hash": digest})
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    dataset, digest, _ = load_or_generate(cfg)
    seed = cfg.train["seeds"][0]
    _, report, model_hash = train_stage(cfg, dataset, digest, seed, cfg.out)
    _print({"model": os.path.join(cfg.out, "model.json"), "model_hash": model_hash,
            "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss})
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    report = run_experiment(cfg)
    _print({"rmse": report["rmse"], "jrn_rmse_median": report["jrn_rmse_median"]})
    return EXIT_OK


def cmd_report(args):
    cfg = _config(args)
    path = os.path.join(cfg.out, "report.json")
    if not os.path.exists(path):
        run_experiment(cfg)
    with open(path) as fh:
        report = json.load(fh)
    report.pop("error_curves", None)
    _print(report)
    return EXIT_OK


def cmd_certify(args):
    cfg = _config(args)
    model_path = args.model_file or os.path.join(cfg.out, "model.json")
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = run_certification(cfg, model_path, log=log)
    with open(os.path.join(cfg.out, "certificate_summary.txt")) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK if result["cascade"]["status"] == "certified" else EXIT_NOT_CERTIFIED


def cmd_verify_query(args):
    from ..verifier import falsify, parse_smtlib

    with open(args.query) as fh:
        query = parse_smtlib(fh.read())
    result = falsify(query, max_boxes=args.max_boxes)
    out = {"status": result.status,
           "stats": {k: v for k, v in result.stats.items() if k != "seconds"}}
    if result.point is not None:
        out.update(point=dict(zip(query.variables, result.point.tolist())),
                   condition=result.condition, value=result.value)
    _print(out)
    return EXIT_OK if result.unsat else EXIT_NOT_CERTIFIED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--model", default="mass_spring",
                        help="preset used when no --config is given")
    common.add_argument("--seed", type=int, help="override the training and certification seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")

    parser = argparse.ArgumentParser(prog="jrn-iss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the dataset").set_defaults(fun=cmd_gen)
    sub.add_parser("train", parents=[common], help="train one seed").set_defaults(fun=cmd_train)
    sub.add_parser("eval", parents=[common],
                   help="train every seed, run the filters, write the report"
                   ).set_defaults(fun=cmd_eval)
    sub.add_parser("report", parents=[common],
                   help="print the comparison report").set_defaults(fun=cmd_report)
    cert = sub.add_parser("certify", parents=[common], help="certify a trained model")
    cert.add_argument("--model-file", help="model JSON (default <out>/model.json)")
    cert.add_argument("-v", "--verbose", action="store_true")
    cert.set_defaults(fun=cmd_certify)
    vq = sub.add_parser("verify-query", parents=[common], help="falsify an SMT-LIB2 query")
    vq.add_argument("query")
    vq.add_argument("--max-boxes", type=int, default=1_000_000)
    vq.set_defaults(fun=cmd_verify_query)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, KeyError, OSError)):
        return EXIT_INVALID
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.fun(args)
    except (StageError, NumericalError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
