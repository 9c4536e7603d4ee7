"""Command-line entry point.

One subcommand per operation: merge, importance, spectral, inject, inspect,
experiment, plus serve for the HTTP front end. By default every command runs
in process; ``--server URL`` sends the same request to a running service
instead. Logs go to standard error; machine output goes to the declared
files, or to standard output when no file was declared. Exit status is 0
only when every declared output was fully written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import workflows
from .concurrency import THREADS_ENV, resolve_threads
from .errors import (
    ConsistencyError,
    FormatError,
    GradmergeError,
    IoError,
    TensorLookupError,
    ValidationError,
)
from .recipes import load_json_object

logger = logging.getLogger("gradmerge")

_CATEGORY_ERRORS = {
    "format": FormatError,
    "consistency": ConsistencyError,
    "validation": ValidationError,
    "io": IoError,
    "lookup": TensorLookupError,
}

_MERGE_OVERRIDE_KEYS = (
    "base",
    "task_model",
    "reasoning_model",
    "task_importance",
    "reasoning_importance",
    "p_t",
    "p_r",
    "lambda_t",
    "lambda_r",
    "scope",
    "zero_policy",
    "include_patterns",
    "exclude_patterns",
    "dtype_policy",
    "seed",
    "density",
    "drop_rate",
    "weights",
    "output",
    "report_output",
)


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.setLevel(logging.INFO)
    logger.handlers[:] = [handler]
    logger.propagate = False


def _print_doc(doc: object) -> None:
    print(json.dumps(doc, indent=1))


def _post(server: str, route: str, payload: dict) -> dict:
    import httpx

    url = server.rstrip("/") + route
    try:
        resp = httpx.post(url, json=payload, timeout=600.0)
    except httpx.HTTPError as exc:
        raise IoError(f"cannot reach server {server}: {exc}") from None
    if resp.status_code != 200:
        try:
            doc = resp.json()
        except ValueError:
            doc = {}
        category = doc.get("category", "io")
        message = doc.get("message") or f"server returned status {resp.status_code}"
        raise _CATEGORY_ERRORS.get(category, IoError)(message)
    return resp.json()


def _add_threads_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads for tensor-level parallelism (default: ${THREADS_ENV} or 1)",
    )


def _add_server_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--server",
        default=None,
        metavar="URL",
        help="send this command to a running service instead of executing in process",
    )


def _cmd_merge(args: argparse.Namespace) -> int:
    overrides = {
        key: getattr(args, key) for key in _MERGE_OVERRIDE_KEYS
        if getattr(args, key) is not None
    }
    recipe_obj = load_json_object(args.recipe, "recipe")
    if args.server:
        doc = _post(
            args.server,
            "/v1/merge",
            {
                "recipe": recipe_obj,
                "overrides": overrides,
                "threads": resolve_threads(args.threads),
            },
        )
        logger.info("server wrote %s", doc["output"])
    else:
        doc = workflows.merge_op(recipe_obj, overrides, args.threads)
    if not doc.get("report_output"):
        _print_doc(doc["report"])
    return 0


def _cmd_importance(args: argparse.Namespace) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/v1/importance",
            {
                "model": args.model,
                "calib": args.calib,
                "out": args.out,
                "samples": args.samples,
            },
        )
        logger.info("server wrote %s", doc["output"])
    else:
        workflows.importance_op(args.model, args.calib, args.out, args.samples)
    return 0


def _cmd_spectral(args: argparse.Namespace) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/v1/spectral",
            {
                "grads": args.grads,
                "pattern": args.pattern,
                "out": args.out,
                "csv": args.csv,
                "model_id": args.model_id,
                "singular_values": args.singular_values,
                "threads": resolve_threads(args.threads),
            },
        )
    else:
        doc = workflows.spectral_op(
            args.grads,
            pattern=args.pattern,
            out=args.out,
            csv_out=args.csv,
            model_id=args.model_id,
            keep_singular_values=args.singular_values,
            threads=args.threads,
        )
    if not args.out:
        _print_doc(doc["report"])
    return 0


def _cmd_inject(args: argparse.Namespace) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/v1/inject",
            {
                "base": args.base,
                "donor": args.donor,
                "importance": args.importance,
                "p": args.p,
                "direction": args.direction,
                "output": args.output,
                "lambda": args.lam,
                "scope": args.scope,
                "zero_policy": args.zero_policy,
                "include_patterns": args.include_patterns,
                "exclude_patterns": args.exclude_patterns,
                "dtype_policy": args.dtype_policy,
                "report_output": args.report_output,
                "threads": resolve_threads(args.threads),
            },
        )
        logger.info("server wrote %s", doc["output"])
    else:
        doc = workflows.inject_op(
            args.base,
            args.donor,
            args.importance,
            args.p,
            args.direction,
            args.output,
            lam=args.lam,
            scope=args.scope,
            zero_policy=args.zero_policy,
            include_patterns=args.include_patterns,
            exclude_patterns=args.exclude_patterns,
            dtype_policy=args.dtype_policy,
            report_output=args.report_output,
            threads=args.threads,
        )
    if not doc.get("report_output"):
        _print_doc(doc["report"])
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    if args.server:
        doc = _post(args.server, "/v1/inspect", {"checkpoint": args.checkpoint})
    else:
        doc = workflows.inspect_op(args.checkpoint)
    _print_doc(doc)
    return 0


def _cmd_experiment(args: argparse.Namespace) -> int:
    config_obj = load_json_object(args.config, "experiment config")
    if args.server:
        doc = _post(
            args.server,
            "/v1/experiment",
            {
                "config": config_obj,
                "kind": args.kind,
                "out_dir": args.out_dir,
                "threads": resolve_threads(args.threads),
            },
        )
        for path in doc["files"]:
            logger.info("server wrote %s", path)
    else:
        doc = workflows.experiment_op(config_obj, args.kind, args.out_dir, args.threads)
    if not args.out_dir:
        _print_doc(doc["tables"])
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradmerge",
        description="Checkpoint merging, gradient importance, and spectral diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    merge = sub.add_parser(
        "merge",
        help="merge checkpoints according to a JSON recipe",
        description="Merge checkpoints according to a JSON recipe. "
        "Flags override the matching recipe fields; each override is logged.",
    )
    merge.add_argument("recipe", help="path to the recipe JSON file")
    merge.add_argument("--base", default=None, help="override: base checkpoint path")
    merge.add_argument("--task-model", default=None, help="override: task checkpoint path")
    merge.add_argument(
        "--reasoning-model", default=None, help="override: reasoning checkpoint path"
    )
    merge.add_argument(
        "--task-importance", default=None, help="override: task importance file path"
    )
    merge.add_argument(
        "--reasoning-importance",
        default=None,
        help="override: reasoning importance file path",
    )
    merge.add_argument("--p-t", type=float, default=None, help="override: task selection ratio")
    merge.add_argument(
        "--p-r", type=float, default=None, help="override: reasoning selection ratio"
    )
    merge.add_argument(
        "--lambda-t", type=float, default=None, help="override: task scaling factor"
    )
    merge.add_argument(
        "--lambda-r", type=float, default=None, help="override: reasoning scaling factor"
    )
    merge.add_argument(
        "--scope",
        choices=("global", "per_tensor"),
        default=None,
        help="override: selection ranking scope",
    )
    merge.add_argument(
        "--zero-policy",
        choices=("include", "exclude_zero"),
        default=None,
        help="override: handling of exactly-zero importance scores",
    )
    merge.add_argument(
        "--include-patterns",
        action="append",
        default=None,
        metavar="GLOB",
        help="override: only merge tensors matching this pattern (repeatable)",
    )
    merge.add_argument(
        "--exclude-patterns",
        action="append",
        default=None,
        metavar="GLOB",
        help="override: never merge tensors matching this pattern (repeatable)",
    )
    merge.add_argument(
        "--dtype-policy",
        choices=("keep", "f32"),
        default=None,
        help="override: output dtype handling",
    )
    merge.add_argument("--seed", type=int, default=None, help="override: stochastic seed")
    merge.add_argument("--density", type=float, default=None, help="override: trim density")
    merge.add_argument("--drop-rate", type=float, default=None, help="override: drop rate")
    merge.add_argument(
        "--weights",
        type=float,
        nargs="+",
        default=None,
        metavar="W",
        help="override: linear combination weights",
    )
    merge.add_argument("--output", default=None, help="override: output checkpoint path")
    merge.add_argument(
        "--report-output", default=None, help="override: report JSON path"
    )
    _add_threads_flag(merge)
    _add_server_flag(merge)
    merge.set_defaults(func=_cmd_merge)

    importance = sub.add_parser(
        "importance",
        help="compute toy-oracle gradient importance",
        description="Compute mean |gradient| importance for a toy-model "
        "checkpoint over a calibration file.",
    )
    importance.add_argument("--model", required=True, help="toy-model checkpoint path")
    importance.add_argument("--calib", required=True, help="calibration JSON path")
    importance.add_argument("--out", required=True, help="importance checkpoint to write")
    importance.add_argument(
        "--samples",
        type=int,
        default=100,
        help="use at most this many leading calibration samples (default 100)",
    )
    _add_server_flag(importance)
    importance.set_defaults(func=_cmd_importance)

    spectral = sub.add_parser(
        "spectral",
        help="nuclear-norm diagnostics over a gradient dump",
        description="Per-layer singular-value diagnostics for projection "
        "gradient matrices stored in a checkpoint.",
    )
    spectral.add_argument("grads", help="gradient-dump checkpoint path")
    spectral.add_argument(
        "--pattern",
        default=None,
        help="tensor name template with {kind} and {layer} placeholders",
    )
    spectral.add_argument("--out", default=None, help="report JSON path (default: stdout)")
    spectral.add_argument("--csv", default=None, help="also write a flat CSV here")
    spectral.add_argument("--model-id", default="", help="label recorded in the report")
    spectral.add_argument(
        "--singular-values",
        action="store_true",
        help="retain raw singular values in the report",
    )
    _add_threads_flag(spectral)
    _add_server_flag(spectral)
    spectral.set_defaults(func=_cmd_spectral)

    inject = sub.add_parser(
        "inject",
        help="add a masked donor delta onto a base checkpoint",
        description="Select donor parameters by importance rank and add their "
        "delta to the base model.",
    )
    inject.add_argument("--base", required=True, help="base checkpoint path")
    inject.add_argument("--donor", required=True, help="donor checkpoint path")
    inject.add_argument("--importance", required=True, help="importance file path")
    inject.add_argument("--p", type=float, required=True, help="selection ratio in [0, 1]")
    inject.add_argument(
        "--direction",
        choices=("highest", "lowest"),
        required=True,
        help="inject the highest- or lowest-importance parameters",
    )
    inject.add_argument("--output", required=True, help="output checkpoint path")
    inject.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=1.0,
        help="delta scaling factor (default 1.0)",
    )
    inject.add_argument(
        "--scope",
        choices=("global", "per_tensor"),
        default="global",
        help="selection ranking scope",
    )
    inject.add_argument(
        "--zero-policy",
        choices=("include", "exclude_zero"),
        default="include",
        help="handling of exactly-zero importance scores",
    )
    inject.add_argument(
        "--include-patterns",
        action="append",
        default=None,
        metavar="GLOB",
        help="only touch tensors matching this pattern (repeatable)",
    )
    inject.add_argument(
        "--exclude-patterns",
        action="append",
        default=None,
        metavar="GLOB",
        help="never touch tensors matching this pattern (repeatable)",
    )
    inject.add_argument(
        "--dtype-policy",
        choices=("keep", "f32"),
        default="keep",
        help="output dtype handling",
    )
    inject.add_argument("--report-output", default=None, help="report JSON path")
    _add_threads_flag(inject)
    _add_server_flag(inject)
    inject.set_defaults(func=_cmd_inject)

    inspect = sub.add_parser(
        "inspect",
        help="list a checkpoint's tensors and metadata",
        description="Print tensor names, dtypes, shapes, and file metadata as JSON.",
    )
    inspect.add_argument("checkpoint", help="checkpoint path")
    _add_server_flag(inspect)
    inspect.set_defaults(func=_cmd_inspect)

    experiment = sub.add_parser(
        "experiment",
        help="run the toy-model experiments",
        description="Train seeded toy models and tabulate injection and "
        "merge-comparison results.",
    )
    experiment.add_argument("config", help="experiment config JSON path")
    experiment.add_argument(
        "--kind",
        choices=("additive", "comparison", "both"),
        default="both",
        help="which experiment tables to produce (default both)",
    )
    experiment.add_argument(
        "--out-dir",
        default=None,
        help="write JSON and CSV tables here (default: JSON to stdout)",
    )
    _add_threads_flag(experiment)
    _add_server_flag(experiment)
    experiment.set_defaults(func=_cmd_experiment)

    serve = sub.add_parser(
        "serve",
        help="run the HTTP service",
        description="Serve every operation over HTTP for remote CLI use.",
    )
    serve.add_argument("--host", default="127.0.0.1", help="bind address")
    serve.add_argument("--port", type=int, default=8121, help="bind port")
    serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except GradmergeError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
