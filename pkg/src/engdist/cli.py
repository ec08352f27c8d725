"""Command-line pipeline: simulate -> dp -> train -> eval -> rank.

Every command is deterministic given its arguments and seeds, echoes its
arguments as a one-line JSON manifest on stdout, and exits with 0 on
success, 2 on validation errors, 3 on data errors, and 4 on convergence or
divergence failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import dataio, evaluate, qrlearn, ranker
from .distdp import DiscountSpec, MODES, solve_fixed_point
from .errors import (ConvergenceError, DataFormatError,
                     TrainingDivergedError, ValidationError)
from .simenv import generate_logs

VARIANTS = ("FD", "RR", "Proposed")

_CONFIG_FLAGS = {
    # flag dest -> TrainingConfig field
    "seed": "seed",
    "eta": "eta",
    "quantiles": "n_quantiles",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "target_copy": "target_copy_period",
    "epochs": "epochs",
    "kappa": "kappa",
    "grad_clip": "grad_clip",
}


def _echo_manifest(args: argparse.Namespace) -> dict:
    """Print the full invocation to stdout; return the provenance dict that
    gets embedded in output files.

    Output destinations are excluded from the embedded copy so that repeated
    runs stay byte-identical regardless of where they write.
    """
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    print(json.dumps({"command": args.command, "args": doc},
                     separators=(",", ":")))
    embedded = {k: v for k, v in doc.items() if k not in ("out", "trace")}
    return {"command": args.command, "args": embedded}


def _load_training_config(args: argparse.Namespace
                          ) -> tuple[qrlearn.TrainingConfig, int, tuple[int, ...]]:
    """Defaults < config file < command-line flags.

    The config JSON mirrors TrainingConfig (every field optional) and may
    also carry the model-shape keys ``embedding_dim`` and ``hidden_sizes``.
    """
    doc = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(
                    f"{args.config}: bad JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataFormatError(f"{args.config}: config must be an object")
    embedding_dim = int(doc.pop("embedding_dim", 32))
    hidden_sizes = tuple(int(v) for v in doc.pop("hidden_sizes", (64, 64)))
    known = {f.name for f in dataclasses.fields(qrlearn.TrainingConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(
            f"unknown config keys: {sorted(unknown)} (known: {sorted(known)})")
    config = qrlearn.TrainingConfig(**doc)
    overrides = {field: getattr(args, flag)
                 for flag, field in _CONFIG_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config, embedding_dim, hidden_sizes


def cmd_simulate(args: argparse.Namespace) -> int:
    manifest = _echo_manifest(args)
    mdp = dataio.read_mdp_spec(args.mdp)
    logs = generate_logs(mdp, args.sessions, args.seed or 0)
    dataio.write_logs(args.out, logs)
    return 0


def cmd_dp(args: argparse.Namespace) -> int:
    manifest = _echo_manifest(args)
    mdp = dataio.read_mdp_spec(args.mdp)
    disc = DiscountSpec.for_mdp(mdp, args.eta, args.mode)
    result = solve_fixed_point(mdp, disc, args.quantiles, args.tol,
                               args.max_iter)
    dataio.write_value_table(args.out, result.table, provenance=manifest)
    trace_path = args.trace or f"{args.out}.trace.json"
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump({"distances": result.distances,
                   "iterations": result.iterations,
                   "provenance": manifest}, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    manifest = _echo_manifest(args)
    logs = dataio.read_logs(args.logs)
    config, embedding_dim, hidden_sizes = _load_training_config(args)
    if args.variant == "FD":
        config = dataclasses.replace(config, n_quantiles=1)
        objective, term_head = "squared", False
    elif args.variant == "RR":
        objective, term_head = "quantile", False
    else:
        objective, term_head = "quantile", True
    data = qrlearn.TransitionBatch.from_transitions(logs)
    model_config = qrlearn._infer_model_config(
        data, term_head=term_head, embedding_dim=embedding_dim,
        hidden_sizes=hidden_sizes)
    result = qrlearn.train(logs, config, model_config=model_config,
                           objective=objective)
    dataio.save_model(args.out, result.model, objective=objective,
                      training_config=dataclasses.asdict(config),
                      provenance=manifest)
    trace_path = args.trace or f"{args.out}.trace.csv"
    dataio.write_trace_csv(trace_path, result.trace)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = _echo_manifest(args)
    if not args.mdp and not args.logs:
        raise ValidationError("eval needs --mdp, --logs, or both")
    model, model_manifest = dataio.load_model(args.model)
    eta = args.eta
    if eta is None:
        tc = model_manifest.get("training_config") or {}
        eta = float(tc.get("eta", 0.95))
    report = evaluate.evaluate_model(
        model,
        mdp=dataio.read_mdp_spec(args.mdp) if args.mdp else None,
        logs=dataio.read_logs(args.logs) if args.logs else None,
        eta=eta, w=args.w, n_sessions=args.sessions, seed=args.seed or 0,
        mc_rollouts=args.oracle_rollouts, min_visits=args.min_visits)
    report["provenance"] = manifest
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    _echo_manifest(args)
    model, _ = dataio.load_model(args.model)
    with open(args.requests, "r", encoding="utf-8") as fh, \
            open(args.out, "w", encoding="utf-8") as out:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                state = doc["state"]
                if isinstance(state, list):
                    state = tuple(int(v) for v in state)
                else:
                    state = int(state)
                candidates = [(int(c["action"]), float(c["base"]))
                              for c in doc["candidates"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
            items = ranker.rank(state, candidates, model, args.w)
            out.write(json.dumps(
                {"items": [dataclasses.asdict(it) for it in items]},
                separators=(",", ":")))
            out.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="engdist",
        description="Long-term engagement modeling: session simulation, "
                    "exact quantile dynamic programming, quantile-regression "
                    "training, evaluation, and ranking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate session logs from an MDP spec")
    p.add_argument("mdp", help="MDP spec JSON path")
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output log JSONL path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dp", help="solve the value-distribution fixed point")
    p.add_argument("mdp")
    p.add_argument("--eta", type=float, default=0.95)
    p.add_argument("--quantiles", type=int, default=64)
    p.add_argument("--mode", choices=MODES, default="termination-aware")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--out", required=True, help="value-table JSON path")
    p.add_argument("--trace", default=None,
                   help="convergence trace path (default <out>.trace.json)")
    p.set_defaults(func=cmd_dp)

    p = sub.add_parser("train", help="train a model on logged transitions")
    p.add_argument("logs", help="transition log JSONL path")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--variant", choices=VARIANTS, default="Proposed")
    p.add_argument("--out", required=True, help="model container path")
    p.add_argument("--trace", default=None,
                   help="loss trace CSV path (default <out>.trace.csv)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--quantiles", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--target-copy", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--mdp", default=None, help="MDP spec for simulation metrics")
    p.add_argument("--logs", default=None, help="logs for calibration metrics")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--sessions", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, default=None,
                   help="default: eta echoed in the model manifest")
    p.add_argument("--oracle-rollouts", type=int, default=0,
                   help="Monte Carlo rollouts per pair for W1 metrics (0=skip)")
    p.add_argument("--min-visits", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="rank candidates from a request file")
    p.add_argument("--model", required=True)
    p.add_argument("--requests", required=True,
                   help="JSONL: {state, candidates:[{action, base}]}")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--out", required=True, help="JSONL response path")
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ConvergenceError, TrainingDivergedError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
