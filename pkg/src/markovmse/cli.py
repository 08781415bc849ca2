"""Command-line interface: ``markovmse {fit,select,simulate,study,detect,equiv-check}``.

Exit codes: 0 success, 1 input/output or parse error, 2 invalid request,
3 numerical failure (including fits that did not converge).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .generator import ModelSpec, parse_interactions
from .likelihood import FitError, fit, profile_ci
from .liststate import TableFormatError, load_dataset, read_table, serialize_table
from .loglinear import LogLinearSpec, ll_fit, ll_profile_ci, loglinear_to_markov, markov_to_loglinear
from .matexp import ProbabilityError
from .selection import SelectionStrategy, detect_absorbing, forced_absorbing_set, stepwise
from .simulate import (
    ABSORBING_METHODS,
    COMPARISON_MODES,
    DEFAULT_ABSORBING_METHODS,
    DEFAULT_REPLICATES,
    Scenario,
    get_scenario,
    run_absorbing_study,
    run_comparison_study,
    run_detection_study,
    simulate_counts,
)

OUTPUT_SCHEMA = 1
EQUIV_TOL = 1e-6

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

STRATEGIES = {
    "true": "true_model",
    "forward": "forward",
    "acc-forward": "accelerated_forward",
    "backward": "backward",
    "acc-backward": "accelerated_backward",
    "acc-backward-forward": "accelerated_backward_forward",
    "all": "all_models",
    "one-step": "accelerated_forward",
}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------- helpers


def _load_table(args):
    if args.data and args.input:
        raise CLIError("give either --data or --input, not both", EXIT_INVALID)
    if args.data:
        try:
            return load_dataset(args.data)
        except ValueError as exc:
            raise CLIError(str(exc), EXIT_INVALID)
    if args.input:
        try:
            return read_table(args.input)
        except OSError as exc:
            raise CLIError(f"cannot read {args.input}: {exc}", EXIT_IO)
        except TableFormatError as exc:
            raise CLIError(f"{args.input}: {exc}", EXIT_IO)
    raise CLIError("a table is required (--data NAME or --input PATH)", EXIT_INVALID)


def _ordered_pair(text: str):
    parts = text.replace("->", ":").split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected I:J")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError("expected integers I:J") from None


def _interactions(text: Optional[str]):
    if not text or text.lower() == "none":
        return ()
    try:
        return parse_interactions(text)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_INVALID)


def _spec(args, k: int):
    """Markov or log-linear spec from the topology and interaction flags."""
    ints = _interactions(args.interactions)
    if getattr(args, "spec", None):
        try:
            d = json.loads(Path(args.spec).read_text())
        except OSError as exc:
            raise CLIError(f"cannot read {args.spec}: {exc}", EXIT_IO)
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.spec}: {exc}", EXIT_IO)
        cls = ModelSpec if args.framework == "markov" else LogLinearSpec
        return cls.from_dict(d)
    if args.framework == "markov":
        if args.absorbing is not None:
            return ModelSpec.absorbing_list(k, args.absorbing, ints)
        if args.ordered is not None:
            return ModelSpec.ordered_pair(k, *args.ordered, ints)
        return ModelSpec.standard(k, ints)
    forced = _interactions(getattr(args, "forced", None))
    if getattr(args, "forced_absorbing", False):
        if args.absorbing is None:
            raise CLIError("--forced-absorbing needs --absorbing", EXIT_INVALID)
        forced = tuple(set(forced) | set(forced_absorbing_set(k, args.absorbing)))
    return LogLinearSpec(k, tuple(set(ints) | set(forced)), forced)


def _envelope(kind: str, payload: dict) -> dict:
    return {"schema": OUTPUT_SCHEMA, "version": __version__, "kind": kind, **payload}


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    return x


def _write_json(path, obj) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CLIError(f"cannot write {path}: {exc}", EXIT_IO)


def _require_seed(args):
    if args.seed is None:
        raise CLIError("--seed is required for stochastic commands", EXIT_INVALID)


# ------------------------------------------------------------ commands


def cmd_fit(args) -> int:
    table = _load_table(args)
    spec = _spec(args, table.k)
    if args.framework == "markov":
        res = fit(table, spec, n_starts=args.starts, level=args.level)
        if args.ci == "profile":
            res.ci_N = profile_ci(table, spec, args.level, fit_result=res)
            res.ci_method = "profile"
    else:
        res = ll_fit(table, spec, naive=not args.exclude_structural, level=args.level)
        if args.ci == "profile":
            res.ci_N = ll_profile_ci(table, spec, args.level, naive=not args.exclude_structural)
            res.ci_method = "profile"
    if args.ci == "none":
        res.ci_N, res.ci_method = None, ""
    print(res.summary())
    _write_json(args.output, _envelope("fit", {"result": res.to_dict()}))
    if not res.converged:
        print("fit did not reach the gradient tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_select(args) -> int:
    table = _load_table(args)
    spec = _spec(args, table.k)
    kind = STRATEGIES[args.strategy]
    forced = tuple(spec.forced) if isinstance(spec, LogLinearSpec) else ()
    max_steps = 1 if args.strategy == "one-step" else args.max_steps
    strategy = SelectionStrategy(
        kind, threshold=args.threshold, forced=forced, max_steps=max_steps,
        naive=not args.exclude_structural, n_starts=args.starts,
    )
    trace = stepwise(table, spec, strategy, args.framework)
    print(trace.format_log())
    _write_json(args.output, _envelope("selection", {"trace": trace.to_dict()}))
    return EXIT_OK if trace.final_fit.converged else EXIT_NUMERIC


def cmd_simulate(args) -> int:
    _require_seed(args)
    sc = _scenario(args)
    table = simulate_counts(sc, args.replicate, args.seed)
    text = serialize_table(table)
    if args.output:
        try:
            Path(args.output).write_text(text)
        except OSError as exc:
            raise CLIError(f"cannot write {args.output}: {exc}", EXIT_IO)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _scenario(args) -> Scenario:
    if getattr(args, "scenario_file", None):
        try:
            return Scenario.from_dict(json.loads(Path(args.scenario_file).read_text()))
        except OSError as exc:
            raise CLIError(f"cannot read {args.scenario_file}: {exc}", EXIT_IO)
        except (json.JSONDecodeError, KeyError) as exc:
            raise CLIError(f"{args.scenario_file}: bad scenario file ({exc})", EXIT_IO)
    try:
        return get_scenario(args.scenario)
    except KeyError as exc:
        raise CLIError(str(exc.args[0]), EXIT_INVALID)


def cmd_study(args) -> int:
    _require_seed(args)
    if args.replicates < 1:
        raise CLIError("--replicates must be at least 1", EXIT_INVALID)
    if args.study == "absorbing":
        methods = tuple(args.methods.split(",")) if args.methods else DEFAULT_ABSORBING_METHODS
        report = run_absorbing_study(
            _scenario(args), methods, args.replicates, args.seed, args.threads
        )
    elif args.study == "comparison":
        ms = [int(x) for x in args.interactions.split(",")] if args.interactions else [1, 2, 3, 4, 5, 6]
        report = run_comparison_study(ms, args.mode, args.replicates, args.seed, args.threads)
    else:
        scen = args.scenario.split(",") if args.scenario else ["1", "4"]
        report = run_detection_study(scen, args.replicates, args.seed, args.threads)
    print(report.format_summary())
    try:
        for p in report.write(args.out_dir):
            print(f"wrote {p}", file=sys.stderr)
    except OSError as exc:
        raise CLIError(f"cannot write to {args.out_dir}: {exc}", EXIT_IO)
    return EXIT_OK


def cmd_detect(args) -> int:
    table = _load_table(args)
    ranking = detect_absorbing(table, include_loglinear=not args.markov_only)
    for model, aic in ranking:
        print(f"{model:6s} AIC {aic:.2f}")
    _write_json(args.output, _envelope("detection", {"ranking": [[m, a] for m, a in ranking]}))
    return EXIT_OK


def cmd_equiv_check(args) -> int:
    table = _load_table(args)
    k = table.k
    mc = fit(table, ModelSpec.standard(k), compute_se=False)
    ll = ll_fit(table, LogLinearSpec(k), compute_se=False)
    d_aic = abs(mc.aic - ll.aic)
    d_N = abs(mc.N_hat - ll.N_hat) / ll.N_hat
    d_cell = max(abs(mc.expected[m] - ll.expected[m]) for m in ll.expected)
    back, N_back = loglinear_to_markov(markov_to_loglinear(mc.params, mc.N_hat))
    d_trip = max(
        float(np.max(np.abs(back.lambdas - mc.params.lambdas))),
        abs(N_back - mc.N_hat) / mc.N_hat,
    )
    checks = {
        "relative_delta_N": d_N,
        "delta_aic": d_aic,
        "max_cell_discrepancy": d_cell,
        "round_trip_error": d_trip,
    }
    for name, v in checks.items():
        print(f"{name:22s} {v:.3e}")
    ok = all(v < EQUIV_TOL for v in checks.values())
    print("equivalent" if ok else "NOT equivalent")
    _write_json(
        args.output,
        _envelope("equivalence", {"checks": checks, "tolerance": EQUIV_TOL, "passed": ok}),
    )
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------- parser


def _table_args(p):
    p.add_argument("--data", help="bundled dataset: stroke or drug")
    p.add_argument("--input", help="path of a table file")
    p.add_argument("--output", "-o", help="write JSON output here")


def _model_args(p):
    p.add_argument("--framework", choices=("markov", "loglinear"), default="markov")
    topo = p.add_mutually_exclusive_group()
    topo.add_argument("--absorbing", type=int, metavar="I", help="list I is absorbing")
    topo.add_argument("--ordered", type=_ordered_pair, metavar="I:J", help="list J requires list I")
    p.add_argument("--spec", help="JSON model spec file (overrides topology flags)")
    p.add_argument("--interactions", help="comma-separated sets, e.g. 14,23,124")
    p.add_argument("--forced", help="log-linear interactions that must stay in the model")
    p.add_argument(
        "--forced-absorbing", action="store_true",
        help="log-linear only: force every pair involving the --absorbing list",
    )
    p.add_argument(
        "--exclude-structural", action="store_true",
        help="log-linear only: leave structural-zero cells out of the fit",
    )
    p.add_argument("--starts", type=int, default=3, help="optimizer starts (Markov)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markovmse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model")
    _table_args(p)
    _model_args(p)
    p.add_argument("--ci", choices=("wald", "profile", "none"), default="wald")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="stepwise AIC model selection")
    _table_args(p)
    _model_args(p)
    p.add_argument("--strategy", choices=tuple(STRATEGIES), default="acc-forward")
    p.add_argument("--threshold", type=float, help="AIC drop required to accept a move")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="draw one table from a scenario")
    p.add_argument("--scenario", default="1", help="1-7, A or B")
    p.add_argument("--scenario-file", help="JSON scenario file")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a simulation study")
    p.add_argument("study", choices=("absorbing", "comparison", "detect"))
    p.add_argument("--scenario", help="absorbing: one scenario; detect: comma-separated list")
    p.add_argument("--scenario-file", help="absorbing: JSON scenario file")
    p.add_argument("--methods", help=f"absorbing: comma-separated from {','.join(ABSORBING_METHODS)}")
    p.add_argument("--interactions", help="comparison: numbers of included interactions, e.g. 1,3")
    p.add_argument("--mode", choices=COMPARISON_MODES, default="accelerated_forward")
    p.add_argument("--replicates", type=int, default=DEFAULT_REPLICATES)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("detect", help="rank absorbing-list hypotheses by AIC")
    _table_args(p)
    p.add_argument("--markov-only", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("equiv-check", help="independence Markov fit versus log-linear fit")
    _table_args(p)
    p.set_defaults(func=cmd_equiv_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "study", None) == "absorbing" and args.scenario is None:
        args.scenario = "1"
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TableFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitError, ProbabilityError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
