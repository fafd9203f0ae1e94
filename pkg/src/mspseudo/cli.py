"""``msa`` command line: run experiments, simulate, estimate, censor.

Logging goes to standard error at the level named by ``MSA_LOG`` (default
WARNING).  CSV results go to standard output unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import io as msio
from .core import validate_dataset
from .errors import ConfigError, MSAError, ParseError, ValidationError
from .estimators import (
    TimeGrid,
    aj_state_occupation,
    aj_transition_probability,
    default_grid,
    lmaj_dynamic_sop,
)
from .experiment import ExperimentError, load_config, run_experiment
from .markov_tests import ca_global_test, logrank_transition_test
from .pseudo import derive_pseudo_values
from .simulate import FAMILIES, apply_incremental_censoring, apply_induced_censoring, family, simulate_cohort

log = logging.getLogger("mspseudo")


def _grid(text):
    try:
        return TimeGrid.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _transition(text):
    try:
        j, k = (int(v) for v in text.replace("->", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a transition like 2,3 or 2->3, got {text!r}") from None
    return j, k


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msa", description="Pseudo-value multi-state survival analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed", type=int, help="override the experiment seed")

    sim = sub.add_parser("simulate", help="simulate a cohort")
    sim.add_argument("--family", required=True, choices=sorted(FAMILIES))
    sim.add_argument("--n", type=int, default=2000)
    sim.add_argument("--tau", type=float)
    sim.add_argument("--censoring-rate", type=float)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")

    est = sub.add_parser("estimate", help="estimators, pseudo values and Markov tests as CSV")
    est.add_argument("what", choices=["aj", "lmaj", "pseudo", "test"])
    est.add_argument("--data", required=True, help="long-format records CSV")
    est.add_argument("--graph", help="graph JSON (inferred from the data when omitted)")
    est.add_argument("--covariates", help="covariates CSV")
    est.add_argument("--grid", type=_grid, help="start:stop:M")
    est.add_argument("--task", choices=["sop", "dynamic-sop", "tp"], default="sop")
    est.add_argument("--landmark-s", type=float)
    est.add_argument("--epsilon", type=int, default=1)
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--method", choices=["ca", "logrank"], default="ca")
    est.add_argument("--transition", type=_transition)
    est.add_argument("--test-choice", choices=["ca", "logrank"])
    est.add_argument("--permutations", type=int, default=500)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", help="write here instead of standard output")

    cen = sub.add_parser("censor", help="apply a high-censoring setting")
    cen.add_argument("setting", choices=["incremental", "induced"])
    cen.add_argument("--data", required=True)
    cen.add_argument("--graph")
    cen.add_argument("--covariates")
    cen.add_argument("--rate", type=float, required=True)
    cen.add_argument("--family", choices=sorted(FAMILIES), help="intensities for new subjects (incremental)")
    cen.add_argument("--seed", type=int, default=0)
    cen.add_argument("--out", required=True, help="output directory")
    return p


def _load(args):
    graph = msio.read_graph(args.graph) if args.graph else None
    ds = msio.read_records(args.data, graph, covariates=getattr(args, "covariates", None))
    return validate_dataset(ds)


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _rows_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    manifest = run_experiment(cfg, args.out, threads=max(1, args.threads))
    print(json.dumps({"status": manifest["status"], "config_hash": manifest["config_hash"]}))


def cmd_simulate(args):
    spec = family(args.family)
    observed, truth = simulate_cohort(spec, args.n, tau=args.tau, censoring_rate=args.censoring_rate, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    msio.write_dataset(observed, out / "records.csv", out / "covariates.csv")
    (out / "truth.csv").write_text(msio.records_to_csv(truth))
    msio.write_graph(spec.graph, out / "graph.json")


def cmd_censor(args):
    ds = _load(args)
    if args.setting == "incremental":
        if not args.family:
            raise ConfigError("incremental censoring needs --family to simulate new subjects")
        spec = family(args.family)
        if spec.graph != ds.graph:
            raise ConfigError("--family graph does not match the data")
        out_ds = apply_incremental_censoring(ds, args.rate, spec, args.seed)
    else:
        out_ds = apply_induced_censoring(ds, args.rate, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    msio.write_dataset(out_ds, out / "records.csv", out / "covariates.csv")
    msio.write_graph(out_ds.graph, out / "graph.json")


def cmd_estimate(args):
    ds = _load(args)
    f = msio.fmt
    s = args.landmark_s
    if args.what == "test":
        if args.method == "ca":
            r = ca_global_test(ds, args.alpha)
            text = _rows_text(["method", "statistic", "dof", "p_value"], [["ca", f(r.statistic), r.dof, f(r.p_value)]])
        else:
            pairs = [args.transition] if args.transition else list(ds.graph.transitions)
            rows = []
            for pair in pairs:
                r = logrank_transition_test(ds, pair, alpha=args.alpha, n_permutations=args.permutations, seed=args.seed)
                rows.append(["logrank", f"{pair[0]}->{pair[1]}", f(r.statistic), r.dof, f(r.p_value)])
            text = _rows_text(["method", "transition", "statistic", "dof", "p_value"], rows)
        return _emit(text, args.out)

    if args.what == "pseudo":
        table = derive_pseudo_values(
            ds,
            args.task,
            args.grid,
            s=s,
            epsilon=args.epsilon,
            test_choice=args.test_choice,
            alpha=args.alpha,
            seed=args.seed,
            n_permutations=args.permutations,
        )
        return _emit(table.to_csv(), args.out)

    after = s if s is not None else 0.0
    grid = args.grid or default_grid(ds, after=after)
    rows = []
    if args.what == "aj" and s is None:
        occ = aj_state_occupation(ds, grid)
        for k in ds.graph.states:
            for m, t in enumerate(grid.points):
                rows.append([k, f(t), f(occ.probabilities[m, k - 1])])
        return _emit(_rows_text(["state", "time", "probability"], rows), args.out)
    if args.what == "aj":
        tp = aj_transition_probability(ds, s, grid)
        for j in ds.graph.states:
            for k in ds.graph.states:
                for m, t in enumerate(grid.points):
                    rows.append([j, k, f(t), f(tp.matrices[m, j - 1, k - 1])])
    else:
        if s is None:
            raise ConfigError("lmaj needs --landmark-s")
        dyn = lmaj_dynamic_sop(ds, s, grid)
        for j, occ in sorted(dyn.by_state.items()):
            for k in ds.graph.states:
                for m, t in enumerate(grid.points):
                    rows.append([j, k, f(t), f(occ.probabilities[m, k - 1])])
    return _emit(_rows_text(["from", "to", "time", "probability"], rows), args.out)


COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "estimate": cmd_estimate, "censor": cmd_censor}


def main(argv=None) -> int:
    level = os.environ.get("MSA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ExperimentError as exc:
        print(f"msa: error in stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"msa: parse error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"msa: invalid data: {exc}", file=sys.stderr)
        return 2
    except MSAError as exc:
        print(f"msa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"msa: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
