"""Command-line interface: ``clusteritr {evaluate,learn,simulate,crossfit,generate}``.

Every subcommand writes JSON to stdout (or ``--out``).  Runs are deterministic
given their seeds; ``--workers`` only changes wall-clock time.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .crossfit import CrossfitSpec, crossfit_evaluate
from .data import CsvSchema, DatasetError, load_dataset, load_policy, policy_from_dict, save_dataset, save_policy
from .estimators import NuisanceConfig, evaluate, fit_nuisance
from .learning import LearningError, LearnSpec, learn
from .propensity import KnownConstant, KnownTable, PropensityFitConfig, PositivityError, fit_propensity
from .simulation import (EvaluateProtocol, LearnProtocol, ReplicationError, ScenarioSpec, generate_dataset,
                         regret_curve, run_replications)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV with one row per unit")
    p.add_argument("--cluster-col", default="cluster_id")
    p.add_argument("--unit-col", default="unit_id")
    p.add_argument("--outcome-col", default="Y")
    p.add_argument("--treatment-col", default="A")
    p.add_argument("--covariates", nargs="+", default=None, help="covariate columns (default: X1, X2, ...)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--propensity-col", default=None, help="column of known P(A=1)")
    src.add_argument("--propensity-const", type=float, default=None, help="known constant P(A=1)")
    src.add_argument("--fit-propensity", action="store_true", help="fit a pooled logistic model")
    p.add_argument("--eta", type=float, default=0.01, help="positivity bound")


def _add_learner_args(p: argparse.ArgumentParser, objective: str = "addipw") -> None:
    p.add_argument("--objective", default=objective, help="addipw, noint, ipw or poly:<beta>")
    p.add_argument("--method", choices=("surrogate", "exact"), default="surrogate")
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--box", type=float, default=10.0, help="coefficient bound on the standardised scale")
    p.add_argument("--seed", type=int, default=0)


def _learn_spec(args, cost: float = 0.0) -> LearnSpec:
    return LearnSpec(objective=args.objective, method=args.method, restarts=args.restarts,
                     surrogate_temperature=args.temperature, coefficient_box=args.box, seed=args.seed, cost=cost)


def _load(args):
    schema = CsvSchema(cluster=args.cluster_col, unit=args.unit_col, outcome=args.outcome_col,
                       treatment=args.treatment_col, covariates=args.covariates,
                       propensity=args.propensity_col or "e1")
    ds = load_dataset(args.data, schema)
    if args.propensity_const is not None:
        model = KnownConstant(args.propensity_const, args.eta)
    elif args.fit_propensity:
        model = fit_propensity(ds, PropensityFitConfig(eta=args.eta))
    elif ds.propensity is not None:
        model = KnownTable(args.eta)
    else:
        raise DatasetError("no propensity source: pass --propensity-col, --propensity-const or --fit-propensity")
    return ds, model


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_evaluate(args) -> None:
    ds, model = _load(args)
    policy = load_policy(args.policy)
    nuisance = None
    if any(t == "dr" for t in args.estimator):
        nuisance = fit_nuisance(ds, model, NuisanceConfig(crossfit_folds=args.nuisance_folds, seed=args.seed))
    results = [evaluate(t, ds, model, policy, nuisance).to_dict() for t in args.estimator]
    _emit({"policy": policy.to_dict(), "propensity": model.to_dict(), "estimates": results}, args.out)


def cmd_learn(args) -> None:
    ds, model = _load(args)
    res = learn(ds, model, _learn_spec(args, args.cost))
    if args.policy_out:
        save_policy(res.policy, args.policy_out)
    _emit(res.to_dict(), args.out)


def _protocol(doc: dict):
    kind = doc.get("type", "evaluate")
    if kind == "evaluate":
        policies = {k: policy_from_dict(v) for k, v in doc["policies"].items()}
        return EvaluateProtocol(policies, tuple(doc.get("estimators", ("addipw", "ipw"))),
                                doc.get("propensity", "known"))
    if kind == "learn":
        learners = {k: LearnSpec(**_learn_fields(v)) for k, v in doc["learners"].items()}
        return LearnProtocol(learners, int(doc.get("n_oracle", 10_000)), doc.get("propensity", "known"))
    raise ValueError(f"unknown protocol type {kind!r}")


def _learn_fields(doc: dict) -> dict:
    doc = dict(doc)
    if "anneal" in doc:
        doc["anneal"] = tuple(doc["anneal"])
    return doc


def cmd_simulate(args) -> None:
    """Config keys: ``scenario`` (ScenarioSpec fields), ``reps``, and either
    ``protocol`` (evaluate/learn) or ``regret`` (``learner``, ``n_grid``)."""
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    spec = ScenarioSpec.from_dict(config.get("scenario", {}))
    if args.seed is not None:
        spec = ScenarioSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    reps = int(config.get("reps", 100))
    if "regret" in config:
        rc = config["regret"]
        curve = regret_curve(spec, LearnSpec(**_learn_fields(rc.get("learner", {}))), rc["n_grid"], reps,
                             n_oracle=int(rc.get("n_oracle", 10_000)), workers=args.workers)
        _emit({"scenario": spec.to_dict(), "reps": reps, "optimal_value": curve.optimal_value,
               "slope": curve.slope, "table": curve.table()}, args.out)
        return
    report = run_replications(spec, _protocol(config["protocol"]), reps, workers=args.workers)
    if args.csv:
        report.to_csv(args.csv)
    _emit(report.to_dict(), args.out)


def cmd_crossfit(args) -> None:
    ds, model = _load(args)
    spec = CrossfitSpec(K=args.folds, cost_grid=tuple(args.costs), learner=_learn_spec(args), seed=args.fold_seed)
    result = crossfit_evaluate(ds, model, spec, workers=args.workers, full_fit=args.full_fit)
    if args.csv:
        result.to_csv(args.csv)
    if args.coef_csv:
        result.coefficients_csv(args.coef_csv)
    _emit(result.to_dict(), args.out)


def cmd_generate(args) -> None:
    spec = ScenarioSpec(args.scenario, n=args.n, q=args.q, seed=args.seed)
    save_dataset(generate_dataset(spec), args.output)
    _emit({"scenario": spec.to_dict(), "path": args.output}, None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusteritr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="estimate the value of a policy")
    _add_data_args(p)
    p.add_argument("--policy", required=True, help="policy JSON")
    p.add_argument("--estimator", nargs="+", default=["addipw"],
                   help="ipw, noint, addipw, dr, poly:<beta>, addipw-cost:<c>")
    p.add_argument("--nuisance-folds", type=int, default=0, help="cross-fitting folds for the dr outcome model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("learn", help="learn a linear treatment rule")
    _add_data_args(p)
    _add_learner_args(p)
    p.add_argument("--cost", type=float, default=0.0, help="per-treated-unit cost")
    p.add_argument("--policy-out", default=None, help="write the learned policy JSON here")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("simulate", help="run a replication study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--csv", default=None, help="tidy rep,tag,value,treated_frac output")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("crossfit", help="cross-fitted cost-penalised evaluation")
    _add_data_args(p)
    _add_learner_args(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--costs", type=float, nargs="+", default=[0.15, 0.20, 0.25])
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--full-fit", action="store_true", help="also report coefficients learned on all data")
    p.add_argument("--csv", default=None)
    p.add_argument("--coef-csv", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_crossfit)

    p = sub.add_parser("generate", help="write a synthetic scenario dataset to CSV")
    p.add_argument("--scenario", choices=("A", "B"), default="A")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--q", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DatasetError, PositivityError, LearningError, ReplicationError, ValueError, OSError) as exc:
        print(f"clusteritr: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
