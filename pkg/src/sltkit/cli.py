"""Command line entry point ``sltkit``.

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
failures while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import criteria as cr
from . import harness, renormalized, rlct, sampler, zoo


class UsageError(Exception):
    pass


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _model(args) -> zoo.ModelSpec:
    try:
        return zoo.make_model(args.model, **_parse_params(args.param))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _mcmc(args, **over) -> sampler.McmcConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise harness.ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(base, dict):
            raise harness.ConfigError(f"{args.config}: expected a JSON object of sampler settings")
        base = base.get("mcmc", base)
    for key in ("chains", "draws_per_chain", "warmup"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    base["seed"] = args.seed
    base.update(over)
    try:
        return sampler.McmcConfig(**base)
    except TypeError as exc:
        raise harness.ConfigError(f"sampler settings: {exc}") from None


def _data(args, model) -> zoo.Dataset:
    if getattr(args, "data", None):
        return zoo.load_dataset(args.data)
    if args.n is None:
        raise UsageError("give --n or --data")
    return zoo.generate_data(model, args.n, args.seed)


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    model = _model(args)
    if args.n is None or args.n < 0:
        raise UsageError("--n must be a nonnegative integer")
    data = zoo.generate_data(model, args.n, args.seed)
    if args.out:
        csv_path, meta = zoo.save_dataset(data, args.out)
        print(f"wrote {csv_path} and {meta}")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(data.N)])
        for row in data.observations:
            w.writerow([repr(float(v)) for v in row])
    return 0


def cmd_sample(args) -> int:
    model = _model(args)
    data = _data(args, model)
    cfg = _mcmc(args, beta=args.beta)
    chains = sampler.run_mcmc(model, data, cfg)
    diag = sampler.diagnostics_json(chains)
    if args.out:
        out = Path(args.out)
        sampler.save_chains_csv(chains, out)
        sampler.save_diagnostics(chains, out.with_suffix(".diagnostics.json"))
    _emit(diag, None)
    return 0


def cmd_criteria(args) -> int:
    model = _model(args)
    data = _data(args, model)
    cfg = _mcmc(args)
    rep = cr.criteria_report(
        model,
        data,
        cfg,
        test_n=args.test_n,
        with_wbic=not args.no_wbic,
        with_ti=args.ti,
        lambda_hat=args.lambda_hat,
    )
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(rep.csv_header())
        w.writerow(rep.csv_row())
    else:
        _emit(rep.to_dict(), args.out)
    return 0


def cmd_wbic(args) -> int:
    model = _model(args)
    data = _data(args, model)
    cfg = _mcmc(args)
    beta = args.beta if args.beta is not None else 1.0 / math.log(max(data.n, 3))
    est = cr.wbic_estimate(model, data, cfg, beta=args.beta)
    _emit({"n": data.n, "beta": beta, "WBIC": est.value, "mcse": est.mcse}, args.out)
    return 0


def cmd_rlct(args) -> int:
    if args.estimate:
        model = _model(args)
        if args.estimate == "wbic":
            cfg = _mcmc(args)
            lam, se = rlct.estimate_rlct_wbic(model, args.n, args.replicates, cfg)
        else:
            grid = rlct.scale_matched_eps_grid(args.n) if args.n else np.geomspace(1e-1, 1e-3, 9)
            lam, se = rlct.estimate_rlct_volume(model, grid, args.prior_samples, args.seed)
        _emit({"estimator": args.estimate, "lambda_hat": lam, "stderr": se}, args.out)
        return 0
    if not args.charts:
        raise UsageError("give one or more chart files, or --estimate")
    results = []
    for path in args.charts:
        try:
            charts = rlct.charts_from_json(Path(path).read_text())
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise harness.ConfigError(f"{path}: malformed chart list ({exc})") from None
        except ValueError as exc:
            raise harness.ConfigError(f"{path}: {exc}") from None
        results.append(rlct.rlct_of_charts(charts))
    if args.json:
        payload = [r.to_dict() for r in results]
        if len(results) > 1:
            comp = rlct.rlct_sum(results) if args.compose == "sum" else rlct.rlct_product(results)
            payload = {"parts": payload, args.compose: {"num": comp.numerator, "den": comp.denominator, "decimal": float(comp)}}
        else:
            payload = payload[0]
        _emit(payload, args.out)
        return 0
    for r in results:
        print(r)
    if len(results) > 1:
        comp = rlct.rlct_sum(results) if args.compose == "sum" else rlct.rlct_product(results)
        print(f"{args.compose}: lambda={comp}")
    return 0


def cmd_renorm(args) -> int:
    if args.grid:
        try:
            grid = renormalized.ChartGrid.from_json(Path(args.grid).read_text())
        except json.JSONDecodeError as exc:
            raise harness.ConfigError(f"{args.grid}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        except (ValueError, TypeError) as exc:
            raise harness.ConfigError(f"{args.grid}: {exc}") from None
    else:
        grid = renormalized.product_mean_grid()
    if args.check == "identity":
        res = renormalized.functional_identity_check(grid, args.draws, args.seed)
        out = res.to_dict()
    elif args.check == "partial":
        xi = renormalized.sample_xi_array(grid, args.seed, args.draws)
        out = {f"alpha={a:g}": renormalized.check_partial_integration(a, xi, grid) for a in args.alpha}
    else:
        xi = renormalized.sample_xi_array(grid, args.seed, args.draws)
        vals = renormalized.chi(xi, grid)
        out = {"mean": float(np.mean(vals)), "stderr": float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0}
    _emit(out, args.out)
    return 0


def cmd_experiment(args) -> int:
    path = args.config_path or args.config
    if not path:
        raise UsageError("give a config file")
    cfg = harness.ExperimentConfig.load(path)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    summary = harness.run_experiment(cfg, out, jobs=args.jobs, resume=args.resume)
    sys.stdout.write((out / "summary.csv").read_text())
    if summary.failures:
        print(f"{len(summary.failures)} replicate(s) failed and were excluded", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    from . import plotting

    out = Path(args.dir)
    for name in ("summary.csv", "raw.csv"):
        if not (out / name).exists():
            raise UsageError(f"{out / name} not found; run an experiment first")
    summary = harness.read_csv(out / "summary.csv")
    raw = harness.read_csv(out / "raw.csv")
    laws = harness.read_csv(out / "laws.csv") if (out / "laws.csv").exists() else []
    lam = None
    if (out / "config.json").exists():
        cfg = harness.ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
        spec = zoo.make_model(cfg.model, **cfg.model_params)
        lam = cfg.lambda_hat if cfg.lambda_hat is not None else (None if spec.known_lambda is None else float(spec.known_lambda))
    figdir = Path(args.figures) if args.figures else out / "figures"
    paths = plotting.render_report(figdir, summary, raw, laws, lam)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["law", "n", "predicted", "observed", "stderr"])
    for r in laws:
        w.writerow([r["law"], r["n"], r["predicted"], r["observed"], r["stderr"]])
    for p in paths:
        print(f"figure: {p}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def _model_args(p, default="product") -> None:
    p.add_argument("--model", default=default, help=f"zoo model: {', '.join(zoo.model_names())}")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="model constructor parameter (JSON value)")


def _mcmc_args(p) -> None:
    p.add_argument("--config", help="JSON file of sampler settings (an object, or one with an 'mcmc' key)")
    p.add_argument("--chains", type=int)
    p.add_argument("--draws-per-chain", dest="draws_per_chain", type=int)
    p.add_argument("--warmup", type=int)


def _data_args(p) -> None:
    p.add_argument("--n", type=int, help="sample size of a generated dataset")
    p.add_argument("--data", help="dataset CSV written by 'gen'")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sltkit", description="Singular learning theory estimators on a model zoo.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset from a model's true distribution")
    _model_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path; a JSON sidecar is written next to it")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample", help="run the tempered-posterior sampler")
    _model_args(p)
    _data_args(p)
    _mcmc_args(p)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", help="chain CSV path (diagnostics JSON alongside)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("criteria", help="compute T, C, W, G, WBIC and related quantities")
    _model_args(p)
    _data_args(p)
    _mcmc_args(p)
    p.add_argument("--test-n", type=int, default=100_000)
    p.add_argument("--no-wbic", action="store_true")
    p.add_argument("--ti", action="store_true", help="also compute the thermodynamic-integration free energy")
    p.add_argument("--lambda-hat", type=float, help="lambda used by sBIC (default: the model's known value)")
    p.add_argument("--csv", action="store_true", help="print one CSV header and row instead of JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_criteria)

    p = sub.add_parser("wbic", help="WBIC at beta = 1/log n")
    _model_args(p)
    _data_args(p)
    _mcmc_args(p)
    p.add_argument("--beta", type=float, help="override the inverse temperature")
    p.add_argument("--out")
    p.set_defaults(func=cmd_wbic)

    p = sub.add_parser("rlct", help="exact RLCT from chart files, or a numerical estimate")
    p.add_argument("charts", nargs="*", help='JSON chart lists such as [{"k":[1,1],"h":[0,0]}]')
    p.add_argument("--compose", choices=("sum", "product"), default="sum", help="rule for combining several files")
    p.add_argument("--json", action="store_true")
    p.add_argument("--estimate", choices=("wbic", "volume"))
    _model_args(p)
    _mcmc_args(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--prior-samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rlct)

    p = sub.add_parser("renorm", help="renormalized-posterior identity checks")
    p.add_argument("grid", nargs="?", help="ChartGrid JSON (default: the ProductMean scalar chart)")
    p.add_argument("--check", choices=("identity", "partial", "chi"), default="identity")
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--alpha", type=float, nargs="+", default=[1.0, 1.5, 2.0, 3.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_renorm)

    p = sub.add_parser("experiment", help="run a replicated experiment from a JSON config")
    p.add_argument("config_path", nargs="?", metavar="CONFIG")
    p.add_argument("--config", help="same as the positional CONFIG")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render figures and print the law table of an experiment")
    p.add_argument("dir", help="experiment output directory")
    p.add_argument("--figures", help="figure directory (default: DIR/figures)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, harness.ConfigError) as exc:
        print(f"sltkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"sltkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
