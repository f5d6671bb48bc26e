"""Command-line front end: simulate, weights, balance, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import pandas as pd

from . import __version__
from .balance import balance_schedule, balance_table, mhb_first_summary
from .errors import BalanceGaugeError, DomainError
from .evaluate import completeness, evaluate_archive, find_archives, rank_metrics, results_frame
from .glm import COMPLEX, SIMPLE
from .metrics import ALL_METRICS
from .panel import load_panel, load_schema, write_panel, write_schema
from .scenarios import ScenarioConfig, builtin_scenario
from .weights import (combine_weights, compute_censoring_weights, compute_weights,
                      fit_censoring_models, fit_treatment_models, normalize_family, read_weights,
                      truncate_weights, write_weights)

log = logging.getLogger("balancegauge")
MANIFEST = "manifest.json"
RUN_LOG = "run.log"
ENV_JOBS = "BALANCEGAUGE_THREADS"


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, MANIFEST)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, default=str)
        return path


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage().strip())


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _default_jobs():
    raw = os.environ.get(ENV_JOBS)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _spec(name):
    return {"simple": SIMPLE, "complex": COMPLEX}[name]


def _csv_list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _write_table(df: pd.DataFrame, stem: str, fmt: str) -> str:
    if fmt == "json":
        path = f"{stem}.json"
        df.to_json(path, orient="records", indent=1, double_precision=10)
    else:
        path = f"{stem}.csv"
        df.to_csv(path, index=False, float_format="%.10g")
    return path


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args, run: RunManifest):
    from .simulate import COVARIATE_SPECS, generate_scenario, run_replicates

    if args.config:
        config = ScenarioConfig.from_json(args.config)
        run.inputs.append(args.config)
    else:
        config = builtin_scenario(args.scenario)
    if args.n is not None:
        config = config.with_(n=args.n)
    run.config["scenario_config"] = config.to_dict()
    ps_specs = _csv_list(args.ps_spec)
    archive = run_replicates(config, args.reps, args.seed, ps_specs=ps_specs,
                             metrics=_parse_metric_list(args.metrics), jobs=args.jobs,
                             oracle_n=args.oracle_n, aggregation=args.aggregation)
    paths = archive.write(args.out)
    run.outputs += list(paths.values())
    config.to_json(os.path.join(args.out, f"{config.name}_config.json"))
    truth = {"coefficients": archive.truth.coefficients,
             "standard_errors": archive.truth.standard_errors,
             "odds_ratios": archive.truth.odds_ratios, "N": archive.truth.N}
    with open(os.path.join(args.out, f"{config.name}_truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
    run.outputs += [f"{config.name}_config.json", f"{config.name}_truth.json"]
    if args.write_panel:
        data = generate_scenario(config, args.seed, rep=0)
        stem = os.path.join(args.out, f"{config.name}_panel")
        write_panel(data, f"{stem}.csv")
        write_schema(COVARIATE_SPECS, os.path.join(args.out, f"{config.name}_schema.json"))
        run.outputs += [f"{stem}.csv", f"{stem}_outcome.csv", f"{config.name}_schema.json"]
    if len(archive.failures):
        log.warning("%d replicate step(s) failed; see %s", len(archive.failures), paths["failures"])
    if config.censored:
        print(f"censoring fraction at t=1: {archive.censor_fractions.mean():.3f}")
    summary = archive.summary()
    wide = summary.pivot_table(index=["ps_spec", "regime"], columns="metric",
                               values=["bal_A0X0", "bal_A1X0", "bal_A1X1"], sort=False)
    bias = archive.estimates.groupby(["ps_spec", "regime"], sort=False)["bias"].mean()
    with pd.option_context("display.width", 200, "display.max_columns", 40):
        print(f"{config.name}: {args.reps} replicates, truth OR(a0, a1) = "
              f"({truth['odds_ratios'][0]:.4f}, {truth['odds_ratios'][1]:.4f})")
        print(bias.round(3).to_string())
        print(wide.round(2).to_string())


def _parse_metric_list(text):
    from .balance import _parse_metrics

    return tuple(_parse_metrics(text))


def _weights_for(data, args, run):
    """Weights from --weights or fitted from the panel according to --family."""
    if args.weights:
        run.inputs.append(args.weights)
        return read_weights(args.weights, ids=data.ids)
    if args.family in (None, "none", "unweighted"):
        return None
    family = normalize_family(args.family)
    spec = _spec(args.ps_spec)
    models = fit_treatment_models(data, spec, family)
    w = compute_weights(data, models, family)
    censoring = args.censoring
    if censoring == "auto":
        censoring = "yes" if data.censored.any() else "no"
    if censoring == "yes":
        if family not in ("marginal_W", "treatment_WA"):
            raise DomainError("censoring weights combine with marginal treatment weights only")
        wc = compute_censoring_weights(data, fit_censoring_models(data, spec))
        w = combine_weights(w, wc, uncensored_through_end=data.uncensored(data.T))
    if args.truncate is not None:
        w = truncate_weights(w, args.truncate)
    return w


def _load(args, run):
    schema = load_schema(args.schema) if args.schema else None
    run.inputs += [p for p in (args.panel, args.schema, args.outcome) if p]
    return load_panel(args.panel, schema, args.outcome)


def cmd_weights(args, run):
    data = _load(args, run)
    if args.weights:
        raise DomainError("the weights command computes weights; do not pass --weights")
    if args.family in (None, "none", "unweighted"):
        raise DomainError("choose a weight family with --family")
    w = _weights_for(data, args, run)
    if args.format == "json":
        path = os.path.join(args.out, "weights.json")
        w.to_frame().to_json(path, orient="records", indent=1, double_precision=17)
    else:
        path = os.path.join(args.out, "weights.csv")
        write_weights(w, path)
    run.outputs.append(path)
    v = w.values[w.available]
    print(f"{w.family}: n={len(v)} mean={v.mean():.4f} sd={v.std(ddof=1):.4f} "
          f"min={v.min():.4f} max={v.max():.4f}")


def cmd_balance(args, run):
    from .plotting import covariate_curves, propensity_curves

    data = _load(args, run)
    w = _weights_for(data, args, run)
    schedule = balance_schedule(data.T, baseline=not args.no_baseline)
    report = balance_table(data, w, args.metrics, schedule, gwd_mode=args.gwd_mode,
                           cs_auc_weighted=args.cs_auc == "weighted")
    csv_path, json_path = report.write(os.path.join(args.out, "balance"))
    run.outputs += [csv_path, json_path]
    for (t, k, m), msg in report.failures.items():
        log.warning("%s at (t=%d, k=%d) not computed: %s", m, t, k, msg)
    if "MHB" in report.metrics:
        summary = mhb_first_summary(report)
        run.outputs.append(_write_table(summary, os.path.join(args.out, "mhb_summary"), args.format))
        flagged = summary.loc[summary["flag"] == 1]
        print(f"{len(schedule)} (t,k) comparisons; MHB above threshold in {len(flagged)}")
        for row in flagged.itertuples():
            print(f"  t={row.t} k={row.k} MHB={row.mhb:.4f} > {row.threshold:.4f}"
                  + (f"  SMD > 0.1: {row.smd_imbalanced}" if row.smd_imbalanced else ""))
    else:
        print(f"{len(schedule)} (t,k) comparisons written")
    if args.plot_data:
        plot_dir = os.path.join(args.out, "plots")
        os.makedirs(plot_dir, exist_ok=True)
        frames = []
        for t, k in schedule:
            for kind in ("ecdf", "density"):
                frames.append(covariate_curves(data, w, t, k, kind=kind))
        curves = pd.concat(frames, ignore_index=True)
        path = os.path.join(plot_dir, "covariate_curves.csv")
        curves.to_csv(path, index=False, float_format="%.10g")
        ps = pd.concat([propensity_curves(data, w, t, _spec(args.ps_spec))
                        for t in range(data.T_plus_1)], ignore_index=True)
        ps_path = os.path.join(plot_dir, "propensity_curves.csv")
        ps.to_csv(ps_path, index=False, float_format="%.10g")
        run.outputs += [path, ps_path]


def cmd_evaluate(args, run):
    found = find_archives(args.archive_dir)
    run.inputs += list(found.values())
    results, ranks = [], []
    for scenario, path in found.items():
        archive = pd.read_csv(path, float_precision="round_trip")
        missing = completeness(archive)
        if missing:
            log.warning("%s: %d missing archive cell(s): %s%s", scenario, len(missing),
                        "; ".join(missing[:10]), " ..." if len(missing) > 10 else "")
        res, problems = evaluate_archive(archive, scenario)
        for p in problems:
            log.warning("%s", p)
        results += res
        for ps in dict.fromkeys(r.ps_spec for r in res):
            ranked = rank_metrics([r for r in res if r.ps_spec == ps], alert=args.alert)
            ranked.insert(0, "ps_spec", ps)
            ranked.insert(0, "scenario", scenario)
            ranks.append(ranked)
    if not results:
        raise DomainError("no metric could be evaluated")
    table = results_frame(results)
    run.outputs.append(_write_table(table, os.path.join(args.out, "evaluation"), args.format))
    run.outputs.append(_write_table(pd.concat(ranks, ignore_index=True),
                                    os.path.join(args.out, "ranking"), args.format))
    with pd.option_context("display.width", 160):
        for (scenario, ps), block in table.groupby(["scenario", "ps_spec"], sort=False):
            print(f"{scenario} ({ps} PS)")
            print(block[["metric", "r2", "intercept"]].round(3).to_string(index=False))


def cmd_report(args, run):
    from .plotting import balance_scatter, propensity_curves, render_figures

    curves = {}
    plot_dir = os.path.join(args.out, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    if args.archive_dir:
        found = find_archives(args.archive_dir)
        run.inputs += list(found.values())
        rows = []
        for scenario, path in found.items():
            archive = pd.read_csv(path, float_precision="round_trip")
            est_path = path[:-4] + "_estimates.csv"
            summary = archive.groupby(["ps_spec", "regime", "metric"], sort=False)[
                ["bal_A0X0", "bal_A1X0", "bal_A1X1", "bias"]].mean().reset_index()
            summary.insert(0, "scenario", scenario)
            rows.append(summary)
            res, problems = evaluate_archive(archive, scenario)
            for p in problems:
                log.warning("%s", p)
            run.outputs.append(_write_table(results_frame(res),
                                            os.path.join(args.out, f"{scenario}_evaluation"),
                                            args.format))
            if os.path.exists(est_path):
                run.inputs.append(est_path)
            for m in dict.fromkeys(archive["metric"]):
                sc = balance_scatter(archive, m)
                stem = f"scatter_{scenario}_{m}"
                sc.to_csv(os.path.join(plot_dir, f"{stem}.csv"), index=False, float_format="%.10g")
                run.outputs.append(os.path.join(plot_dir, f"{stem}.csv"))
                curves[stem] = sc
        table1 = pd.concat(rows, ignore_index=True)
        run.outputs.append(_write_table(table1, os.path.join(args.out, "balance_bias_summary"),
                                        args.format))
    if args.scenario is not None:
        from .simulate import generate_scenario, regime_factors, regime_weights

        config = builtin_scenario(args.scenario)
        run.config["scenario_config"] = config.to_dict()
        data = generate_scenario(config, args.seed)
        weights = regime_weights(data, regime_factors(data, _spec(args.ps_spec)))
        frames = []
        for regime, w in weights.items():
            for t in range(data.T_plus_1):
                f = propensity_curves(data, w, t, _spec(args.ps_spec))
                f["regime"] = regime
                frames.append(f)
        ps = pd.concat(frames, ignore_index=True)
        path = os.path.join(plot_dir, f"propensity_{config.name}.csv")
        ps.to_csv(path, index=False, float_format="%.10g")
        run.outputs.append(path)
        for regime in weights:
            sub = ps.loc[ps["regime"] == regime].copy()
            sub["series"] = sub["series"] + f" ({regime})"
            curves[f"propensity_{config.name}_{regime}"] = sub
    if not curves:
        raise DomainError("report needs --archive-dir and/or --scenario")
    if args.figures:
        figs = render_figures(curves, os.path.join(args.out, "figures"))
        run.outputs += figs
        print(f"rendered {len(figs)} figure(s) to {os.path.join(args.out, 'figures')}")
    print(f"plot data written to {plot_dir}")


# ---------------------------------------------------------------------------
# Parser


def _global_flags(p, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="master random seed (default 0)")
    p.add_argument("--jobs", type=_positive_int, default=d(None),
                   help=f"worker processes (default ${ENV_JOBS} or 1)")
    p.add_argument("--out", default=d("."), help="output directory (default .)")
    p.add_argument("--format", choices=("csv", "json"), default=d("csv"),
                   help="format of tabular outputs")


def _panel_flags(p):
    p.add_argument("--panel", required=True, help="long-format panel CSV")
    p.add_argument("--schema", help="covariate schema JSON")
    p.add_argument("--outcome", help="outcome CSV (default <panel>_outcome.csv if present)")
    p.add_argument("--ps-spec", choices=("simple", "complex"), default="simple")
    p.add_argument("--censoring", choices=("auto", "yes", "no"), default="auto",
                   help="multiply in censoring weights (auto: when censoring is present)")
    p.add_argument("--truncate", type=float, help="cap weights at this quantile, e.g. 0.99")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancegauge",
        description="Covariate balance diagnostics for longitudinal inverse probability weighting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a Monte Carlo campaign for one scenario")
    _global_flags(p, suppress=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="built-in scenario: 1..10 or censored-base")
    src.add_argument("--config", help="scenario JSON file")
    p.add_argument("--n", type=_positive_int, help="override the sample size")
    p.add_argument("--reps", type=_positive_int, required=True)
    p.add_argument("--ps-spec", default="simple", help="comma list of simple,complex")
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--aggregation", choices=("mean_signed", "mean_abs", "abs_mean"),
                   default="mean_signed", help="how the two odds-ratio biases are combined")
    p.add_argument("--oracle-n", type=_positive_int, default=100_000,
                   help="Monte Carlo size for the true MSM parameters")
    p.add_argument("--write-panel", action="store_true",
                   help="also write replicate 0 as a panel CSV with its schema")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("weights", help="fit treatment (and censoring) models and write weights")
    _global_flags(p, suppress=True)
    _panel_flags(p)
    p.add_argument("--family", default="marginal",
                   help="marginal (default), stabilized or unstabilized")
    p.set_defaults(func=cmd_weights, weights=None)

    p = sub.add_parser("balance", help="balance report over all (t,k) comparisons")
    _global_flags(p, suppress=True)
    _panel_flags(p)
    wsrc = p.add_mutually_exclusive_group()
    wsrc.add_argument("--weights", help="weights CSV (id,value,...)")
    wsrc.add_argument("--family", default=None,
                      help="fit weights of this family from the panel; omit for unweighted")
    p.add_argument("--metrics", default=",".join(ALL_METRICS), help="comma list, e.g. mhb,smd")
    p.add_argument("--no-baseline", action="store_true", help="skip the t=0 comparison")
    p.add_argument("--gwd-mode", choices=("mean", "sum"), default="mean")
    p.add_argument("--cs-auc", choices=("unweighted", "weighted"), default="unweighted")
    p.add_argument("--plot-data", action="store_true",
                   help="write ECDF, density and propensity-score curves")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("evaluate", help="bias-on-imbalance regressions for simulation archives")
    _global_flags(p, suppress=True)
    p.add_argument("archive_dir", help="directory holding simulate outputs")
    p.add_argument("--alert", type=float, default=0.1,
                   help="flag metrics whose |intercept| exceeds this")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summaries and plot data; --figures renders PNGs")
    _global_flags(p, suppress=True)
    p.add_argument("--archive-dir", help="directory holding simulate outputs")
    p.add_argument("--scenario", help="also simulate one dataset and emit propensity curves")
    p.add_argument("--ps-spec", choices=("simple", "complex"), default="simple")
    p.add_argument("--figures", action="store_true", help="render PNG figures (needs matplotlib)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.jobs is None:
        args.jobs = _default_jobs()
    os.makedirs(args.out, exist_ok=True)

    collector = _WarningCollector()
    file_handler = logging.FileHandler(os.path.join(args.out, RUN_LOG), mode="w", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(logging.WARNING)
    stderr_handler.setFormatter(logging.Formatter("balancegauge: %(message)s"))
    root = logging.getLogger()
    handlers = (collector, file_handler, stderr_handler)
    for h in handlers:
        root.addHandler(h)
    old_level = root.level
    root.setLevel(logging.INFO)
    logging.captureWarnings(True)

    config = {k: v for k, v in vars(args).items() if k != "func"}
    run = RunManifest(args.command, argv, config, args.seed, started=_now())
    code = 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            args.func(args, run)
    except BalanceGaugeError as exc:
        log.error("%s", exc)
        code = exc.exit_code
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        code = 3
    finally:
        logging.captureWarnings(False)
        run.finished = _now()
        run.warnings = collector.messages
        run.outputs = [os.path.relpath(p, args.out) if os.path.isabs(p) or p.startswith(args.out)
                       else p for p in run.outputs]
        run.write(args.out)
        for h in handlers:
            root.removeHandler(h)
        file_handler.close()
        root.setLevel(old_level)
    return code


if __name__ == "__main__":
    sys.exit(main())
