"""Command-line entry point: ``seasmap <command> [options]``.

Commands: prep, select, fit, features, render, synth. Every option can also
be given in a flat ``key = value`` config file (``--config``); command-line
values win. Exit status is 0 on success, 1 for invalid input and 2 for a
numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline, render, seasonal, selection, stmodel, synth
from .errors import NumericalError, SeasmapError
from .ingest import DEFAULT_LAGS, LOG_OUTLIER_THRESHOLD, PROPORTION_OFFSET

log = logging.getLogger("seasmap")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(SeasmapError, ValueError):
    pass


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{line_no}: empty key")
        out[key.replace("-", "_")] = value
    return out


class _Parser(argparse.ArgumentParser):
    """Usage errors become exit status 1 (invalid input) rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _lags(text):
    try:
        return tuple(int(t) for t in _csv_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"lags must be comma-separated integers, got {text!r}") from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _fit_options(p):
    p.add_argument("--stationary-ar1", action="store_true", help="stationary AR(1) month covariance")
    p.add_argument("--beta-prior-var", type=_positive_float, default=stmodel.BETA_PRIOR_VAR)
    p.add_argument("--max-iter", type=_positive_int, default=400, help="Nelder-Mead iteration cap")


def build_parser():
    parser = _Parser(prog="seasmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"seasmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="reduce facility counts and tabulate design inputs")
    _common(p)
    p.add_argument("--facilities", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lags", type=_lags, default=DEFAULT_LAGS)
    p.add_argument("--offset", type=_positive_float, default=PROPORTION_OFFSET)
    p.add_argument("--log-outlier-threshold", type=float, default=LOG_OUTLIER_THRESHOLD)

    p = sub.add_parser("select", help="VIF screening and backwards DIC selection")
    _common(p)
    p.add_argument("--prep", required=True, help="directory written by prep")
    p.add_argument("--out", help="report path (default <prep>/selection.txt)")
    p.add_argument("--candidates", type=_csv_list, help="comma-separated candidate columns")
    p.add_argument("--test-fraction", type=float, default=selection.TEST_FRACTION)
    p.add_argument("--vif-threshold", type=_positive_float, default=selection.VIF_THRESHOLD)
    p.add_argument("--single-pass", action="store_true", help="one backwards pass, no halving")
    _fit_options(p)

    p = sub.add_parser("fit", help="fit the final model on every facility")
    _common(p)
    p.add_argument("--prep", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--covariate-list", type=_csv_list, help="comma-separated covariate columns")
    g.add_argument("--selection", help="selection report whose FINAL line gives the covariates")
    p.add_argument("--out", help="archive path (default <prep>/model.smm)")
    _fit_options(p)

    p = sub.add_parser("features", help="posterior seasonality features at target points")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--covariates", required=True, help="covariate grid CSV used in prep")
    p.add_argument("--targets", required=True, help="CSV with lon,lat")
    p.add_argument("--api", required=True, help="CSV with lon,lat,api")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--samples", type=_positive_int, default=100)
    p.add_argument("--error-threshold", type=_positive_float, default=seasonal.ERROR_THRESHOLD)
    p.add_argument("--threads", type=_positive_int, default=None, help="worker pool size")

    p = sub.add_parser("render", help="SVG maps or curve plots from a features/MPI CSV")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--columns", type=_csv_list, help="feature columns to map (default all)")

    p = sub.add_parser("synth", help="write a synthetic dataset with known truth")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--n-locations", type=_positive_int, default=50)
    p.add_argument("--years", type=_positive_int, default=4)
    p.add_argument("--decoys", type=int, default=0, help="extra covariates with zero effect")
    p.add_argument("--lags", type=_lags, default=DEFAULT_LAGS)
    p.add_argument("--grid-side", type=_positive_int, default=20, help="target grid is side x side")
    p.add_argument("--sigma-e2", type=float, default=0.326)
    p.add_argument("--sigma-f2", type=float, default=0.245)
    p.add_argument("--kappa", type=_positive_float, default=0.02)
    p.add_argument("--a", type=float, default=0.756)
    p.add_argument("--stationary-ar1", action="store_true")
    return parser


def _find_config(argv):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None):
    """Parse ``argv`` with config-file values as defaults beneath the command line."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((t for t in argv if not t.startswith("-")), None)
    config_path = _find_config(argv)
    choices = parser._subparsers._group_actions[0].choices
    if config_path is None or command not in choices:
        return parser.parse_args(argv)
    config = read_config(config_path)
    subparser = choices[command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in config.items():
        if key in ("config", "help") or key not in actions:
            raise ConfigError(f"{config_path}: unknown key {key!r} for {command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise ConfigError(f"{config_path}: {key} must be true or false")
            defaults[key] = low in _TRUE
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{config_path}: bad value for {key}: {exc}") from None
        else:
            defaults[key] = value
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _settings(args):
    return selection.FitSettings(
        beta_prior_var=args.beta_prior_var,
        stationary=args.stationary_ar1,
        max_iter=args.max_iter,
        dic_seed=args.seed,
    )


def cmd_prep(args):
    summary = pipeline.run_prep(
        args.facilities, args.covariates, args.out, args.lags, args.offset, args.log_outlier_threshold
    )
    for k, v in summary.items():
        print(f"{k} = {v}")


def cmd_select(args):
    out = args.out or str(Path(args.prep) / pipeline.REPORT_FILE)
    report = pipeline.run_select(
        args.prep, out, _settings(args), args.seed, args.test_fraction, args.vif_threshold,
        args.single_pass, args.candidates,
    )
    print("final covariates: " + (",".join(report.final_covariates) or "(intercept only)"))
    print(f"report: {out}")


def cmd_fit(args):
    if args.selection:
        covs = pipeline.read_final_covariates(args.selection)
    elif args.covariate_list is not None:
        covs = args.covariate_list
    else:
        default = Path(args.prep) / pipeline.REPORT_FILE
        if not default.exists():
            raise ConfigError("give --covariate-list or --selection (no selection report found)")
        covs = pipeline.read_final_covariates(default)
    out = args.out or str(Path(args.prep) / pipeline.MODEL_FILE)
    model = pipeline.run_fit(args.prep, covs, out, _settings(args), args.seed)
    h = model.hyper
    print(f"sigma_e2 = {h.sigma_e2!r}\nsigma_f2 = {h.sigma_f2!r}\nkappa = {h.kappa!r}\na = {h.a!r}")
    for name, b, sd in zip(model.names, model.posterior.beta_mean, model.posterior.beta_sd()):
        print(f"beta[{name}] = {float(b)!r} (sd {float(sd)!r})")
    print(f"dic = {model.dic!r}\narchive: {out}")


def cmd_features(args):
    results = pipeline.run_features(
        args.model, args.covariates, args.targets, args.api, args.out, args.samples, args.seed,
        args.threads, args.error_threshold,
    )
    print(f"{len(results)} targets written to {args.out}")


def cmd_render(args):
    paths = render.render_file(args.input, args.out, args.columns)
    print(f"{len(paths)} SVG files written to {args.out}")


def cmd_synth(args):
    covs = synth.default_covariates()
    beta = {"intercept": -2.5, "rain": 0.5, "temp": 0.3}
    for k in range(args.decoys):
        covs.append(
            synth.SeasonalCovariate(f"decoy{k + 1}", peak_month=1.0 + (5 * k) % 12,
                                    phase_drift=1.0 + k, noise=0.3)
        )
    spec = synth.SynthSpec(
        n_locations=args.n_locations,
        sigma_e2=args.sigma_e2,
        sigma_f2=args.sigma_f2,
        kappa=args.kappa,
        a=args.a,
        beta=beta,
        covariates=covs,
        lags=args.lags,
        years=args.years,
        stationary=args.stationary_ar1,
        seed=args.seed,
    )
    result = synth.generate(spec)
    paths = result.write(args.out, args.prefix)
    out = Path(args.out)
    targets = out / f"{args.prefix}_targets.csv"
    targets.write_text(synth.points_csv(synth.target_grid(spec, args.grid_side)), encoding="utf-8")
    api = out / f"{args.prefix}_api.csv"
    pts, vals = synth.api_surface(spec)
    api.write_text(synth.points_csv(pts, vals), encoding="utf-8")
    for p in list(paths.values()) + [targets, api]:
        print(p)


COMMANDS = {
    "prep": cmd_prep,
    "select": cmd_select,
    "fit": cmd_fit,
    "features": cmd_features,
    "render": cmd_render,
    "synth": cmd_synth,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except (SeasmapError, OSError) as exc:
        print(f"seasmap: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"seasmap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SeasmapError, ValueError, OSError) as exc:
        print(f"seasmap: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
