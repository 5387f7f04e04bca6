"""Command line interface.

Subcommands: fit (one model at a fixed envelope dimension, or the
unconstrained mixed model when --u is omitted), select (BIC sweep over the
envelope dimension), simulate (write a scenario draw as CSV), bench (the
Monte Carlo comparison), demo (the two-group bivariate illustration).

Every output file embeds the invocation's configuration; nothing
time-dependent is written, so rerunning a command reproduces the output file
byte for byte.

Exit codes: 0 success; 2 configuration or input-format problem; 3 numerical
failure (a diagnostics file is written next to the requested output).
"""

import argparse
import sys

import numpy as np

from . import io
from .errors import DataFormatError, MixenvError
from .model import scenario_config, simulate
from .em import EmOptions, fit_standard_em
from .envelope import EnvelopeFitOptions, fit_mixed_envelope, select_u_bic
from .inference import bootstrap_se
from .bench import run_simulation_study, run_demo2d

_BIC_CHOICES = {"jtotal": "log_jtotal", "n": "log_n"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mixenv",
        description="Mixed effects envelope estimation for multivariate "
                    "longitudinal data")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_em_flags(sp):
        sp.add_argument("--max-iter", type=int, default=2000,
                        help="EM iteration cap (default 2000)")
        sp.add_argument("--tol", type=float, default=1e-8,
                        help="relative coefficient-change tolerance (default 1e-8)")

    sp = sub.add_parser("fit", help="fit one model to a CSV dataset")
    sp.add_argument("--input", required=True, help="long-format CSV file")
    sp.add_argument("--output", required=True, help="report file to write")
    sp.add_argument("--u", type=int, default=None,
                    help="envelope dimension; omit to fit the unconstrained model")
    add_em_flags(sp)
    sp.add_argument("--impute", choices=("none", "mean"), default="none",
                    help="handling of missing cells (default none)")
    sp.add_argument("--bic", choices=tuple(_BIC_CHOICES), default="jtotal",
                    help="BIC sample-size convention (default jtotal)")
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B",
                    help="number of bootstrap replicates for coefficient SEs")
    sp.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    sp.set_defaults(func=_cmd_fit)

    sp = sub.add_parser("select", help="choose the envelope dimension by BIC")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    add_em_flags(sp)
    sp.add_argument("--impute", choices=("none", "mean"), default="none")
    sp.add_argument("--bic", choices=tuple(_BIC_CHOICES), default="jtotal")
    sp.set_defaults(func=_cmd_select)

    sp = sub.add_parser("simulate", help="draw a scenario and write it as CSV")
    sp.add_argument("--scenario", required=True,
                    choices=("demo2d", "balanced_main", "unbalanced_main"))
    sp.add_argument("--output", required=True, help="CSV file to write")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rng", choices=("pcg64", "philox"), default="pcg64")
    sp.add_argument("--n", type=int, default=None, help="override the subject count")
    sp.add_argument("--params-output", default=None,
                    help="also write the true parameters to this report file")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("bench", help="Monte Carlo comparison of the estimators")
    sp.add_argument("--scenario", required=True,
                    choices=("balanced_main", "unbalanced_main"))
    sp.add_argument("--output", required=True)
    sp.add_argument("--replicates", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sp.set_defaults(func=_cmd_bench)

    sp = sub.add_parser("demo", help="two-group bivariate illustration")
    sp.add_argument("--output", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--replicates", type=int, default=4)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=_cmd_demo)
    return parser


def _config_echo(args):
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _theta_dict(theta):
    return {"alpha": theta.alpha, "beta": theta.beta,
            "sigma_eps": theta.sigma_eps, "sigma_b": theta.sigma_b}


def _fit_dict(fit):
    d = _theta_dict(fit.theta_hat)
    d["loglik"] = float(fit.loglik_trace[-1])
    d["iterations"] = fit.iterations
    d["converged"] = bool(fit.converged)
    d["delta_final"] = fit.delta_final
    if fit.phi_hat is not None:
        phi = fit.phi_hat
        d["u"] = fit.u
        d["gamma"] = phi.gamma
        d["eta"] = phi.eta
        d["omega"] = phi.omega
        d["omega0"] = phi.omega0
        d["bic"] = fit.bic
    return d


def _cmd_fit(args):
    data, summary = io.ingest_csv(args.input, impute=args.impute)
    em_opts = EmOptions(max_iter=args.max_iter, delta_tol=args.tol)
    if args.u is None:
        def fitter(d, init=None):
            return fit_standard_em(d, em_opts, init=init)
    else:
        env_opts = EnvelopeFitOptions(em=em_opts,
                                      bic_penalty=_BIC_CHOICES[args.bic])

        def fitter(d, init=None):
            return fit_mixed_envelope(d, args.u, env_opts, init=init)

    fit = fitter(data)
    report = {"config": _config_echo(args), "data": summary,
              "fit": _fit_dict(fit)}
    if args.bootstrap > 0:
        bs = bootstrap_se(data, fitter, B=args.bootstrap, seed=args.seed)
        report["bootstrap"] = {
            "replicates": bs.n_requested,
            "failed": bs.n_failed,
            "se_beta": bs.se.reshape(data.r, data.p, order="F"),
        }
    io.write_json(report, args.output)
    print("fit: loglik=%.6f iterations=%d converged=%s -> %s"
          % (report["fit"]["loglik"], fit.iterations, fit.converged, args.output))
    return 0


def _cmd_select(args):
    data, summary = io.ingest_csv(args.input, impute=args.impute)
    opts = EnvelopeFitOptions(em=EmOptions(max_iter=args.max_iter,
                                           delta_tol=args.tol),
                              bic_penalty=_BIC_CHOICES[args.bic])
    u_hat, best, bic_table = select_u_bic(data, opts)
    report = {"config": _config_echo(args), "data": summary,
              "u_hat": u_hat, "bic_table": bic_table,
              "fit": _fit_dict(best)}
    io.write_json(report, args.output)
    print("select: u_hat=%d -> %s" % (u_hat, args.output))
    return 0


def _cmd_simulate(args):
    cfg = scenario_config(args.scenario, seed=args.seed, rng=args.rng)
    if args.n is not None:
        cfg = cfg.replace(n=args.n)
    data, theta, phi = simulate(cfg)
    io.export_csv(data, args.output)
    if args.params_output:
        io.write_json({
            "config": _config_echo(args),
            "params": {
                "alpha": theta.alpha, "beta": theta.beta,
                "sigma_eps": theta.sigma_eps, "sigma_b": theta.sigma_b,
                "gamma": phi.gamma, "eta": phi.eta,
                "omega": phi.omega, "omega0": phi.omega0, "u": phi.u,
            },
        }, args.params_output)
    print("simulate: n=%d observations=%d -> %s"
          % (data.n, data.J_total, args.output))
    return 0


def _cmd_bench(args):
    cfg = scenario_config(args.scenario, seed=args.seed)
    report = run_simulation_study(cfg, args.replicates, args.seed,
                                  verbose=not args.quiet)
    io.write_json({"config": _config_echo(args), "report": report.to_dict()},
                  args.output)
    for m in report.methods:
        print("bench: mean squared error %-18s %.4f (failed %d)"
              % (m, report.mean_errors[m], report.n_failed[m]))
    print("bench: modal selected dimension %d; elapsed %.1fs -> %s"
          % (report.u_modal, report.elapsed_seconds, args.output))
    return 0


def _cmd_demo(args):
    report = run_demo2d(args.seed, replicates=args.replicates,
                        verbose=not args.quiet)
    io.write_json({"config": _config_echo(args), "report": report.to_dict()},
                  args.output)
    for m, v in report.mse.items():
        print("demo: mse %-18s %.4f" % (m, v))
    print("demo: mixed/unconstrained ratio %.3f; modal dimension %d; "
          "elapsed %.1fs -> %s" % (report.ratio_mixed_vs_em, report.u_modal,
                                   report.elapsed_seconds, args.output))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (DataFormatError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (MixenvError, np.linalg.LinAlgError) as exc:
        diag_path = getattr(args, "output", None)
        diag_path = (diag_path + ".diagnostics.json") if diag_path else "mixenv.diagnostics.json"
        io.write_json({"error": type(exc).__name__, "message": str(exc),
                       "config": _config_echo(args)}, diag_path)
        print("numerical failure: %s (diagnostics in %s)" % (exc, diag_path),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
