"""Command-line front end.

Subcommands: spectrum | qve | freeconv | stability-scan | variance |
expectation | simulate | dbm | rerun.  All inputs are JSON documents, all
tabular outputs CSV with a JSON sidecar; every bundle embeds its resolved
manifest so `wigtype rerun` reproduces it bit-for-bit.  Exit codes: 0
success, 2 input/contract error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalError
from .profiles import VarianceProfile

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"missing input file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}") from exc


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solver_opts(args):
    from .qve import SolverOptions

    return SolverOptions(
        tol=args.tol_residual,
        tol_edge=args.tol_edge,
        eta_floor=args.eta_floor,
    )


def _emit_manifest(out, command, args, inputs):
    from .report import write_json

    doc = {
        "command": command,
        "version": __version__,
        "inputs": inputs,
        "overrides": {
            "tol.residual": args.tol_residual,
            "tol.edge": args.tol_edge,
            "grid.eta-floor": args.eta_floor,
            "grid.n-bulk": args.n_bulk,
            "grid.n-edge": args.n_edge,
            "seed": getattr(args, "seed", None),
            "workers": getattr(args, "workers", None),
            "figures": not args.no_figures,
            "extra": {k: v for k, v in vars(args).items()
                      if k in ("times", "energy_min", "energy_max", "n_energies",
                               "singular_at", "level", "y_min", "t_end", "steps",
                               "mode")
                      and v is not None},
        },
    }
    write_json(out / "manifest.json", doc)
    return doc


def _spectral_for(profile, args, with_quantiles=True):
    from .spectrum import compute_spectral_data

    return compute_spectral_data(
        profile, opts=_solver_opts(args), n_bulk=args.n_bulk, n_edge=args.n_edge,
        with_quantiles=with_quantiles,
    )


def cmd_spectrum(args):
    from .report import fig_spectrum, write_csv, write_json

    profile_doc = _load_json(args.profile)
    profile = VarianceProfile.from_dict(profile_doc)
    out = _outdir(args)
    _emit_manifest(out, "spectrum", args, {"profile": profile_doc})
    sd = _spectral_for(profile, args)
    write_csv(out / "density.csv", ["E", "rho"], [sd.energies, sd.density])
    write_csv(out / "quantiles.csv", ["i", "gamma"],
              [np.arange(1, sd.quantile_values.size + 1), sd.quantile_values])
    write_json(out / "spectral.json", {
        "alpha": sd.alpha, "beta": sd.beta, "mass": sd.mass,
        "edge_exponents": list(sd.edge_exponents),
        "bulk_min": sd.support.bulk_min, "kappa": sd.support.kappa,
        "threshold": sd.support.threshold,
    })
    if not args.no_figures:
        fig_spectrum(sd, out / "spectrum.png")
    return EXIT_OK


def cmd_qve(args):
    from .qve import solve_grid
    from .report import fig_qve, write_csv, write_json

    profile_doc = _load_json(args.profile)
    profile = VarianceProfile.from_dict(profile_doc)
    out = _outdir(args)
    _emit_manifest(out, "qve", args, {"profile": profile_doc})
    energies = np.linspace(args.energy_min, args.energy_max, args.n_energies)
    sol = solve_grid(profile, energies, opts=_solver_opts(args))
    cols = {"E": [], "eta": [], "re_m": [], "im_m": [], "residual": []}
    for lev, eta in enumerate(sol.etas):
        cols["E"].extend(energies)
        cols["eta"].extend([eta] * energies.size)
        cols["re_m"].extend(sol.m_bar[lev].real)
        cols["im_m"].extend(sol.m_bar[lev].imag)
        cols["residual"].extend(sol.residuals[lev])
    write_csv(out / "m_bar.csv", list(cols), [np.asarray(v) for v in cols.values()])
    if args.vectors:
        vecs = sol.floor_vectors()
        write_csv(out / "vectors.csv", ["E"] + [f"m_{i}" for i in range(vecs.shape[1])],
                  [energies] + [vecs[:, i] for i in range(vecs.shape[1])])
    write_json(out / "qve.json", {
        "eta_floor": sol.eta_floor, "max_residual": float(sol.residuals.max()),
        "herglotz": bool((sol.m_bar.imag > 0).all()),
    })
    if not args.no_figures:
        fig_qve(sol, out / "qve.png")
    return EXIT_OK


def cmd_freeconv(args):
    from .freeconv import convolve, subordination_residual
    from .report import fig_freeconv, write_csv, write_json

    profile_doc = _load_json(args.profile)
    profile = VarianceProfile.from_dict(profile_doc)
    out = _outdir(args)
    _emit_manifest(out, "freeconv", args, {"profile": profile_doc})
    times = [float(t) for t in args.times.split(",")]
    spectra, meta = [], []
    for t in times:
        fc = convolve(profile, t, opts=_solver_opts(args),
                      n_bulk=args.n_bulk, n_edge=args.n_edge)
        spectra.append(fc.spectral)
        mid = 0.5 * (fc.spectral.alpha + fc.spectral.beta)
        res = float(subordination_residual(fc, [mid + 0.05j])[0]) if t > 0 else 0.0
        meta.append({"t": t, "alpha": fc.spectral.alpha, "beta": fc.spectral.beta,
                     "mass": fc.spectral.mass, "subordination_residual": res})
        write_csv(out / f"density_t{t:g}.csv", ["E", "rho"],
                  [fc.spectral.energies, fc.spectral.density])
    write_json(out / "freeconv.json", {"times": meta})
    if not args.no_figures:
        fig_freeconv(spectra, times, out / "freeconv.png")
    return EXIT_OK


def cmd_stability_scan(args):
    from .report import fig_singularity, fig_stability_scan, write_csv, write_json
    from .stability import boundary_singularity, build_stability, kernels

    profile_doc = _load_json(args.profile)
    profile = VarianceProfile.from_dict(profile_doc)
    out = _outdir(args)
    _emit_manifest(out, "stability-scan", args, {"profile": profile_doc})
    sd = _spectral_for(profile, args, with_quantiles=False)
    kappa = (sd.beta - sd.alpha) / 10.0
    energies = np.linspace(sd.alpha + kappa, sd.beta - kappa, args.n_energies)
    lam, gap, gvals = [], [], []
    opts = _solver_opts(args)
    for e in energies:
        op = build_stability(profile, e, e, opts=opts)
        lam.append(op.lambda1)
        gap.append(op.gap)
        kv = kernels(profile, e + 1e-3j, e - 1e-3j, opts=opts)
        gvals.append(kv.g)
    write_csv(out / "stability.csv", ["E", "lambda1", "gap", "re_g", "im_g"],
              [energies, np.asarray(lam), np.asarray(gap),
               np.real(gvals), np.imag(gvals)])
    doc = {"lambda1_max": float(np.max(lam)), "gap_min": float(np.min(gap))}
    if args.singular_at is not None:
        x = float(args.singular_at)
        seps = np.geomspace(1e-3, 1e-1, 15)
        pvals = np.array([boundary_singularity(profile, x, x + s, opts=opts)[0]
                          for s in seps])
        coef = float(np.polyfit(1.0 / seps, pvals.real, 1)[0])
        write_csv(out / "singularity.csv", ["separation", "re_P", "im_P"],
                  [seps, pvals.real, pvals.imag])
        doc["singularity_coefficient"] = coef
        if not args.no_figures:
            fig_singularity(seps, pvals, out / "singularity.png")
    write_json(out / "stability.json", doc)
    if not args.no_figures:
        fig_stability_scan(energies, np.asarray(lam), np.asarray(gap),
                           out / "stability.png")
    return EXIT_OK


def cmd_variance(args):
    from .lss import variance_hat
    from .report import fig_testfn, write_csv, write_json
    from .testfn import testfn_from_dict

    profile_doc = _load_json(args.profile)
    testfn_doc = _load_json(args.testfn)
    profile = VarianceProfile.from_dict(profile_doc)
    tf = testfn_from_dict(testfn_doc)
    out = _outdir(args)
    _emit_manifest(out, "variance", args, {"profile": profile_doc, "testfn": testfn_doc})
    vh = variance_hat(tf, profile, y_min=args.y_min, level=args.level,
                      opts=_solver_opts(args))
    lo, hi = tf.support()
    x = np.linspace(lo, hi, 800)
    write_csv(out / "testfn.csv", ["x", "f", "df"], [x, tf.f(x), tf.df(x)])
    write_json(out / "variance.json", {
        "value": vh.value, "parts": vh.parts, "y_min": vh.y_min,
        "level": vh.level, "testfn": tf.to_dict(),
    })
    if not args.no_figures:
        fig_testfn(tf, out / "variance.png", value=vh.value)
    return EXIT_OK


def cmd_expectation(args):
    from .lss import expectation_correction
    from .report import write_json
    from .testfn import testfn_from_dict

    profile_doc = _load_json(args.profile)
    testfn_doc = _load_json(args.testfn)
    profile = VarianceProfile.from_dict(profile_doc)
    tf = testfn_from_dict(testfn_doc)
    out = _outdir(args)
    _emit_manifest(out, "expectation", args, {"profile": profile_doc, "testfn": testfn_doc})
    sd = _spectral_for(profile, args, with_quantiles=False)
    ec = expectation_correction(tf, profile, sd, opts=_solver_opts(args))
    write_json(out / "expectation.json", {
        "bulk_variance_term": ec.bulk_variance_term,
        "bulk_fourth_cumulant": ec.bulk_fourth_cumulant,
        "bulk_resolvent": ec.bulk_resolvent,
        "edge_terms": ec.edge_terms,
        "total": ec.total,
    })
    return EXIT_OK


def cmd_simulate(args):
    from .ensemble import EnsembleSpec, mc_harness
    from .report import fig_histogram, histogram_with_overlay, write_csv, write_json
    from .spectrum import compute_spectral_data

    manifest = _load_json(args.manifest)
    if args.seed is not None:
        manifest["seed"] = args.seed
    out = _outdir(args)
    _emit_manifest(out, "simulate", args, {"manifest": manifest})
    spec = EnsembleSpec.from_dict(manifest["ensemble"])
    spectral = compute_spectral_data(spec.attach_cumulants(), opts=_solver_opts(args),
                                     n_bulk=args.n_bulk, n_edge=args.n_edge)
    result = mc_harness(manifest, spectral=spectral, workers=args.workers)
    write_csv(out / "samples.csv", ["index", "value"],
              [np.arange(result.n_samples), result.samples])
    edges, counts = histogram_with_overlay(result.samples)
    write_csv(out / "histogram.csv", ["bin_left", "bin_right", "count"],
              [edges[:-1], edges[1:], counts])
    doc = result.to_dict()
    doc["normal_overlay"] = {"mean": result.summary["mean"],
                             "std": float(np.sqrt(max(result.summary["variance"], 0.0)))}
    write_json(out / "result.json", doc)
    if not args.no_figures:
        fig_histogram(result.samples, out / "histogram.png",
                      title=result.statistic_name)
    return EXIT_OK


def cmd_dbm(args):
    from .ensemble import EnsembleSpec, dbm_run, sample_matrix
    from .report import fig_dbm, write_csv, write_json

    profile_doc = _load_json(args.profile)
    profile = VarianceProfile.from_dict(profile_doc)
    out = _outdir(args)
    _emit_manifest(out, "dbm", args, {"profile": profile_doc})
    spec = EnsembleSpec(profile, seed=args.seed or 0)
    w0 = sample_matrix(spec, np.random.SeedSequence(args.seed or 0))
    times = np.linspace(0.0, args.t_end, args.steps + 1)
    if args.mode == "matrix-flow":
        states = dbm_run(w0, args.t_end, mode="matrix-flow",
                         seed=args.seed or 0, times_out=times)
    else:
        from .ensemble import eigen_spectrum

        states = dbm_run(eigen_spectrum(w0), args.t_end, dt=args.t_end / (50 * args.steps),
                         mode="sde-euler", seed=args.seed or 0, times_out=times)
    cols = [np.array([s.t for s in states])]
    header = ["t"] + [f"lambda_{i}" for i in range(profile.n)]
    particles = np.array([s.particles for s in states])
    write_csv(out / "trajectory.csv", header, [cols[0]] + [particles[:, i] for i in range(profile.n)])
    write_json(out / "dbm.json", {"t_end": args.t_end, "mode": args.mode,
                                  "n": profile.n, "steps": args.steps})
    if not args.no_figures:
        fig_dbm(states, out / "dbm.png")
    return EXIT_OK


def cmd_rerun(args):
    manifest = _load_json(args.bundle_manifest)
    command = manifest["command"]
    inputs = manifest["inputs"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sub_args = [command]
    tmp = out / "_inputs"
    tmp.mkdir(exist_ok=True)
    for key, doc in inputs.items():
        path = tmp / f"{key}.json"
        with open(path, "w") as fh:
            json.dump(doc, fh)
        sub_args += [f"--{key}", str(path)]
    ov = manifest["overrides"]
    sub_args += ["--out", str(out),
                 "--tol.residual", str(ov["tol.residual"]),
                 "--tol.edge", str(ov["tol.edge"]),
                 "--grid.eta-floor", str(ov["grid.eta-floor"]),
                 "--grid.n-bulk", str(ov["grid.n-bulk"]),
                 "--grid.n-edge", str(ov["grid.n-edge"])]
    if ov.get("seed") is not None:
        sub_args += ["--seed", str(ov["seed"])]
    if ov.get("workers") is not None:
        sub_args += ["--workers", str(ov["workers"])]
    if not ov.get("figures", True):
        sub_args += ["--no-figures"]
    for key, val in (ov.get("extra") or {}).items():
        flag = "--" + key.replace("_", "-")
        sub_args += [flag, str(val)]
    return main(sub_args)


def _add_common(p, seed=False, workers=False):
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--tol.residual", dest="tol_residual", type=float, default=1e-11)
    p.add_argument("--tol.edge", dest="tol_edge", type=float, default=1e-9)
    p.add_argument("--grid.eta-floor", dest="eta_floor", type=float, default=1e-6)
    p.add_argument("--grid.n-bulk", dest="n_bulk", type=int, default=700)
    p.add_argument("--grid.n-edge", dest="n_edge", type=int, default=160)
    p.add_argument("--no-figures", action="store_true")
    if seed:
        p.add_argument("--seed", type=int, default=None)
    if workers:
        p.add_argument("--workers", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="wigtype",
                                     description="general Wigner-type spectral toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="density of states, support, quantiles")
    p.add_argument("--profile", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("qve", help="solve the self-consistent vector on a grid")
    p.add_argument("--profile", required=True)
    p.add_argument("--energy-min", dest="energy_min", type=float, default=-3.0)
    p.add_argument("--energy-max", dest="energy_max", type=float, default=3.0)
    p.add_argument("--n-energies", dest="n_energies", type=int, default=201)
    p.add_argument("--vectors", action="store_true", help="dump per-point vectors")
    _add_common(p)
    p.set_defaults(func=cmd_qve)

    p = sub.add_parser("freeconv", help="semicircle free-convolution flow")
    p.add_argument("--profile", required=True)
    p.add_argument("--times", default="0.05,0.1,0.2")
    _add_common(p)
    p.set_defaults(func=cmd_freeconv)

    p = sub.add_parser("stability-scan", help="top eigenvalue/gap scan and kernels")
    p.add_argument("--profile", required=True)
    p.add_argument("--n-energies", dest="n_energies", type=int, default=41)
    p.add_argument("--singular-at", dest="singular_at", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_stability_scan)

    p = sub.add_parser("variance", help="variance functional of a test function")
    p.add_argument("--profile", required=True)
    p.add_argument("--testfn", required=True)
    p.add_argument("--level", type=int, default=1, choices=(0, 1, 2))
    p.add_argument("--y-min", dest="y_min", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("expectation", help="expectation corrections for a test function")
    p.add_argument("--profile", required=True)
    p.add_argument("--testfn", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_expectation)

    p = sub.add_parser("simulate", help="seeded Monte Carlo experiment")
    p.add_argument("--manifest", required=True)
    _add_common(p, seed=True, workers=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dbm", help="eigenvalue flow trajectory")
    p.add_argument("--profile", required=True)
    p.add_argument("--t-end", dest="t_end", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--mode", choices=("matrix-flow", "sde-euler"), default="matrix-flow")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_dbm)

    p = sub.add_parser("rerun", help="re-execute an embedded bundle manifest")
    p.add_argument("bundle_manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
