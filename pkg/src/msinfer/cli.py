"""Command-line driver: desk-scale experiments, map building, coarse sampling,
prolongation and diagnostics.

Every command writes into ``--out`` and finishes with a ``manifest.json``
holding the resolved configuration, the seeds and a SHA-256 of every file.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import copy
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics, io
from .engine import (BudgetModel, CoarseTransport, PipelineOptions, benchmark_chain, build_maps,
                     estimate_variance_constants, generate_joint_prior, optimal_allocation,
                     prolong, run_pipeline, sample_coarse)
from .exceptions import ConfigError, MultiscaleError, NumericalError, PipelineError
from .experiments import cell_at, coarse_map_fidelity_2d, toy_kl_run
from .problems import (TOY_DATUM, elliptic1d_problem, elliptic2d_problem, synthetic_data_1d,
                       synthetic_data_2d, toy_axes, toy_exact_logposterior, toy_problem)
from .sampler import ess_autocorrelation
from .transport import BuildOptions, StationaryCoarseMap, TriangularMap

log = logging.getLogger("msinfer")

DEFAULTS = {
    "toy": {
        "problem": {"name": "toy", "datum": TOY_DATUM},
        "map": {"degrees": [1, 3, 5, 7], "K": 150000},
        "sampler": {"name": "premala", "N": 100000, "M": 1},
        "replicates": 10,
    },
    "elliptic1d": {
        "problem": {"name": "elliptic1d", "n_coarse": 10, "fine_per_coarse": 10, "sigma2": 1.0,
                    "corr_length": 0.1, "noise_var": 1e-4, "data_seed": 2},
        "map": {"K": 50000, "coarse_degree": 3, "fine_map": "cross_covariance", "fine_degree": 3},
        "sampler": {"name": "premala", "N": 20000, "M": 1},
        "benchmark": {"steps": 50000},
        "points": [0.1, 0.3, 0.5, 0.9],
        "budget": None,
    },
    "elliptic2d": {
        "problem": {"name": "elliptic2d", "n_coarse": 4, "fine_per_coarse": 7, "sigma2": 1.0,
                    "corr_length": 0.1, "noise_var": 1e-6, "n_pilot": 500, "data_seed": 2},
        "map": {"K": 20000, "coarse_degree": 1, "marginal_transform": True},
        "sampler": {"name": "premala", "N": 5000, "M": 1},
        "realizations": 5,
        "fidelity_samples": 5000,
    },
}
DEFAULTS["build-maps"] = {k: DEFAULTS["elliptic1d"][k] for k in ("problem", "map")}
DEFAULTS["sample-coarse"] = {"problem": DEFAULTS["elliptic1d"]["problem"],
                             "sampler": DEFAULTS["elliptic1d"]["sampler"]}
DEFAULTS["prolong"] = {"M": 1}
DEFAULTS["diagnose"] = {"levels": list(diagnostics.QUANTILE_LEVELS)}


# ------------------------------------------------------------------ config


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(command, path=None, overrides=None):
    """Defaults for ``command`` merged with a JSON file and then ``overrides``."""
    cfg = DEFAULTS.get(command, {})
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    return _merge(cfg, overrides or {})


def make_problem(pcfg, reduced=None):
    """Problem instance from the ``problem`` config block."""
    p = dict(pcfg)
    name = p.pop("name", None)
    for key in ("datum", "data_seed"):
        p.pop(key, None)
    try:
        if name == "toy":
            return toy_problem()
        if name == "elliptic1d":
            return elliptic1d_problem(**p)
        if name == "elliptic2d":
            return elliptic2d_problem(reduced=reduced, **p)
    except TypeError as exc:
        raise ConfigError(f"bad problem parameters: {exc}") from exc
    raise ConfigError(f"unknown problem {name!r}")


def pipeline_options(cfg, seed):
    m, s = cfg.get("map", {}), cfg.get("sampler", {})
    build = BuildOptions(lambda_min=m["lambda_min"]) if "lambda_min" in m else None
    try:
        opts = PipelineOptions(
            K=int(m.get("K", 50000)), coarse_degree=int(m.get("coarse_degree", 3)),
            coarse_inverse_degree=m.get("coarse_inverse_degree"),
            fine_map=m.get("fine_map", "cross_covariance"), fine_degree=int(m.get("fine_degree", 3)),
            coarse_map=m.get("coarse_map", "triangular"), N=int(s.get("N", 10000)),
            M=int(s.get("M", 1)), burn_in=s.get("burn_in"), sampler=s.get("name", "premala"),
            chain=dict(s.get("chain", {})), seed=seed, build=build,
            max_pooled=m.get("max_pooled"),
            marginal_transform=bool(m.get("marginal_transform", False)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad pipeline settings: {exc}") from exc
    opts.validate()
    return opts


def _datum(values):
    values = np.atleast_1d(np.asarray(values, float))
    return float(values[0]) if values.size == 1 else values


# ---------------------------------------------------------------- commands


def cmd_toy(cfg, out, seed, threads):
    """KL of the multiscale posterior against the quadrature-exact toy posterior."""
    degrees = cfg["map"]["degrees"]
    if not degrees or any(d not in (1, 3, 5, 7) for d in degrees):
        raise ConfigError("toy map degrees must be drawn from {1, 3, 5, 7}")
    reps = int(cfg["replicates"])
    if reps < 1:
        raise ConfigError("replicates must be >= 1")
    K, N, datum = int(cfg["map"]["K"]), int(cfg["sampler"]["N"]), float(cfg["problem"]["datum"])
    plot_axes = toy_axes()
    exact = toy_exact_logposterior(diagnostics.grid_points(plot_axes), datum).reshape(
        plot_axes[0].size, -1)
    exact = np.exp(exact - exact.max())
    exact /= np.sum(diagnostics.trapezoid_weights(plot_axes) * exact)
    io.write_csv_grid(out / "exact_density.csv", exact)
    io.write_csv_grid(out / "grid_axis.csv", plot_axes[0][:, None], ["x"])
    table, seeds = {}, {}
    for deg in degrees:
        run_seeds = [seed + 1000 * deg + r for r in range(reps)]
        seeds[str(deg)] = run_seeds

        def one(s, deg=deg):
            return toy_kl_run(deg, K, N, s, datum)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(one, run_seeds))
        else:
            results = [one(s) for s in run_seeds]
        kls = np.array([r[0] for r in results])
        ens = results[0][1]
        io.save_samples(out / f"degree{deg}" / "samples", ens.fine_samples, ["theta1", "theta2"],
                        run_seeds[0])
        io.write_csv_grid(out / f"degree{deg}" / "kde.csv",
                          diagnostics.kde(ens.fine_samples, plot_axes))
        se = float(kls.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
        table[str(deg)] = {"kl": kls.tolist(), "mean": float(kls.mean()), "se": se}
        if kls.min() < -1e-6:
            log.warning("degree %d: KL estimate %.3g below zero (quadrature floor)", deg, kls.min())
        log.info("degree %d: mean KL %.4g (se %.2g)", deg, kls.mean(), se)
    io.write_json(out / "kl.json", table)
    return seeds


def _pipeline_report(prob, ens, out, points, levels):
    n = prob.fine_dim
    cells = [cell_at(x, n) for x in points]
    q = diagnostics.quantiles(ens.fine_samples, levels)
    io.save_samples(out / "fine_samples", ens.fine_samples,
                    [f"theta{i}" for i in range(n)], ens.metadata["seed"])
    io.save_samples(out / "coarse_samples", ens.coarse_samples,
                    [f"rc{i}" for i in range(ens.coarse_samples.shape[1])], ens.metadata["seed"])
    io.write_csv_grid(out / "quantiles.csv", q.T, [f"q{lv:g}" for lv in levels])
    meta = dict(ens.metadata)
    meta["cells"] = cells
    return q, cells, meta


def cmd_elliptic1d(cfg, out, seed, threads):
    """Multiscale posterior on the 1D problem, optionally against a benchmark chain."""
    prob = make_problem(cfg["problem"])
    opts = pipeline_options(cfg, seed)
    if opts.fine_map == "joint":
        raise ConfigError("the 1D command supports the cross_covariance and local fine maps")
    truth, data, loc = synthetic_data_1d(prob, seed=int(cfg["problem"].get("data_seed", seed)))
    io.save_observations(out / "observations.json", loc, data, prob.noise_var)
    io.save_samples(out / "truth", truth[None, :], [f"theta{i}" for i in range(prob.fine_dim)],
                    cfg["problem"].get("data_seed", seed))
    ens = run_pipeline(prob, data, opts)
    levels = diagnostics.QUANTILE_LEVELS
    q, cells, meta = _pipeline_report(prob, ens, out, cfg["points"], levels)
    meta["ess_per_second"] = ens.chain.ess_min / max(meta["t_on"], 1e-12)
    report = {"pipeline": meta, "quantiles": {str(x): q[:, c].tolist()
                                              for x, c in zip(cfg["points"], cells)}}
    steps = int((cfg.get("benchmark") or {}).get("steps", 0))
    if steps > 0:
        bench = benchmark_chain(prob, data, steps, seed=seed + 1)
        qb = diagnostics.quantiles(bench.samples, levels)
        io.save_samples(out / "benchmark_samples", bench.samples,
                        [f"theta{i}" for i in range(prob.fine_dim)], seed + 1)
        err = q - qb
        report["benchmark"] = {
            "steps": steps, "acceptance_rate": bench.acceptance_rate,
            "wall_time": bench.wall_time,
            "quantiles": {str(x): qb[:, c].tolist() for x, c in zip(cfg["points"], cells)},
            "bias": {f"E{int(round(100 * lv)):02d}": [float(err[i, c]) for c in cells]
                     for i, lv in enumerate(levels)},
            "mean_abs_bias": {f"E{int(round(100 * lv)):02d}": float(np.mean(np.abs(err[i])))
                              for i, lv in enumerate(levels)},
        }
    budget = cfg.get("budget")
    if budget:
        if "variances" in budget:
            fit = estimate_variance_constants(budget["N"], budget["M"], budget["variances"])
            C1, C2 = fit.C1, fit.C2
        else:
            C1, C2 = budget["C1"], budget["C2"]
        alloc = optimal_allocation(BudgetModel(C1, C2, meta["t_c"], meta["t_f"],
                                               budget.get("t_tot", 1.0)))
        report["budget"] = {"C1": C1, "C2": C2, "N_star": alloc.N, "M_star": alloc.M_raw,
                            "M": alloc.M}
    io.write_json(out / "report.json", report)
    return {"pipeline": seed, "data": cfg["problem"].get("data_seed", seed)}


def cmd_elliptic2d(cfg, out, seed, threads):
    """Stationary coarse map plus cross-covariance prolongation on the 2D problem."""
    prob = make_problem(cfg["problem"])
    cfg = _merge(cfg, {"map": {"coarse_map": "stationary", "fine_map": "cross_covariance"}})
    opts = pipeline_options(cfg, seed)
    truth, data, loc = synthetic_data_2d(prob, seed=int(cfg["problem"].get("data_seed", seed)))
    io.save_observations(out / "observations.json", loc, data, prob.noise_var)
    io.save_map(out / "maps" / "reduced_basis.json", prob.reduced)
    ens = run_pipeline(prob, data, opts)
    geom = prob.geometry
    theta = ens.fine_samples
    io.write_csv_grid(out / "posterior_mean.csv", geom.to_grid(theta.mean(axis=0)))
    io.write_csv_grid(out / "posterior_variance.csv", geom.to_grid(theta.var(axis=0)))
    io.write_csv_grid(out / "truth.csv", geom.to_grid(truth))
    n_real = min(int(cfg.get("realizations", 5)), theta.shape[0])
    picks = np.linspace(0, theta.shape[0] - 1, n_real).astype(int)
    for j, i in enumerate(picks):
        io.write_csv_grid(out / f"realization{j}.csv", geom.to_grid(theta[i]))
    prior_fields = prob.prior.sample(200, np.random.default_rng(seed + 3))
    v_post = diagnostics.lag1_variogram(np.stack([geom.to_grid(t) for t in theta[picks]]))
    v_prior = diagnostics.lag1_variogram(np.stack([geom.to_grid(t) for t in prior_fields]))
    report = {"pipeline": ens.metadata, "lag1_variogram": {"posterior": v_post, "prior": v_prior}}
    n_fid = int(cfg.get("fidelity_samples", 0))
    if n_fid > 0:
        fid = coarse_map_fidelity_2d(prob, K=opts.K, n_test=n_fid, degree=opts.coarse_degree,
                                     max_pooled=opts.max_pooled, seed=seed + 4,
                                     marginal_transform=opts.marginal_transform)
        report["coarse_map_fidelity"] = {"mean_error": fid["mean_error"],
                                         "cov_error": fid["cov_error"]}
        for k in range(6):
            for l in range(k + 1, 6):
                ax = [np.linspace(-4, 4, 61)] * 2
                mu = fid["prior_blocks"].reshape(-1, 6).mean(axis=0)
                sd = fid["prior_blocks"].reshape(-1, 6).std(axis=0)
                pair = [k, l]
                io.write_csv_grid(out / "fidelity" / f"prior_{k}{l}.csv", diagnostics.kde(
                    (fid["prior_blocks"][:, 0, pair] - mu[pair]) / sd[pair], ax))
                io.write_csv_grid(out / "fidelity" / f"map_{k}{l}.csv", diagnostics.kde(
                    (fid["induced_blocks"][:, 0, pair] - mu[pair]) / sd[pair], ax))
    io.write_json(out / "report.json", report)
    return {"pipeline": seed, "data": cfg["problem"].get("data_seed", seed)}


def cmd_build_maps(cfg, out, seed, threads):
    """Sample the joint prior and build the coarse and fine maps."""
    prob = make_problem(cfg["problem"])
    opts = pipeline_options(cfg, seed)
    joint = generate_joint_prior(prob, opts.K, np.random.default_rng(
        np.random.SeedSequence(seed).spawn(3)[0]))
    transport, fine, info = build_maps(prob, joint, opts)
    maps = out / "maps"
    if isinstance(transport.inverse, StationaryCoarseMap):
        io.save_map(maps / "coarse.json", transport.inverse)
    else:
        io.save_map(maps / "coarse_inverse.json", transport.inverse)
        fwd = getattr(transport.to_reference, "__self__", None)
        if isinstance(fwd, TriangularMap):
            io.save_map(maps / "coarse_forward.json", fwd)
    io.save_map(maps / "fine.json", fine)
    if getattr(prob, "reduced", None) is not None:
        io.save_map(maps / "reduced_basis.json", prob.reduced)
    io.write_json(out / "build_info.json", info)
    return {"prior": seed}


def _load_transport(maps):
    if (maps / "coarse.json").exists():
        smap = io.load_map(maps / "coarse.json")
        return CoarseTransport(smap.inverse, smap)
    inv = io.load_map(maps / "coarse_inverse.json")
    fwd_path = maps / "coarse_forward.json"
    fwd = io.load_map(fwd_path).evaluate if fwd_path.exists() else None
    return CoarseTransport(fwd, inv)


def cmd_sample_coarse(cfg, out, seed, threads):
    """Coarse MCMC in reference coordinates using saved maps and observations."""
    maps = Path(cfg.get("maps", ""))
    obs = cfg.get("observations")
    if not maps.is_dir() or not obs:
        raise ConfigError("sample-coarse needs 'maps' (a directory) and 'observations' (a file)")
    reduced = io.load_map(maps / "reduced_basis.json") if (maps / "reduced_basis.json").exists() \
        else None
    prob = make_problem(cfg["problem"], reduced=reduced)
    _, values, _ = io.load_observations(obs)
    opts = pipeline_options(cfg, seed)
    chain, start = sample_coarse(prob, _load_transport(maps), _datum(values), opts,
                                 np.random.default_rng(seed))
    io.save_samples(out / "coarse_samples", chain.samples,
                    [f"rc{i}" for i in range(chain.samples.shape[1])], seed)
    io.write_json(out / "chain.json", {**chain.summary(), "map_point": start.tolist()})
    return {"chain": seed}


def cmd_prolong(cfg, out, seed, threads):
    """Fine samples from saved coarse reference samples and a saved fine map."""
    coarse, fine_path = cfg.get("coarse_samples"), cfg.get("fine_map")
    if not coarse or not fine_path:
        raise ConfigError("prolong needs 'coarse_samples' and 'fine_map'")
    rc = io.load_samples(coarse)
    fine = io.load_map(fine_path)
    M = int(cfg.get("M", 1))
    if M < 1:
        raise ConfigError("M must be >= 1")
    theta, prov = prolong(rc, fine, M, np.random.default_rng(seed), rc.shape[1])
    io.save_samples(out / "fine_samples", theta, [f"theta{i}" for i in range(theta.shape[1])],
                    seed)
    io.save_samples(out / "provenance", prov, ["coarse_index", "fine_index"], seed)
    return {"prolong": seed}


def cmd_diagnose(cfg, out, seed, threads):
    """Quantiles, ESS and (for one or two columns) a KDE grid of a sample file."""
    path = cfg.get("samples")
    if not path:
        raise ConfigError("diagnose needs 'samples'")
    sm = io.SampleMatrixFile.load(path)
    X = sm.data
    levels = cfg.get("levels", list(diagnostics.QUANTILE_LEVELS))
    try:
        q = diagnostics.quantiles(X, levels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = {"rows": sm.rows, "cols": sm.cols,
              "quantiles": {name: q[:, j].tolist() for j, name in enumerate(sm.column_names)}}
    if X.shape[0] >= 100:
        report["ess"] = ess_autocorrelation(X).tolist()
    io.write_csv_grid(out / "quantiles.csv", q.T, [f"q{lv:g}" for lv in levels])
    if X.shape[1] <= 2:
        box = cfg.get("box", [float(X.min()), float(X.max())])
        axes = [np.linspace(box[0], box[1], int(cfg.get("grid", 201)))] * X.shape[1]
        dens = diagnostics.kde(X, axes)
        io.write_csv_grid(out / "kde.csv", dens)
        if cfg.get("toy_exact") and X.shape[1] == 2:
            datum = float(cfg.get("datum", TOY_DATUM))
            report["kl"] = diagnostics.kl_vs_exact(
                lambda P: toy_exact_logposterior(P, datum), dens, axes)
    io.write_json(out / "diagnostics.json", report)
    return {}


COMMANDS = {
    "toy": cmd_toy, "elliptic1d": cmd_elliptic1d, "elliptic2d": cmd_elliptic2d,
    "build-maps": cmd_build_maps, "sample-coarse": cmd_sample_coarse, "prolong": cmd_prolong,
    "diagnose": cmd_diagnose,
}


# ------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent replicates")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="msinfer", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("toy", parents=[common], help="two-parameter toy problem, KL vs exact")
    p.add_argument("--degrees", type=int, nargs="+")
    p.add_argument("--replicates", type=int)
    p.add_argument("-K", type=int, dest="K")
    p.add_argument("-N", type=int, dest="N")
    p = sub.add_parser("elliptic1d", parents=[common], help="1D multiscale posterior")
    p.add_argument("-N", type=int, dest="N")
    p.add_argument("-M", type=int, dest="M")
    p.add_argument("--benchmark-steps", type=int)
    p = sub.add_parser("elliptic2d", parents=[common], help="2D multiscale posterior")
    p.add_argument("-N", type=int, dest="N")
    p.add_argument("-K", type=int, dest="K")
    sub.add_parser("build-maps", parents=[common], help="build coarse and fine maps")
    p = sub.add_parser("sample-coarse", parents=[common], help="coarse MCMC from saved maps")
    p.add_argument("--maps", type=str)
    p.add_argument("--observations", type=str)
    p.add_argument("-N", type=int, dest="N")
    p = sub.add_parser("prolong", parents=[common], help="fine samples from coarse samples")
    p.add_argument("--coarse-samples", type=str)
    p.add_argument("--fine-map", type=str)
    p.add_argument("-M", type=int, dest="M")
    p = sub.add_parser("diagnose", parents=[common], help="quantiles, ESS and KDE of samples")
    p.add_argument("--samples", type=str)
    p.add_argument("--toy-exact", action="store_true", help="report KL against the toy posterior")
    return parser


def _overrides(args):
    a = vars(args)
    o = {}
    if a.get("degrees"):
        o.setdefault("map", {})["degrees"] = a["degrees"]
    if a.get("replicates") is not None:
        o["replicates"] = a["replicates"]
    if a.get("K") is not None:
        o.setdefault("map", {})["K"] = a["K"]
    if a.get("N") is not None:
        o.setdefault("sampler", {})["N"] = a["N"]
    if a.get("M") is not None:
        if args.command == "prolong":
            o["M"] = a["M"]
        else:
            o.setdefault("sampler", {})["M"] = a["M"]
    if a.get("benchmark_steps") is not None:
        o["benchmark"] = {"steps": a["benchmark_steps"]}
    for key in ("maps", "observations", "coarse_samples", "fine_map", "samples"):
        if a.get(key):
            o[key] = a[key]
    if a.get("toy_exact"):
        o["toy_exact"] = True
    return o


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.command, args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        seeds = COMMANDS[args.command](cfg, out, args.seed, args.threads)
        io.write_manifest(out, args.command, cfg, {"base": args.seed, **(seeds or {})},
                          {"argv": list(sys.argv[1:] if argv is None else argv),
                           "wall_time": time.perf_counter() - t0})
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError) as exc:
        print(f"configuration error: missing input {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, ConfigError) else 3
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except MultiscaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
