"""Experiment drivers shared by the command line and the acceptance tests."""
import time

import numpy as np

from .diagnostics import kde, kl_vs_exact, quantiles
from .engine import (PipelineOptions, benchmark_chain, build_maps, estimate_variance_constants,
                     generate_joint_prior, run_pipeline)
from .problems import (TOY_DATUM, elliptic1d_problem, synthetic_data_1d, toy_exact_logposterior,
                       toy_kl_axes, toy_problem)
from .transport import build_stationary_coarse_map


def toy_options(degree, K=150000, N=100000, seed=0, **kw):
    """Pipeline settings for the toy problem: one joint map of the given total degree."""
    return PipelineOptions(K=K, coarse_degree=degree, fine_map="joint", fine_degree=degree,
                           N=N, seed=seed, **kw)


def toy_kl_run(degree, K=150000, N=100000, seed=0, datum=TOY_DATUM, axes=None):
    """One toy replicate; returns ``(kl, ensemble, kde_grid)``."""
    axes = toy_kl_axes() if axes is None else axes
    ens = run_pipeline(toy_problem(), datum, toy_options(degree, K, N, seed))
    q = kde(ens.fine_samples, axes)
    kl = kl_vs_exact(lambda X: toy_exact_logposterior(X, datum), q, axes)
    return kl, ens, q


def toy_kl_study(degrees=(1, 3, 5, 7), replicates=10, K=150000, N=100000, seed=0,
                 datum=TOY_DATUM, log=None):
    """Mean and standard error of the KL divergence per map degree."""
    out = {}
    for deg in degrees:
        kls = []
        for r in range(replicates):
            kl, _, _ = toy_kl_run(deg, K, N, seed=seed + 1000 * deg + r, datum=datum)
            kls.append(kl)
            if log:
                log(f"degree {deg} replicate {r}: KL {kl:.4g}")
        kls = np.array(kls)
        se = kls.std(ddof=1) / np.sqrt(kls.size) if kls.size > 1 else 0.0
        out[deg] = {"kl": kls.tolist(), "mean": float(kls.mean()), "se": float(se)}
    return out


def toy_variance_study(Ns=(1000, 10000), Ms=(1, 5), replicates=30, K=50000, degree=3,
                       seed=0, datum=TOY_DATUM, coordinate=0):
    """Replicated posterior-mean estimates of one fine coordinate on the toy problem.

    The maps are built once and shared by all replicates, so the replicate
    variance isolates the Monte Carlo error of the ``N`` coarse and ``N M``
    fine samples.  Returns the per-design variances and the ``C1, C2`` fit.
    """
    prob = toy_problem()
    base = toy_options(degree, K, 1, seed)
    joint = generate_joint_prior(prob, K, np.random.default_rng(np.random.SeedSequence(seed)))
    transport, fine, _ = build_maps(prob, joint, base)
    designs = []
    for N in Ns:
        for M in Ms:
            est = []
            for r in range(replicates):
                opts = toy_options(degree, K, N, seed=seed + 1 + 7919 * r + 31 * N + M)
                opts.M = M
                ens = run_pipeline(prob, datum, opts, maps=(transport, fine))
                est.append(ens.fine_samples[:, coordinate].mean())
            est = np.array(est)
            designs.append({"N": N, "M": M, "variance": float(est.var(ddof=1)),
                            "mean": float(est.mean())})
    fit = estimate_variance_constants([d["N"] for d in designs], [d["M"] for d in designs],
                                      [d["variance"] for d in designs])
    return {"designs": designs, "C1": fit.C1, "C2": fit.C2, "r2": fit.r2}


def cell_at(x, n_cells):
    """Index of the fine cell of a uniform 1D grid on ``[0, 1]`` that contains ``x``."""
    return min(int(np.floor(x * n_cells + 1e-12)), n_cells - 1)


def elliptic1d_comparison(N=200000, M=1, bench_steps=500000, K=50000, coarse_degree=3,
                          seed=1, data_seed=2, points=(0.1, 0.5, 0.9),
                          levels=(0.05, 0.25, 0.5, 0.75, 0.95), sampler="premala", log=None):
    """Multiscale posterior against a full-dimensional DRAM chain on the 1D problem.

    Returns quantile tables at the fine cells containing ``points`` and
    their differences (multiscale minus benchmark).
    """
    prob = elliptic1d_problem()
    truth, data, locations = synthetic_data_1d(prob, seed=data_seed)
    t0 = time.perf_counter()
    ens = run_pipeline(prob, data, PipelineOptions(K=K, coarse_degree=coarse_degree,
                                                   fine_map="cross_covariance", N=N, M=M,
                                                   sampler=sampler, seed=seed))
    t_ms = time.perf_counter() - t0
    if log:
        log(f"multiscale run {t_ms:.1f}s, acceptance {ens.metadata['acceptance_rate']:.3f}")
    t0 = time.perf_counter()
    bench = benchmark_chain(prob, data, bench_steps, seed=seed + 1)
    t_bench = time.perf_counter() - t0
    if log:
        log(f"benchmark {t_bench:.1f}s, acceptance {bench.acceptance_rate:.3f}")
    n_cells = prob.fine_dim
    cells = [cell_at(x, n_cells) for x in points]
    qm = quantiles(ens.fine_samples[:, cells], levels)
    qb = quantiles(bench.samples[:, cells], levels)
    return {"points": list(points), "cells": cells, "levels": list(levels),
            "multiscale": qm, "benchmark": qb, "bias": qm - qb,
            "truth": truth, "data": data, "locations": locations,
            "ensemble": ens, "bench": bench, "t_multiscale": t_ms, "t_benchmark": t_bench}


def coarse_map_fidelity_2d(problem, K=50000, n_test=20000, degree=1, max_pooled=None,
                           seed=0, build=None, marginal_transform=True):
    """Compare map-induced per-element coarse samples with empirical prior samples.

    Both sample sets are standardized by the empirical prior moments of each
    of the 6 coordinates (pooled over elements).  Returns the largest
    per-coordinate mean error and the largest covariance-entry error over
    all elements, along with the fitted map.
    """
    ss = np.random.SeedSequence(seed).spawn(2)
    joint = generate_joint_prior(problem, K, np.random.default_rng(ss[0]))
    gamma = joint[:, :problem.coarse_dim]
    V = problem.coarse_dim // 6
    blocks = gamma.reshape(K, V, 6)
    smap = build_stationary_coarse_map(blocks, degree, opts=build, max_pooled=max_pooled,
                                       seed=seed, marginal_transform=marginal_transform)
    r = np.random.default_rng(ss[1]).standard_normal((n_test, problem.coarse_dim))
    induced = smap.evaluate(r).reshape(n_test, V, 6)
    mu = blocks.reshape(-1, 6).mean(axis=0)
    sd = blocks.reshape(-1, 6).std(axis=0)
    A = (blocks - mu) / sd
    B = (induced - mu) / sd
    mean_err = np.abs(A.mean(axis=0) - B.mean(axis=0))
    cov_err = np.stack([np.abs(np.cov(A[:, v], rowvar=False) - np.cov(B[:, v], rowvar=False))
                        for v in range(V)])
    return {"mean_error": float(mean_err.max()), "cov_error": float(cov_err.max()),
            "mean_error_per_element": mean_err, "cov_error_per_element": cov_err.max(axis=(1, 2)),
            "map": smap, "prior_blocks": blocks, "induced_blocks": induced}
