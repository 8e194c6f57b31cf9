"""Oracle suites behind ``safembrl validate``.

Each suite compares the library against an independent reference: the exact
ARD-RBF kernel for the Fastfood features, brute-force Monte Carlo through the
posterior for moment matching, and closed-form values for the limit
functions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fastfood import build_stack, features
from .lgm import TrainingDataset, fit
from .moment_matching import BeliefState, raw_moments
from .safe_limits import SafetyParams, k_s, k_t, limits


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def rbf(x, y, lengthscales) -> np.ndarray:
    d = (x - y) / lengthscales
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


def kernel_errors(sizes=(64, 256, 512, 1024), n_pairs=100, n_seeds=50, input_dim=8, seed=1234) -> dict[int, float]:
    """RMS error of the seed-averaged feature inner product against the exact kernel."""
    rng = np.random.default_rng(seed)
    ell = np.exp(rng.uniform(np.log(0.5), np.log(2.0), input_dim))
    x = rng.normal(size=(n_pairs, input_dim))
    y = x + rng.normal(scale=0.7, size=(n_pairs, input_dim)) * ell
    exact = rbf(x, y, ell)
    out = {}
    for M in sizes:
        approx = np.zeros(n_pairs)
        for s in range(n_seeds):
            stack = build_stack(input_dim, M, ell, seed=s)
            approx += np.sum(features(stack, x) * features(stack, y), axis=1)
        approx /= n_seeds
        out[M] = float(np.sqrt(np.mean((approx - exact) ** 2)))
    return out


def kernel_suite() -> SuiteResult:
    t0 = time.perf_counter()
    err = kernel_errors()
    ms = sorted(err)
    decreasing = all(err[a] > err[b] for a, b in zip(ms, ms[1:]))
    ok = err[512] <= 0.05 and decreasing
    detail = ", ".join(f"M={m}: {err[m]:.4f}" for m in ms)
    return SuiteResult("fastfood kernel", ok, detail, time.perf_counter() - t0)


def random_case(rng, num_features=16):
    """Random (model, belief, control) with at most four model inputs."""
    d_state = int(rng.integers(1, 4))
    d_in = d_state + 1
    n = 60
    ell = np.exp(rng.uniform(np.log(0.5), np.log(2.0), d_in))
    stack = build_stack(d_in, num_features, ell, seed=int(rng.integers(1 << 31)))
    X = rng.normal(size=(n, d_in))
    Y = np.sin(X @ rng.normal(size=(d_in, d_state))) + 0.1 * rng.normal(size=(n, d_state))
    model = fit(TrainingDataset(X, Y), stack,
                np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_state)),
                np.exp(rng.uniform(np.log(0.3), np.log(3.0), d_state)))
    mean = rng.normal(size=d_state)
    var = rng.uniform(0.0, 0.04, size=d_state)
    u = rng.normal(size=1)
    return model, mean, var, u


def monte_carlo_moments(model, mean, var, u, n_samples, rng, chunk=250_000):
    """Sample inputs, push them through the posterior, return (mean, var, se_mean, se_var).

    The variance target is the law of total variance ``E[v(x)] + Var[f(x)]``.
    Features are evaluated through the explicit frequency matrix, a separate
    path from the one used for propagation.
    """
    Om = model.stack.frequencies
    c = np.sqrt(2.0 / model.num_features)
    W = model.weights
    Ainv = model.precision_inv
    f_all, v_all = [], []
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        xs = mean + np.sqrt(var) * rng.standard_normal((k, mean.size))
        x = np.concatenate([xs, np.broadcast_to(u, (k, u.size))], axis=1)
        phi = c * np.cos(x @ Om.T + model.stack.phases)
        f_all.append(phi @ W.T)
        v_all.append(np.stack([np.sum((phi @ Ainv[i]) * phi, axis=1) for i in range(W.shape[0])], 1))
        left -= k
    f = np.concatenate(f_all)
    v = np.concatenate(v_all)
    fm = f.mean(axis=0)
    g = v + (f - fm) ** 2
    n = f.shape[0]
    return fm, g.mean(axis=0), f.std(axis=0, ddof=1) / np.sqrt(n), g.std(axis=0, ddof=1) / np.sqrt(n)


def moment_matching_counts(n_cases=50, n_samples=1_000_000, seed=7, z=3.0):
    """Number of cases whose analytic mean / variance sit within ``z`` standard errors."""
    rng = np.random.default_rng(seed)
    ok_mean = ok_var = 0
    for _ in range(n_cases):
        model, mean, var, u = random_case(rng)
        mu, s2 = raw_moments(model, mean[None], var[None], u[None])
        fm, fv, se_m, se_v = monte_carlo_moments(model, mean, var, u, n_samples, rng)
        ok_mean += bool(np.all(np.abs(mu[0] - fm) <= z * se_m))
        ok_var += bool(np.all(np.abs(s2[0] - fv) <= z * se_v))
    return ok_mean, ok_var


def moment_matching_suite(n_cases=50, n_samples=1_000_000) -> SuiteResult:
    t0 = time.perf_counter()
    ok_mean, ok_var = moment_matching_counts(n_cases, n_samples)
    need = int(np.ceil(0.96 * n_cases))
    return SuiteResult("moment matching vs Monte Carlo", ok_mean >= need and ok_var >= need,
                       f"mean {ok_mean}/{n_cases}, variance {ok_var}/{n_cases} within 3 SE",
                       time.perf_counter() - t0)


def limit_checks() -> dict[str, bool]:
    p = SafetyParams.from_log_alphas(6.0, 6.0)
    lo0, hi0 = p.base_box
    moving = np.array([0.3, -0.4])
    exact = BeliefState(np.r_[0.1, 0.2, 0.9, 0.8, moving], np.zeros(6))
    vague = BeliefState(np.r_[0.1, 0.2, 0.9, 0.8, moving], np.full(6, 1e6))
    still = BeliefState(np.r_[0.1, 0.2, 0.9, 0.8, 0.0, 0.0], np.full(6, 0.5))
    off = SafetyParams(alpha_s=0.0, alpha_t=0.0)
    lo_c, hi_c = limits(off, BeliefState(vague.mean, np.full(6, 3.0)))
    return {
        "K_s(Sigma_p=0) = 1": k_s(p, exact) == 1.0,
        "K_s -> beta_s": k_s(p, vague) == p.beta_s,
        "K_t(Sigma_p=0) = 0": np.array_equal(k_t(p, exact), np.zeros(2)),
        "K_t(mu_pdot=0) = 0": np.array_equal(k_t(p, still), np.zeros(2)),
        "alpha=0 gives the base box": np.array_equal(lo_c, lo0) and np.array_equal(hi_c, hi0),
    }


def limits_suite() -> SuiteResult:
    t0 = time.perf_counter()
    checks = limit_checks()
    failed = [k for k, v in checks.items() if not v]
    return SuiteResult("limit functions", not failed,
                       "all exact" if not failed else "failed: " + ", ".join(failed),
                       time.perf_counter() - t0)


SUITES = {"kernel": kernel_suite, "moments": moment_matching_suite, "limits": limits_suite}


def run_all(names=None) -> list[SuiteResult]:
    return [SUITES[n]() for n in (names or SUITES)]
