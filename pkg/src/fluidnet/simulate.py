"""Estimation drivers: importance sampling and crude Monte Carlo.

Runs are generated in batches of ``BATCH`` runs. Batch ``b`` of a stream
draws from its own generator seeded by ``(seed, stream, b)``, so results do
not depend on how batches are spread over workers. Batch moments are merged
in batch order and the precision rule is checked after every batch.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analytics
from .model import ModulatedNetworkSpec, NetworkSpec
from .modulation import PathTwistSolver, merge_optimal, sample_modulated_batch, sample_path
from .twist import build_plan, sample_batch

BATCH = 100
MIN_RUNS = 1000
MAX_RUNS = 10**8
_IS, _MC = 0, 1


class MaxRunsExceeded(RuntimeError):
    def __init__(self, estimate):
        super().__init__(f"run cap reached after {estimate.runs} runs")
        self.estimate = estimate


class BoundViolation(AssertionError):
    """A twisted run produced ``L 1{hit} > exp(-n I)``."""


@dataclass
class RunningMoments:
    """Count, mean and sum of squared deviations, mergeable exactly."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    sum_sq: float = 0.0  # plain sum of squares, for second-moment estimates

    @classmethod
    def of(cls, x) -> "RunningMoments":
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return cls()
        m = float(x.mean())
        return cls(int(x.size), m, float(np.sum((x - m) ** 2)), float(np.sum(x * x)))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return RunningMoments(self.count, self.mean, self.m2, self.sum_sq)
        if self.count == 0:
            return RunningMoments(other.count, other.mean, other.m2, other.sum_sq)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return RunningMoments(n, mean, m2, self.sum_sq + other.sum_sq)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else math.nan


@dataclass
class Estimate:
    """Result of one estimation.

    ``half_width = T sqrt(variance_hat / runs)``; ``capped`` flags that the
    run cap stopped the estimation before the precision rule was met.
    """

    p_hat: float
    variance_hat: float
    half_width: float
    runs: int
    wall_time: float
    master_seed: int
    capped: bool = False
    second_moment: float = math.nan
    diagnostics: list = field(default_factory=list, repr=False)
    best_path: tuple | None = field(default=None, repr=False)

    @property
    def relative_half_width(self) -> float:
        return self.half_width / self.p_hat if self.p_hat > 0 else math.inf


def batch_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Generator for batch ``index`` of ``stream`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def _tolerance(*terms):
    return 64 * np.finfo(float).eps * sum(np.abs(t) for t in terms)


# --- batch samplers --------------------------------------------------------------
# Each sampler maps a generator to (values, diagnostics) for BATCH runs.


class PlainSampler:
    def __init__(self, spec: NetworkSpec, a, n: int, mode: str = "is", check_bound: bool = True):
        self.a = analytics._target(a)
        self.n = n
        self.mode = mode
        self.check_bound = check_bound
        # crude sampling ignores the twist and only uses the plain dynamics
        self.plan = build_plan(spec, a=self.a if mode == "is" else np.zeros(spec.L))

    def __call__(self, rng, size: int, collect: bool = False):
        plan, n = self.plan, self.n
        Y, log_L, _ = sample_batch(plan, n, size, rng, mode="twisted" if self.mode == "is" else "plain")
        hit = np.all(Y >= n * self.a, axis=1)
        if self.mode == "mc":
            return hit.astype(float), None
        if self.check_bound and hit.any():
            bound = -n * plan.I
            tol = _tolerance(Y @ plan.theta_star, n * plan.log_M_at_theta_star, n * plan.theta_star @ self.a)
            over = hit & (log_L > bound + tol)
            if over.any():
                raise BoundViolation(f"log L = {log_L[over][0]!r} exceeds -n I = {bound!r}")
        return np.where(hit, np.exp(log_L), 0.0), None


class ModulatedSampler:
    def __init__(self, spec: ModulatedNetworkSpec, a, n: int, mode: str = "is", check_bound: bool = True):
        self.spec = spec
        self.a = analytics._target(a)
        self.n = n
        self.mode = mode
        self.check_bound = check_bound
        self.solver = PathTwistSolver(spec, self.a if mode == "is" else np.zeros(spec.L))

    def __call__(self, rng, size: int, collect: bool = False):
        spec, n = self.spec, self.n
        init = spec.initial_distribution
        paths = [sample_path(spec.Q, init, spec.horizon, rng) for _ in range(size)]
        twists = self.solver.solve(paths)
        mode = "twisted" if self.mode == "is" else "plain"
        Y, log_L, arr, seg_run = sample_modulated_batch(twists, spec, n, rng, mode=mode)
        hit = np.all(Y >= n * self.a, axis=1)
        if self.mode == "mc":
            return hit.astype(float), None
        I_f = np.array([pt.I_f for pt in twists])
        if self.check_bound and hit.any():
            theta = np.array([pt.theta_star_f for pt in twists])
            log_M = np.array([pt.log_M_f for pt in twists])
            tol = _tolerance((Y * theta).sum(1), n * log_M, n * theta @ self.a)
            over = hit & (log_L > -n * I_f + tol)
            if over.any():
                k = int(np.flatnonzero(over)[0])
                raise BoundViolation(f"run on path {paths[k].signature()} exceeds exp(-n I_f)")
        diag = None
        if collect:
            diag = [
                {
                    "path": pt.path,
                    "I_f": pt.I_f,
                    "theta": pt.theta_star_f.copy(),
                    "counts": arr.counts[seg_run == k].copy(),
                    "means_Q": n * pt.poisson_means_Q,
                    "means_P": n * pt.poisson_means_P,
                    "hit": bool(hit[k]),
                }
                for k, pt in enumerate(twists)
            ]
        else:
            best = min(range(size), key=lambda k: (I_f[k],) + paths[k].sort_key()) if size else None
            diag = None if best is None else (paths[best], float(I_f[best]))
        return np.where(hit, np.exp(log_L), 0.0), diag


def make_sampler(spec, a, n: int, mode: str = "is", check_bound: bool = True):
    if isinstance(spec, ModulatedNetworkSpec):
        return ModulatedSampler(spec, a, n, mode, check_bound)
    return PlainSampler(spec, a, n, mode, check_bound)


# --- driver -----------------------------------------------------------------------


def _run_batch(args):
    sampler, seed, stream, index, collect = args
    values, diag = sampler(batch_rng(seed, stream, index), BATCH, collect)
    return RunningMoments.of(values), diag


def run_estimator(
    sampler,
    eps: float,
    T: float,
    seed: int,
    stream: int = 0,
    max_runs: int = MAX_RUNS,
    min_runs: int = MIN_RUNS,
    workers: int = 1,
    collect: bool = False,
    fixed_runs: int | None = None,
) -> Estimate:
    """Draw batches until ``half_width / p_hat <= eps`` (or a cap).

    With ``fixed_runs`` the precision rule is ignored and exactly that many
    runs (rounded up to whole batches) are drawn.
    """
    start = time.perf_counter()
    acc = RunningMoments()
    diags: list = []
    best = None
    max_batches = max(1, math.ceil((fixed_runs or max_runs) / BATCH))
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    index = 0
    done = False
    capped = False
    try:
        while not done:
            chunk = range(index, min(index + max(1, 4 * workers), max_batches))
            jobs = [(sampler, seed, stream, b, collect) for b in chunk]
            results = pool.map(_run_batch, jobs) if pool else map(_run_batch, jobs)
            for b, (mom, diag) in zip(chunk, results):
                acc = acc.merge(mom)
                if collect:
                    diags.extend(diag or [])
                elif diag is not None and isinstance(diag, tuple):
                    best = merge_optimal(best, diag)
                index = b + 1
                if fixed_runs is None and acc.count >= min_runs and acc.mean > 0:
                    hw = T * math.sqrt(acc.variance / acc.count)
                    if hw / acc.mean <= eps:
                        done = True
                        break
                if index >= max_batches:
                    capped = fixed_runs is None
                    done = True
                    break
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)
    var = acc.variance
    hw = T * math.sqrt(var / acc.count) if acc.count > 1 else math.nan
    return Estimate(
        p_hat=acc.mean,
        variance_hat=var,
        half_width=hw,
        runs=acc.count,
        wall_time=time.perf_counter() - start,
        master_seed=seed,
        capped=capped,
        second_moment=acc.sum_sq / acc.count if acc.count else math.nan,
        diagnostics=diags,
        best_path=best,
    )


def _stream(n: int, kind: int) -> int:
    return 2 * int(n) + kind


def estimate_is(spec, a, n: int, eps: float = 0.1, T: float = 1.96, seed: int = 0,
                max_runs: int = MAX_RUNS, workers: int = 1, raise_on_cap: bool = False,
                collect: bool = False, fixed_runs: int | None = None) -> Estimate:
    """Importance-sampling estimate of ``P(Y_n(t) >= n a)``."""
    sampler = make_sampler(spec, a, n, "is")
    est = run_estimator(sampler, eps, T, seed, _stream(n, _IS), max_runs,
                        workers=workers, collect=collect, fixed_runs=fixed_runs)
    if est.capped and raise_on_cap:
        raise MaxRunsExceeded(est)
    return est


def estimate_mc(spec, a, n: int, eps: float = 0.1, T: float = 1.96, seed: int = 0,
                max_runs: int = MAX_RUNS, workers: int = 1, raise_on_cap: bool = False,
                fixed_runs: int | None = None) -> Estimate:
    """Crude Monte Carlo estimate of ``P(Y_n(t) >= n a)``."""
    sampler = make_sampler(spec, a, n, "mc")
    est = run_estimator(sampler, eps, T, seed, _stream(n, _MC), max_runs,
                        workers=workers, fixed_runs=fixed_runs)
    if est.capped and raise_on_cap:
        raise MaxRunsExceeded(est)
    return est


SWEEP_COLUMNS = ("n", "p_hat", "half_width", "runs", "predicted_runs", "br_approx", "seed")


def sweep(spec, a, n_list, eps: float = 0.1, T: float = 1.96, seed: int = 0,
          max_runs: int = MAX_RUNS, workers: int = 1) -> list[dict]:
    """One IS estimate per ``n``, with the asymptotic predictions.

    Predictions are only available for plain networks; modulated rows carry
    NaN there.
    """
    rows = []
    sol = None
    if isinstance(spec, NetworkSpec) and len(n_list):
        sol = analytics.solve_twist(spec, a)
    for n in n_list:
        est = estimate_is(spec, a, n, eps, T, seed, max_runs, workers)
        if sol is not None:
            pred = analytics.predicted_runs(spec, a, n, eps, T, sol)
            br = analytics.bahadur_rao_p(spec, a, n, sol)
        else:
            pred = br = math.nan
        rows.append({
            "n": int(n),
            "p_hat": est.p_hat,
            "half_width": est.half_width,
            "runs": est.runs,
            "predicted_runs": pred,
            "br_approx": br,
            "seed": seed,
            "capped": est.capped,
        })
    return rows
