"""Importance-sampling measure for plain (non-modulated) networks.

Under the twisted measure the Poisson arrival mean, the arrival epochs and
the job sizes are all reweighted by the optimal twist ``theta*``. Epochs are
described through ``u``, the time between an arrival and the horizon.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analytics import TwistSolution, network_segments, solve_twist
from .model import NetworkSpec
from .segments import SegmentTwist, log_beta, sample_arrivals


@dataclass(frozen=True, eq=False)
class TwistPlan:
    """Everything needed to draw one network sample under the twist.

    Attributes
    ----------
    theta_star : ndarray
        Twist vector.
    poisson_mean_Q : float
        Twisted mean number of arrivals over ``[0, t]``.
    log_M_at_theta_star : float
        ``log M(theta*)``, consistent with ``poisson_mean_Q``.
    """

    spec: NetworkSpec
    solution: TwistSolution
    segment_twist: SegmentTwist

    @property
    def theta_star(self) -> np.ndarray:
        return self.solution.theta_star

    @property
    def horizon(self) -> float:
        return self.spec.horizon

    @property
    def poisson_mean_Q(self) -> float:
        return self.segment_twist.poisson_mean

    @property
    def log_M_at_theta_star(self) -> float:
        return self.spec.lam * (self.segment_twist.total - self.spec.horizon)

    @property
    def I(self) -> float:
        """Rate value recomputed from ``log_M_at_theta_star``."""
        return float(self.theta_star @ self.solution.a - self.log_M_at_theta_star)

    def epoch_cdf(self, u) -> np.ndarray:
        return self.segment_twist.cdf(u)

    def epoch_inverse(self, h) -> np.ndarray:
        return self.segment_twist.inverse_cdf(h)

    def epoch_density(self, u) -> np.ndarray:
        return self.segment_twist.density(u)

    def job_twist(self, u) -> np.ndarray:
        """``e^{-Ru} theta*`` per epoch, shape ``(len(u), L)``."""
        return self.segment_twist.job_twist(u)

    def job_rates(self, u) -> np.ndarray:
        return self.segment_twist.job_rates(u)


def build_plan(spec: NetworkSpec, solution: TwistSolution | None = None, a=None) -> TwistPlan:
    """Twisted measure for ``spec``; raises ``DomainExceeded`` if infeasible."""
    if solution is None:
        solution = solve_twist(spec, a)
    (seg,) = network_segments(spec)
    tw = seg.twisted(solution.theta_star)
    return TwistPlan(spec, solution, tw)


def sample_epoch(plan: TwistPlan, rng) -> float:
    return float(plan.epoch_inverse(rng.random()))


def sample_job(plan: TwistPlan, u: float, rng) -> np.ndarray:
    """Job-size vector for an arrival ``u`` before the horizon."""
    from .segments import _job_sizes

    v = plan.job_twist(u)
    e = rng.standard_exponential((1, plan.spec.L))
    return _job_sizes(plan.spec.jobs, v, e)[0]


def sample_batch(plan: TwistPlan, n: int, size: int, rng, mode: str = "twisted"):
    """Draw ``size`` independent runs of ``Y_n(t)``.

    Returns ``(Y, log_L, arrivals)`` with ``Y`` of shape ``(size, L)``. With
    ``mode="plain"`` the runs follow the original measure and ``log_L`` is 0.
    """
    arr = sample_arrivals([plan.segment_twist] * size, n, rng, mode=mode)
    L = plan.spec.L
    Y = np.zeros((size, L))
    for ell in range(L):
        Y[:, ell] = np.bincount(arr.owner, weights=arr.X[:, ell], minlength=size)
    if mode == "plain":
        return Y, np.zeros(size), arr
    log_L = -(Y * plan.theta_star).sum(1) + n * plan.log_M_at_theta_star
    return Y, log_L, arr


def sample_Yn_and_LR(spec: NetworkSpec, plan: TwistPlan, n: int, rng):
    """One twisted run: ``(Y_n(t), log L)``."""
    Y, log_L, _ = sample_batch(plan, n, 1, rng)
    return Y[0], float(log_L[0])


def event_log_lr(plan: TwistPlan, n: int, count: int, u, B) -> float:
    """Log-likelihood ratio rebuilt from the individual events of one run.

    Sums the Poisson count ratio, epoch density ratios and job density
    ratios. Agrees with ``-<theta*, Y_n> + n log M(theta*)`` up to rounding.
    """
    spec = plan.spec
    t = spec.horizon
    mP = n * spec.lam * t
    mQ = n * plan.poisson_mean_Q
    out = (mQ - mP) + count * np.log(mP / mQ)
    if count == 0:
        return float(out)
    u = np.asarray(u, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    out += np.sum(np.log((1.0 / t) / plan.epoch_density(u)))
    v = plan.job_twist(u)
    # twisted job density = e^{<v,B>} f(B) / beta(v)
    out += np.sum(log_beta(spec.jobs, v)) - np.sum(v * B)
    return float(out)


def density_curves(plan: TwistPlan, grid) -> dict:
    """Epoch density and twisted job rates on ``grid`` (values of ``u``).

    Both time conventions are reported: ``u`` (time before the horizon) and
    real time ``t - u``.
    """
    u = np.asarray(grid, dtype=float)
    return {
        "u": u,
        "real_time": plan.horizon - u,
        "density": plan.epoch_density(u),
        "job_rate": plan.job_rates(u),
    }
