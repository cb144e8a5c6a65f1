"""Log-MGFs, twists, rate functions and run-count asymptotics.

Everything here works on a list of :class:`~fluidnet.segments.Segment`; a
plain network is the one-segment case, see :func:`network_segments`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import NetworkSpec, RareTarget
from .segments import DomainExceeded, Segment

ACTIVE_TOL = 1e-8


class NonConvergence(RuntimeError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class RarityViolated(ValueError):
    pass


def matrix_exp(M, s: float = 1.0) -> np.ndarray:
    """``expm(-M s)`` by scaling and squaring (Pade)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)) or not math.isfinite(s):
        raise ValueError("matrix_exp needs finite input")
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = linalg.expm(-M * s)
        except FloatingPointError as exc:
            raise OverflowError(f"matrix exponential overflowed for s={s}") from exc
    if not np.all(np.isfinite(out)):
        raise OverflowError(f"matrix exponential overflowed for s={s}")
    return out


def network_segments(spec: NetworkSpec) -> list[Segment]:
    return [Segment(spec.lam, spec.jobs, spec.R, spec.horizon)]


def _segments(source) -> list[Segment]:
    if isinstance(source, NetworkSpec):
        return network_segments(source)
    return list(source)


def _target(a) -> np.ndarray:
    if isinstance(a, RareTarget):
        return a.vector
    return np.atleast_1d(np.asarray(a, dtype=float))


def log_mgf_parts(source, theta, order: int = 2):
    """``log M(theta)`` with gradient and Hessian, summed over segments."""
    segs = _segments(source)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    L = segs[0].L
    val = 0.0
    grad = np.zeros(L)
    hess = np.zeros((L, L))
    for seg in segs:
        parts = seg.log_mgf(theta, order)
        val += parts[0]
        if order >= 1:
            grad += parts[1]
        if order >= 2:
            hess += parts[2]
    return (val, grad, hess)[: order + 1]


def log_mgf(spec, theta, strict: bool = True) -> float:
    """``log E exp(<theta, X(t)>) = lam int_0^t (beta(e^{-Ru} theta) - 1) du``.

    Raises :class:`DomainExceeded` outside the domain, or returns ``inf``
    when ``strict`` is false.
    """
    try:
        return float(log_mgf_parts(spec, theta, order=0)[0])
    except DomainExceeded:
        if strict:
            raise
        return math.inf


def log_mgf_exp_closed(mu: float, r: float, theta: float, s: float) -> float:
    """``int_0^s mu / (mu - e^{-ru} theta) du`` for exponential jobs."""
    if theta >= mu:
        raise ValueError(f"theta={theta} must be below mu={mu}")
    return math.log((mu * math.exp(r * s) - theta) / (mu - theta)) / r


def mean_vector(spec) -> np.ndarray:
    """Mean ``m(t)`` of the network state at the horizon."""
    segs = _segments(spec)
    return sum(seg.mean_contribution() for seg in segs)


def hessian_logM(spec, theta) -> np.ndarray:
    return log_mgf_parts(spec, theta, order=2)[2]


@dataclass(frozen=True)
class TwistSolution:
    theta_star: np.ndarray
    b_star: np.ndarray
    I: float
    log_M: float
    hessian: np.ndarray
    a: np.ndarray
    iterations: int = 0

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.theta_star > ACTIVE_TOL))

    @property
    def D(self) -> int:
        return len(self.active)

    @property
    def tau(self) -> float:
        """Determinant of the Hessian of ``log M`` restricted to the active set."""
        idx = list(self.active)
        if not idx:
            return 1.0
        return float(np.linalg.det(self.hessian[np.ix_(idx, idx)]))


def maximize_legendre(source, a, theta0=None, tol: float = 1e-11, max_iter: int = 200):
    """Maximize ``<theta, a> - log M(theta)`` over ``theta >= 0``.

    Projected Newton with Armijo backtracking; trial points outside the MGF
    domain are rejected, which acts as a barrier at the domain boundary.
    """
    segs = _segments(source)
    a = _target(a)
    L = segs[0].L
    theta = np.zeros(L) if theta0 is None else np.maximum(np.asarray(theta0, float), 0.0)
    try:
        val, grad, hess = log_mgf_parts(segs, theta)
    except DomainExceeded:
        theta = np.zeros(L)
        val, grad, hess = log_mgf_parts(segs, theta)
    obj = theta @ a - val
    scale = 1.0 + np.max(np.abs(a))
    for it in range(max_iter):
        gg = a - grad
        free = (theta > 0) | (gg > 0)
        pg = np.where(free, gg, 0.0)
        if np.max(np.abs(pg)) <= tol * scale:
            break
        d = np.zeros(L)
        H = hess[np.ix_(free, free)]
        try:
            d[free] = np.linalg.solve(H, gg[free])
        except np.linalg.LinAlgError:
            d[free] = gg[free]
        step = 1.0
        accepted = False
        while step > 1e-30:
            cand = np.maximum(theta + step * d, 0.0)
            try:
                cval, cgrad, chess = log_mgf_parts(segs, cand)
            except DomainExceeded:
                step *= 0.5
                continue
            cobj = cand @ a - cval
            if cobj >= obj + 1e-4 * (gg @ (cand - theta)) - 1e-15 * abs(obj):
                accepted = True
                break
            if np.max(np.abs(pg)) <= 1e-6 * scale:
                # objective changes are below rounding here; judge the step by
                # the projected gradient instead
                cg = a - cgrad
                cpg = np.where((cand > 0) | (cg > 0), cg, 0.0)
                if np.max(np.abs(cpg)) < np.max(np.abs(pg)):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            if np.max(np.abs(pg)) <= 1e-7 * scale:
                break
            raise NonConvergence("line search failed", last=theta)
        theta, val, grad, hess, obj = cand, cval, cgrad, chess, cobj
    else:
        raise NonConvergence(f"no convergence after {max_iter} iterations", last=theta)
    return TwistSolution(
        theta_star=theta,
        b_star=grad,
        I=float(theta @ a - val),
        log_M=float(val),
        hessian=hess,
        a=a,
        iterations=it,
    )


def solve_twist(spec, a, strict: bool = False, theta0=None) -> TwistSolution:
    """Twist ``theta*`` and rate ``I`` for the target ``Y_n >= n a``.

    With ``strict`` a non-rare target raises :class:`RarityViolated`;
    otherwise it yields ``theta* = 0`` and ``I = 0``.
    """
    a_vec = _target(a)
    if strict and np.all(mean_vector(spec) >= a_vec):
        raise RarityViolated("mean vector lies inside the target set")
    return maximize_legendre(spec, a_vec, theta0=theta0)


def exp_twist_closed_form(lam, mu, r, t, a) -> float:
    """Closed-form twist for a single node with exponential jobs."""
    m = lam / (r * mu) * (-math.expm1(-r * t))
    if a <= m:
        return 0.0
    x = math.exp(-r * t)
    return mu / x / 2.0 * ((1 + x) - math.sqrt((1 - x) ** 2 + 4 * x * m / a))


def tau(spec, solution: TwistSolution) -> float:
    return solution.tau


def _prefactor(sol: TwistSolution) -> float:
    D = sol.D
    th = float(np.prod(sol.theta_star[list(sol.active)])) if D else 1.0
    return 1.0 / (th * (2 * math.pi) ** (D / 2) * math.sqrt(sol.tau))


def bahadur_rao_p(spec, a, n, solution: TwistSolution | None = None) -> float:
    """Sharp asymptotic ``n^{-D/2} prefactor e^{-nI}`` for ``P(Y_n >= n a)``."""
    sol = solution or solve_twist(spec, a)
    if sol.D == 0:
        return 1.0
    return n ** (-sol.D / 2) * _prefactor(sol) * math.exp(-n * sol.I)


def second_moment_asymptotic(spec, a, n, solution: TwistSolution | None = None) -> float:
    """Asymptotic second moment of the IS estimator, ``E_Q (L^2 1{..})``."""
    sol = solution or solve_twist(spec, a)
    if sol.D == 0:
        return 1.0
    return n ** (-sol.D / 2) * _prefactor(sol) * 0.5**sol.D * math.exp(-2 * n * sol.I)


def alpha(solution: TwistSolution, eps: float, T: float) -> float:
    """Run-count constant: runs needed grow like ``alpha n^{D/2}``."""
    D = solution.D
    th = float(np.prod(solution.theta_star[list(solution.active)])) if D else 1.0
    return (T / eps) ** 2 * th * 2.0**-D * (2 * math.pi) ** (D / 2) * math.sqrt(solution.tau)


def predicted_runs(spec, a, n, eps, T, solution: TwistSolution | None = None) -> float:
    sol = solution or solve_twist(spec, a)
    return alpha(sol, eps, T) * n ** (sol.D / 2)
