"""Transient and stationary moments of Markov-modulated networks.

Index layout, used for every stacked quantity below (0-based):

* ``z1[j*L + l]      = E[X_l(t) 1{J(t) = j}]``
* ``z2[j*L*L + l*L + k] = E[X_l(t) X_k(t) 1{J(t) = j}]``

i.e. one block per background state, node index running fastest. With this
layout the partial-derivative bookkeeping permutation
``(K_{d,L} (x) I_L) K_{L,dL}`` reduces to swapping ``l`` and ``k`` inside each
state block.

The occupancy vector ``pi(t)`` and the moment blocks solve one linear ODE
``y' = A y`` with ``y = (pi, z1, z2)``, integrated with classic RK4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import ModulatedNetworkSpec, NetworkSpec

RK4_STEPS = 2048
MIN_STEP = 1e-8


class StepTooSmall(RuntimeError):
    pass


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """``K_{m,n}`` with ``K vec(A) = vec(A.T)`` for ``m x n`` matrices ``A``.

    ``vec`` stacks columns. ``K_{m,n}`` is a permutation and
    ``K_{m,n}^{-1} = K_{n,m}``.
    """
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    K = np.zeros((m * n, m * n))
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    K[(i * n + j).ravel(), (j * m + i).ravel()] = 1.0
    return K


def _as_modulated(spec) -> ModulatedNetworkSpec:
    if isinstance(spec, NetworkSpec):
        return ModulatedNetworkSpec.from_network(spec)
    return spec


@dataclass(frozen=True)
class MomentSystem:
    """Coefficient blocks of the first- and second-moment equations."""

    d: int
    L: int
    QT: np.ndarray  # Q^T (d x d)
    A1: np.ndarray  # (Q^T (x) I_L) - R^T, block diagonal R^T
    S1: np.ndarray  # (Lambda (x) I_L) grad B(0): dL x d
    A2: np.ndarray  # Q^T (x) I_{L^2} - (P + I)(R^T (x) I_L)
    S2: np.ndarray  # (Lambda (x) I_{L^2}) grad^2 B(0): dL^2 x d
    C21: np.ndarray  # (I + P)((Lambda (x) I_L) grad B(0) (x) I_L): dL^2 x dL

    @property
    def size(self) -> int:
        return self.d * (1 + self.L + self.L * self.L)

    def full_matrix(self, second: bool = True) -> np.ndarray:
        """``A`` of the augmented system ``y' = A y`` with ``y = (pi, z1[, z2])``."""
        d, L = self.d, self.L
        n1 = d * L
        n2 = d * L * L if second else 0
        A = np.zeros((d + n1 + n2, d + n1 + n2))
        A[:d, :d] = self.QT
        A[d : d + n1, :d] = self.S1
        A[d : d + n1, d : d + n1] = self.A1
        if second:
            A[d + n1 :, :d] = self.S2
            A[d + n1 :, d : d + n1] = self.C21
            A[d + n1 :, d + n1 :] = self.A2
        return A


def moment_system(spec, shots: str = "poisson") -> MomentSystem:
    """Assemble the moment equations of ``spec``.

    ``shots="jumps"`` gives the variant in which jobs arrive only together
    with background jumps (first moments only; the second-moment blocks are
    left at zero there).
    """
    spec = _as_modulated(spec)
    d, L = spec.d, spec.L
    Q = spec.Q
    IL = np.eye(L)
    RT = linalg.block_diag(*[st.R.T for st in spec.states])
    gradB = np.zeros((d * L, d))
    grad2B = np.zeros((d * L * L, d))
    for j, st in enumerate(spec.states):
        m = np.array([job.mean for job in st.jobs])
        gradB[j * L : (j + 1) * L, j] = m
        second = np.outer(m, m)
        np.fill_diagonal(second, [job.second_moment for job in st.jobs])
        grad2B[j * L * L : (j + 1) * L * L, j] = second.ravel()
    lam = np.array([st.lam for st in spec.states])
    if shots == "poisson":
        S1 = np.kron(np.diag(lam), IL) @ gradB
    elif shots == "jumps":
        S1 = gradB @ (Q.T + np.diag(-np.diag(Q)))
    else:
        raise ValueError(f"unknown shot model {shots!r}")
    A1 = np.kron(Q.T, IL) - RT
    P = np.kron(commutation_matrix(d, L), IL) @ commutation_matrix(L, d * L)
    I2 = np.eye(d * L * L)
    A2 = np.kron(Q.T, np.eye(L * L)) - (P + I2) @ np.kron(RT, IL)
    if shots == "poisson":
        S2 = np.kron(np.diag(lam), np.eye(L * L)) @ grad2B
        C21 = (I2 + P) @ np.kron(S1, IL)
    else:
        S2 = np.zeros_like(grad2B)
        C21 = np.zeros((d * L * L, d * L))
    return MomentSystem(d, L, Q.T.copy(), A1, S1, A2, S2, C21)


def initial_state(spec, x0, second: bool = True) -> np.ndarray:
    """``(pi(0), z1(0)[, z2(0)])`` for a deterministic start ``x0``."""
    spec = _as_modulated(spec)
    p0 = spec.initial_distribution
    x0 = np.asarray(x0, dtype=float)
    parts = [p0, np.kron(p0, x0)]
    if second:
        parts.append(np.kron(p0, np.kron(x0, x0)))
    return np.concatenate(parts)


def _rk4_propagator(A: np.ndarray, h: float) -> np.ndarray:
    """One classic RK4 step for ``y' = A y`` as a matrix."""
    hA = h * A
    I = np.eye(len(A))
    return I + hA @ (I + hA @ (I / 2 + hA @ (I / 6 + hA / 24)))


def integrate(A: np.ndarray, y0, t_grid, steps: int = RK4_STEPS, tol: float = 1e-11) -> np.ndarray:
    """RK4 solution of ``y' = A y`` on ``t_grid`` (starting at ``t = 0``).

    The base step is ``t_max / steps``. Each grid interval is integrated
    with step ``h`` and ``h / 2``; while the two disagree by more than
    ``tol`` (relative), the step is halved (Richardson check).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0:
        return np.zeros((0, len(y0)))
    if np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be non-negative and increasing")
    t_max = float(t_grid[-1])
    h = t_max / steps if t_max > 0 else 1.0
    out = np.empty((t_grid.size, len(y0)))
    y = np.asarray(y0, dtype=float).copy()
    t_prev = 0.0
    for i, t in enumerate(t_grid):
        span = t - t_prev
        if span > 0:
            while True:
                k = max(1, math.ceil(span / h - 1e-9))
                step = span / k
                with np.errstate(over="ignore", invalid="ignore"):
                    coarse = np.linalg.matrix_power(_rk4_propagator(A, step), k) @ y
                    fine = np.linalg.matrix_power(_rk4_propagator(A, step / 2), 2 * k) @ y
                    err = np.max(np.abs(fine - coarse)) / (1.0 + np.max(np.abs(fine)))
                if err <= tol:  # NaN (overflow) counts as a failed check
                    y = fine
                    break
                h = step / 2
                if h < MIN_STEP:
                    raise StepTooSmall(f"RK4 step fell below {MIN_STEP} at t={t_prev}")
        out[i] = y
        t_prev = t
    return out


@dataclass(frozen=True)
class MomentState:
    """Moment trajectories on a time grid.

    ``z1`` has shape ``(len(grid), d*L)`` and ``z2`` ``(len(grid), d*L*L)``.
    """

    grid: np.ndarray
    pi: np.ndarray
    z1: np.ndarray
    z2: np.ndarray | None
    d: int
    L: int

    @property
    def mean(self) -> np.ndarray:
        """``E X(t)``, shape ``(len(grid), L)``."""
        return self.z1.reshape(-1, self.d, self.L).sum(axis=1)

    @property
    def second(self) -> np.ndarray:
        """``E X(t) X(t)^T``, shape ``(len(grid), L, L)``."""
        return self.z2.reshape(-1, self.d, self.L, self.L).sum(axis=1)

    @property
    def covariance(self) -> np.ndarray:
        m = self.mean
        return self.second - m[:, :, None] * m[:, None, :]

    @property
    def variance(self) -> np.ndarray:
        return np.diagonal(self.covariance, axis1=1, axis2=2)


def _solve(spec, x0, t_grid, second: bool, shots: str = "poisson") -> MomentState:
    spec = _as_modulated(spec)
    sysm = moment_system(spec, shots)
    A = sysm.full_matrix(second)
    y = integrate(A, initial_state(spec, x0, second), t_grid)
    d, L = spec.d, spec.L
    return MomentState(
        np.asarray(t_grid, dtype=float),
        y[:, :d],
        y[:, d : d + d * L],
        y[:, d + d * L :] if second else None,
        d,
        L,
    )


def transient_first_moment(spec, x0, t_grid) -> MomentState:
    return _solve(spec, x0, t_grid, second=False)


def transient_second_moment(spec, x0, t_grid) -> MomentState:
    return _solve(spec, x0, t_grid, second=True)


def jump_shot_first_moment(spec, x0, t_grid) -> MomentState:
    """First moments when jobs arrive only at background jumps."""
    return _solve(spec, x0, t_grid, second=False, shots="jumps")


def stationary_distribution(Q) -> np.ndarray:
    """Invariant law of the generator ``Q`` (null-space solve)."""
    Q = np.asarray(Q, dtype=float)
    d = len(Q)
    M = np.vstack([Q.T, np.ones(d)])
    rhs = np.zeros(d + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return pi


def stationary_first_moment(spec, shots: str = "poisson") -> np.ndarray:
    """``z1(inf) = (R^T - Q^T (x) I_L)^{-1} S1 pi``."""
    spec = _as_modulated(spec)
    sysm = moment_system(spec, shots)
    pi = stationary_distribution(spec.Q)
    return np.linalg.solve(-sysm.A1, sysm.S1 @ pi)


def _symmetric_rows(d: int, L: int) -> np.ndarray:
    """Indices of the ``l <= k`` entries of every state block."""
    keep = [j * L * L + l * L + k for j in range(d) for l in range(L) for k in range(l, L)]
    return np.array(keep)


def stationary_second_moment(spec) -> np.ndarray:
    """``z2(inf)`` from the equations with duplicated rows removed.

    Only the entries with ``l <= k`` are unknowns; the mirrored entries are
    tied to them, and the duplicated equations are dropped so the solve is
    square.
    """
    spec = _as_modulated(spec)
    sysm = moment_system(spec)
    d, L = spec.d, spec.L
    pi = stationary_distribution(spec.Q)
    z1 = stationary_first_moment(spec)
    rhs = -(sysm.S2 @ pi + sysm.C21 @ z1)
    keep = _symmetric_rows(d, L)
    # expand the reduced unknowns to the full vector
    E = np.zeros((d * L * L, len(keep)))
    pos = {int(r): c for c, r in enumerate(keep)}
    for j in range(d):
        for l in range(L):
            for k in range(L):
                a, b = min(l, k), max(l, k)
                E[j * L * L + l * L + k, pos[j * L * L + a * L + b]] = 1.0
    reduced = np.linalg.solve(sysm.A2[keep] @ E, rhs[keep])
    return E @ reduced


def stationary_moments(spec):
    """``(mean, covariance)`` of ``X`` in stationarity."""
    spec = _as_modulated(spec)
    d, L = spec.d, spec.L
    z1 = stationary_first_moment(spec)
    z2 = stationary_second_moment(spec)
    m = z1.reshape(d, L).sum(0)
    S = z2.reshape(d, L, L).sum(0)
    return m, S - np.outer(m, m)


def transient_correlation(spec, x0, t_grid) -> np.ndarray:
    """Correlation matrices of ``X(t)``, shape ``(len(grid), L, L)``.

    Where a variance vanishes (a deterministic start at ``t = 0``) the
    right limit is reported: both covariance and variances grow linearly in
    ``t`` there, with slope ``sum_j p_j lambda_j E[B_j B_j^T]``.
    """
    spec = _as_modulated(spec)
    ms = transient_second_moment(spec, x0, t_grid)
    cov = ms.covariance
    out = np.empty_like(cov)
    slope = np.zeros((spec.L, spec.L))
    p0 = spec.initial_distribution
    for pj, st in zip(p0, spec.states):
        m = np.array([job.mean for job in st.jobs])
        second = np.outer(m, m)
        np.fill_diagonal(second, [job.second_moment for job in st.jobs])
        slope += pj * st.lam * second
    for i, C in enumerate(cov):
        v = np.diag(C)
        if np.all(v > 0) and ms.grid[i] > 0:
            out[i] = C / np.sqrt(np.outer(v, v))
        else:
            s = np.diag(slope)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[i] = slope / np.sqrt(np.outer(s, s))
    return out


def exact_trajectory(spec, x0, t_grid, second: bool = True, shots: str = "poisson") -> np.ndarray:
    """Reference solution ``expm(A t) y0`` of the augmented system."""
    spec = _as_modulated(spec)
    A = moment_system(spec, shots).full_matrix(second)
    y0 = initial_state(spec, x0, second)
    return np.array([linalg.expm(A * t) @ y0 for t in np.asarray(t_grid, dtype=float)])
