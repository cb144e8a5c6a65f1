"""Arrival segments: the shared kernel behind plain and modulated twists.

A segment is a stretch of constant dynamics (rate ``lam``, job laws, rate
matrix ``R``) of duration ``length``. A job of size vector ``B`` arriving
``s`` time units before the segment ends contributes ``M(s).T @ B`` to the
state at the horizon, with ``M(s) = expm(-R s) @ tail``; ``tail`` carries the
decay accumulated over the later segments (identity for the last one).

With ``s`` measured backwards from the segment end, the plain network is a
single segment of length ``t`` with ``tail = I``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate, linalg

from .model import JobLaw

EIG_COND_MAX = 1e8
CDF_CELLS = 1024
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
# within a table cell (width length / CDF_CELLS) 4 nodes are exact to rounding
_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)


class DomainExceeded(ArithmeticError):
    """The job-size MGF is infinite at the requested twist."""

    def __init__(self, u: float, node: int, message: str | None = None):
        self.u = u
        self.node = node
        super().__init__(message or f"MGF infinite at s={u:.6g}, node {node}")


class ExpmFamily:
    """Evaluates ``expm(-R s)`` for many ``s``.

    Uses an eigendecomposition when the eigenvector matrix is well
    conditioned and falls back to scaling and squaring otherwise.
    """

    def __init__(self, R):
        R = np.asarray(R, dtype=float)
        self.R = R
        self.L = R.shape[0]
        off = R - np.diag(np.diag(R))
        if not off.any():
            self.mode = "diag"
            self.w = np.diag(R).copy()
            return
        w, V = np.linalg.eig(R)
        if np.linalg.cond(V) < EIG_COND_MAX:
            self.mode = "eig"
            self.w, self.V, self.Vinv = w, V, np.linalg.inv(V)
            self.real = bool(np.all(w.imag == 0))
            if self.real:
                self.w, self.V, self.Vinv = w.real, V.real, self.Vinv.real
            # contiguous copies: a strided view takes a different matmul
            # path than its unpickled copy in a worker, changing rounding
            self.w, self.V, self.Vinv = (np.ascontiguousarray(x) for x in (self.w, self.V, self.Vinv))
        else:
            self.mode = "expm"

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.mode == "diag":
            out = np.zeros(s.shape + (self.L, self.L))
            idx = np.arange(self.L)
            out[..., idx, idx] = np.exp(-s[..., None] * self.w)
            return out
        if self.mode == "eig":
            e = np.exp(-s[..., None] * self.w)
            out = np.einsum("ij,...j,jk->...ik", self.V, e, self.Vinv)
            return out if self.real else out.real
        return np.stack([linalg.expm(-self.R * x) for x in s.ravel()]).reshape(
            s.shape + (self.L, self.L)
        )

    def apply(self, s, vec) -> np.ndarray:
        """``expm(-R s) @ vec`` for many ``s``, shape ``s.shape + (L,)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        vec = np.asarray(vec, dtype=float)
        if self.mode == "diag":
            return np.exp(-s[..., None] * self.w) * vec
        if self.mode == "eig":
            e = np.exp(-s[..., None] * self.w)
            out = (e * (self.Vinv @ vec)) @ self.V.T
            return out if self.real else out.real
        return self(s) @ vec


# --- job-law algebra on twist vectors v of shape (..., L) -------------------


def _job_arrays(jobs):
    kinds = np.array([j.kind == "exponential" for j in jobs])
    mu = np.array([j.rate if j.kind == "exponential" else np.inf for j in jobs])
    val = np.array([0.0 if j.kind == "exponential" else j.value for j in jobs])
    return kinds, mu, val


def log_beta(jobs, v) -> np.ndarray:
    """Log of the joint MGF of independent components at twist ``v``."""
    expo, mu, val = _job_arrays(jobs)
    v = np.asarray(v, dtype=float)
    out = v[..., ~expo] @ val[~expo] if not expo.all() else np.zeros(v.shape[:-1])
    if expo.any():
        ve, me = v[..., expo], mu[expo]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(ve >= me, np.inf, -np.log1p(-ve / me))
        out = out + t.sum(axis=-1)
    return out


def dlog_beta(jobs, v):
    """Gradient and diagonal Hessian of ``log_beta``."""
    expo, mu, val = _job_arrays(jobs)
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        g = np.where(expo, 1.0 / (mu - v), val)
        h = np.where(expo, 1.0 / (mu - v) ** 2, 0.0)
    return g, h


# --- segments ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Segment:
    lam: float
    jobs: tuple[JobLaw, ...]
    R: np.ndarray
    length: float
    tail: np.ndarray = None
    expm: ExpmFamily = field(default=None, repr=False)

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "R", R)
        tail = np.eye(len(R)) if self.tail is None else np.atleast_2d(self.tail)
        object.__setattr__(self, "tail", np.asarray(tail, dtype=float))
        object.__setattr__(self, "jobs", tuple(self.jobs))
        if self.expm is None:
            object.__setattr__(self, "expm", ExpmFamily(R))

    @property
    def L(self) -> int:
        return self.R.shape[0]

    @property
    def scalar_exponential(self) -> bool:
        return self.L == 1 and self.jobs[0].kind == "exponential"

    def mixing(self, s) -> np.ndarray:
        """``M(s) = expm(-R s) @ tail``, shape ``(len(s), L, L)``."""
        return self.expm(s) @ self.tail

    def twist_vectors(self, theta, s) -> np.ndarray:
        """Per-node job twist ``M(s) @ theta`` for an arrival at ``s``."""
        return self.mixing(s) @ np.asarray(theta, dtype=float)

    # -- domain ---------------------------------------------------------------

    def check_domain(self, theta, grid: int = 257):
        """Raise :class:`DomainExceeded` if some job twist leaves the domain."""
        theta = np.asarray(theta, dtype=float)
        bounds = np.array([j.domain_bound for j in self.jobs])
        if np.all(np.isinf(bounds)):
            return
        if self.scalar_exponential:
            phi = float(self.tail[0, 0] * theta[0])
            if phi >= bounds[0]:
                raise DomainExceeded(0.0, 0)
            return
        s = np.linspace(0.0, self.length, grid)
        v = self.twist_vectors(theta, s)
        bad = v >= bounds
        if bad.any():
            k, node = np.argwhere(bad)[0]
            raise DomainExceeded(float(s[k]), int(node))

    def in_domain(self, theta) -> bool:
        try:
            self.check_domain(theta)
        except DomainExceeded:
            return False
        return True

    # -- MGF integrals --------------------------------------------------------

    def integrals(self, theta, order: int = 2):
        """``int_0^length`` of beta, its theta-gradient and theta-Hessian.

        The integrand is ``beta(M(s) theta)``; gradient and Hessian are taken
        with respect to ``theta``. Returns a tuple of ``order + 1`` arrays.
        """
        theta = np.asarray(theta, dtype=float)
        self.check_domain(theta)
        if self.scalar_exponential:
            return self._integrals_closed(theta, order)
        return self._integrals_quad(theta, order)

    def _integrals_closed(self, theta, order):
        c = float(self.tail[0, 0])
        phi = c * float(theta[0])
        mu = self.jobs[0].rate
        r = float(self.R[0, 0])
        grow = np.expm1(r * self.length)
        top = mu * np.exp(r * self.length) - phi
        out = [np.array(np.log1p(mu * grow / (mu - phi)) / r)]
        if order >= 1:
            out.append(np.array([c * mu * grow / (r * (mu - phi) * top)]))
        if order >= 2:
            h = c * c * mu * grow * (top + mu - phi) / (r * (mu - phi) ** 2 * top**2)
            out.append(np.array([[h]]))
        return tuple(out)

    def _integrand(self, theta, order):
        def f(s):
            M = self.mixing(s)[0]
            v = M @ theta
            b = float(np.exp(log_beta(self.jobs, v)))
            parts = [np.array([b])]
            if order >= 1:
                g, h = dlog_beta(self.jobs, v)
                parts.append(b * (M.T @ g))
                if order >= 2:
                    H = np.outer(g, g) + np.diag(h)
                    parts.append(b * (M.T @ H @ M).ravel())
            return np.concatenate(parts)

        return f

    def _integrals_quad(self, theta, order):
        L = self.L
        f = self._integrand(theta, order)
        val, _ = integrate.quad_vec(f, 0.0, self.length, epsabs=1e-13, epsrel=1e-12)
        out = [np.array(val[0])]
        if order >= 1:
            out.append(val[1 : 1 + L])
        if order >= 2:
            out.append(val[1 + L :].reshape(L, L))
        return tuple(out)

    def log_mgf(self, theta, order: int = 2):
        """Contribution ``lam * int (beta - 1)`` and its derivatives."""
        parts = self.integrals(theta, order)
        out = [self.lam * (float(parts[0]) - self.length)]
        out += [self.lam * p for p in parts[1:]]
        return tuple(out)

    def mean_contribution(self) -> np.ndarray:
        """Gradient at 0 computed analytically: ``lam int M(s).T E[B] ds``."""
        mean = np.array([j.mean for j in self.jobs])
        if self.scalar_exponential:
            r = float(self.R[0, 0])
            return self.lam * self.tail[0, 0] * mean * (-np.expm1(-r * self.length)) / r
        Rinv_part = _integrated_expm(self.R, self.length)
        return self.lam * (Rinv_part @ self.tail).T @ mean

    def twisted(self, theta) -> "SegmentTwist":
        return SegmentTwist(self, np.asarray(theta, dtype=float))


def _integrated_expm(R, length):
    """``int_0^length expm(-R s) ds`` via an augmented exponential."""
    L = len(R)
    A = np.zeros((2 * L, 2 * L))
    A[:L, :L] = -R
    A[:L, L:] = np.eye(L)
    E = linalg.expm(A * length)
    # d/ds [X, Y] with X = expm(-Rs), Y = int expm(-Rs); use the block form
    # expm([[-R, I], [0, 0]] l) = [[e^{-Rl}, int_0^l e^{-R u} du], [0, I]]
    return E[:L, L:]


# --- twisted segments --------------------------------------------------------


class SegmentTwist:
    """Segment under the twist ``theta``: everything needed to sample it."""

    def __init__(self, segment: Segment, theta: np.ndarray):
        self.segment = segment
        self.theta = theta
        self.phi = segment.tail @ theta
        self.zero = not np.any(theta)
        if self.zero:
            self.total = segment.length
        else:
            self.total = float(segment.integrals(theta, order=0)[0])
        self._table = None

    @property
    def poisson_mean(self) -> float:
        """Twisted number of arrivals per unit of ``n``."""
        return self.segment.lam * self.total

    def density(self, s) -> np.ndarray:
        """Twisted density of the arrival position ``s`` within the segment."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.zero:
            return np.full(s.shape, 1.0 / self.segment.length)
        v = self.segment.expm.apply(s, self.phi)
        return np.exp(log_beta(self.segment.jobs, v)) / self.total

    def job_twist(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self.segment.expm.apply(s, self.phi)

    def job_rates(self, s) -> np.ndarray:
        """Rates of the twisted exponential job sizes (NaN for other laws)."""
        mu = np.array([j.rate if j.kind == "exponential" else np.nan for j in self.segment.jobs])
        return mu - self.job_twist(s)

    # -- epoch CDF ------------------------------------------------------------

    def cdf(self, s) -> np.ndarray:
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, self.segment.length)
        seg = self.segment
        if self.zero:
            return s / seg.length
        if seg.scalar_exponential:
            mu, r, phi = seg.jobs[0].rate, float(seg.R[0, 0]), float(self.phi[0])
            num = np.log1p(mu * np.expm1(r * s) / (mu - phi))
            return num / np.log1p(mu * np.expm1(r * seg.length) / (mu - phi))
        grid, cum = self._cdf_table()
        k = np.clip(np.searchsorted(grid, s, side="right") - 1, 0, len(grid) - 2)
        return (cum[k] + self._partial(grid[k], s)) / cum[-1]

    def _beta_at(self, s):
        v = self.segment.expm.apply(s, self.phi)
        return np.exp(log_beta(self.segment.jobs, v))

    def _partial(self, lo, hi, rule=(_GL_X, _GL_W)):
        """``int_lo^hi beta`` elementwise by Gauss-Legendre (8 nodes by default)."""
        x, w = rule
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        nodes = mid[..., None] + half[..., None] * x
        vals = self._beta_at(nodes.ravel()).reshape(nodes.shape)
        return half * (vals @ w)

    def _cdf_table(self):
        if self._table is None:
            grid = np.linspace(0.0, self.segment.length, CDF_CELLS + 1)
            cells = self._partial(grid[:-1], grid[1:])
            cum = np.concatenate([[0.0], np.cumsum(cells)])
            self._table = (grid, cum)
        return self._table

    def inverse_cdf(self, h) -> np.ndarray:
        """Map uniforms ``h`` in [0, 1) to arrival positions ``s``."""
        h = np.asarray(h, dtype=float)
        seg = self.segment
        if self.zero:
            return h * seg.length
        if seg.scalar_exponential:
            mu, r, phi = seg.jobs[0].rate, float(seg.R[0, 0]), float(self.phi[0])
            q = phi / mu
            x = np.exp(h * np.log(np.exp(r * seg.length) - q) + (1.0 - h) * np.log1p(-q))
            return np.clip(np.log(x + q) / r, 0.0, seg.length)
        return self._invert_table(h)

    def _invert_table(self, h):
        """Table lookup, then safeguarded Newton on the cell integral."""
        grid, cum = self._cdf_table()
        h = np.asarray(h, dtype=float)
        y = h * cum[-1]
        k = np.clip(np.searchsorted(cum, y, side="right") - 1, 0, len(grid) - 2)
        lo, hi = grid[k].copy(), grid[k + 1].copy()
        target = y - cum[k]
        x = lo + (hi - lo) * np.clip(target / np.maximum(cum[k + 1] - cum[k], 1e-300), 0, 1)
        tol = 1e-13 * max(self.segment.length, 1.0)
        todo = np.arange(x.size)
        for _ in range(100):
            if todo.size == 0:
                break
            xt, lt, ht = x[todo], lo[todo], hi[todo]
            f = self._partial(grid[k[todo]], xt, (_GL4_X, _GL4_W)) - target[todo]
            lt = np.where(f <= 0, xt, lt)
            ht = np.where(f > 0, xt, ht)
            step = xt - f / self._beta_at(xt)
            bad = (step < lt) | (step > ht) | ~np.isfinite(step)
            new = np.where(bad, 0.5 * (lt + ht), step)
            x[todo], lo[todo], hi[todo] = new, lt, ht
            keep = (np.abs(new - xt) > tol) & (ht - lt > tol)
            todo = todo[keep]
        return x.reshape(h.shape)


# --- batch sampling ----------------------------------------------------------


class Arrivals(NamedTuple):
    X: np.ndarray
    counts: np.ndarray
    owner: np.ndarray
    s: np.ndarray
    B: np.ndarray


def sample_arrivals(twists, n: int, rng, mode: str = "twisted"):
    """Sample the arrivals of many segments at once.

    ``twists`` is a sequence of :class:`SegmentTwist` (one per run and
    segment). With ``mode="plain"`` the untwisted law is used: uniform
    positions and the original job sizes.

    Draw order is fixed: Poisson counts for every entry, one uniform per
    arrival, then ``L`` standard exponentials per arrival.

    Returns :class:`Arrivals`: per-arrival contributions at the horizon
    ``(total, L)``, per-entry counts, the entry each arrival belongs to,
    arrival positions measured back from the segment end, and job sizes.
    """
    k = len(twists)
    L = twists[0].segment.L if k else 1
    if mode == "plain":
        means = np.array([tw.segment.lam * tw.segment.length for tw in twists])
    else:
        means = np.array([tw.poisson_mean for tw in twists])
    counts = rng.poisson(n * means) if k else np.zeros(0, dtype=np.int64)
    total = int(counts.sum())
    h = rng.random(total)
    e = rng.standard_exponential((total, L))
    owner = np.repeat(np.arange(k), counts)
    s = np.empty(total)
    X = np.empty((total, L))
    Bs = np.empty((total, L))
    if total == 0:
        return Arrivals(X, counts, owner, s, Bs)

    scalar = np.array([tw.segment.scalar_exponential for tw in twists])
    sel = scalar[owner]
    if sel.any():
        idx = np.flatnonzero(sel)
        o = owner[idx]
        length = np.array([tw.segment.length for tw in twists])[o]
        r = np.array([tw.segment.R[0, 0] for tw in twists])[o]
        mu = np.array([tw.segment.jobs[0].rate for tw in twists])[o]
        tail = np.array([tw.segment.tail[0, 0] for tw in twists])[o]
        if mode == "plain":
            phi = np.zeros(len(idx))
        else:
            phi = np.array([tw.phi[0] for tw in twists])[o]
        hh = h[idx]
        q = phi / mu
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.exp(hh * np.log(np.exp(r * length) - q) + (1.0 - hh) * np.log1p(-q))
            ss = np.where(phi == 0, hh * length, np.log(x + q) / r)
        ss = np.clip(ss, 0.0, length)
        decay = np.exp(-r * ss)
        B = e[idx, 0] / (mu - decay * phi)
        s[idx] = ss
        Bs[idx, 0] = B
        X[idx, 0] = decay * tail * B

    rest = np.flatnonzero(~sel)
    if rest.size:
        groups: dict[int, list[int]] = {}
        first: dict[int, SegmentTwist] = {}
        for i in np.unique(owner[rest]):
            key = id(twists[i])
            groups.setdefault(key, []).append(i)
            first[key] = twists[i]
        for key, members in groups.items():
            tw = first[key]
            seg = tw.segment
            idx = rest[np.isin(owner[rest], members)]
            if mode == "plain":
                ss = h[idx] * seg.length
                v = np.zeros((idx.size, L))
            else:
                ss = tw.inverse_cdf(h[idx])
                v = np.zeros((idx.size, L)) if tw.zero else tw.job_twist(ss)
            B = _job_sizes(seg.jobs, v, e[idx])
            s[idx] = ss
            Bs[idx] = B
            X[idx] = np.einsum("kij,ki->kj", seg.mixing(ss), B)
    return Arrivals(X, counts, owner, s, Bs)


def _job_sizes(jobs, v, e):
    expo, mu, val = _job_arrays(jobs)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(expo, e / (mu - v), val)
    return b
