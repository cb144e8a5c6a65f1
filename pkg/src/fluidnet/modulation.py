"""Markov-modulated networks: background paths and path-wise twists.

Given a path ``f`` of the background chain, the network is a sequence of
segments with constant dynamics. The state at the horizon is then an
infinitely divisible vector whose MGF factorizes over segments, so the
twist can be solved path by path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analytics import NonConvergence, maximize_legendre, _target
from .model import ModulatedNetworkSpec
from .segments import ExpmFamily, Segment, SegmentTwist, _job_sizes, sample_arrivals

MAX_JUMPS = 10_000


class PathTooLong(RuntimeError):
    pass


@dataclass(frozen=True)
class BackgroundPath:
    """Realized background path on ``[0, horizon]``.

    ``states[i]`` is occupied between ``jump_times[i-1]`` and
    ``jump_times[i]`` (with ``0`` and ``horizon`` at the ends).
    """

    jump_times: tuple[float, ...]
    states: tuple[int, ...]
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "jump_times", tuple(float(x) for x in self.jump_times))
        object.__setattr__(self, "states", tuple(int(j) for j in self.states))
        if len(self.states) != len(self.jump_times) + 1:
            raise ValueError("need one more state than jump times")

    @property
    def K(self) -> int:
        return len(self.jump_times)

    @property
    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], self.jump_times, [self.horizon]])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def signature(self) -> str:
        st = "-".join(str(j + 1) for j in self.states)
        tt = ";".join(f"{x:.6f}" for x in self.jump_times)
        return f"{st}|{tt}"

    def sort_key(self):
        return (self.K, self.states, self.jump_times)


def sample_path(Q, j0, t: float, rng) -> BackgroundPath:
    """Simulate the background chain on ``[0, t]``.

    ``j0`` is either a starting state or a probability vector over states.
    A random start consumes one uniform only when several states are
    possible; jump destinations consume one uniform only when there is more
    than one candidate.
    """
    Q = np.asarray(Q, dtype=float)
    d = len(Q)
    if np.ndim(j0) == 0:
        j = int(j0)
    else:
        p = np.asarray(j0, dtype=float)
        support = np.flatnonzero(p > 0)
        if len(support) == 1:
            j = int(support[0])
        else:
            j = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), d - 1))
    states = [j]
    times = []
    clock = 0.0
    while True:
        q = -Q[j, j]
        if q <= 0:
            break
        clock += rng.standard_exponential() / q
        if clock >= t:
            break
        rates = Q[j].copy()
        rates[j] = 0.0
        cand = np.flatnonzero(rates > 0)
        if len(cand) == 1:
            j = int(cand[0])
        else:
            c = np.cumsum(rates[cand])
            j = int(cand[min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(cand) - 1)])
        times.append(clock)
        states.append(j)
        if len(times) > MAX_JUMPS:
            raise PathTooLong(f"more than {MAX_JUMPS} background jumps")
    return BackgroundPath(tuple(times), tuple(states), t)


# --- path-conditional segments ------------------------------------------------


class _StateCache:
    """Per-state rate matrices and matrix-exponential evaluators."""

    def __init__(self, spec: ModulatedNetworkSpec):
        self.spec = spec
        self.R = [st.R for st in spec.states]
        self.expm = [ExpmFamily(R) for R in self.R]
        self.scalar_exponential = spec.L == 1 and all(
            st.jobs[0].kind == "exponential" for st in spec.states
        )


_CACHES: dict[int, _StateCache] = {}


def _cache(spec) -> _StateCache:
    c = _CACHES.get(id(spec))
    if c is None or c.spec is not spec:
        if len(_CACHES) > 64:
            _CACHES.clear()
        c = _StateCache(spec)
        _CACHES[id(spec)] = c
    return c


@dataclass(frozen=True, eq=False)
class SegmentCoefficients:
    """Decay data for segment ``i`` of a path.

    ``D`` is ``expm(-R_i (t_{i+1} - t_i))``; ``tail`` is the product of the
    later ``D``'s (identity for the last segment); ``P(u)`` maps a real time
    ``u`` inside the segment to ``expm(-R_i (t_{i+1} - u)) @ tail``.
    """

    start: float
    end: float
    D: np.ndarray
    tail: np.ndarray
    expm: ExpmFamily = field(repr=False)

    def P(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.expm(self.end - u) @ self.tail


def segment_coefficients(path: BackgroundPath, spec: ModulatedNetworkSpec, scalar: bool | None = None):
    """Per-segment decay data, first segment first.

    For a single node with ``scalar`` (default: when ``L == 1``) the tails
    are products of scalar exponentials, ``P_i(u) = Pbar_i e^{r u}``.
    """
    c = _cache(spec)
    L = spec.L
    if scalar is None:
        scalar = L == 1
    b = path.boundaries
    out = []
    tail = np.eye(L)
    for i in range(path.K, -1, -1):
        j = path.states[i]
        length = b[i + 1] - b[i]
        if scalar:
            D = np.array([[math.exp(-c.R[j][0, 0] * length)]])
        else:
            D = c.expm[j](length)[0]
        out.append(SegmentCoefficients(b[i], b[i + 1], D, tail, c.expm[j]))
        tail = D @ tail
    return out[::-1]


def path_segments(path: BackgroundPath, spec: ModulatedNetworkSpec) -> list[Segment]:
    """Segments of ``path`` in chronological order."""
    c = _cache(spec)
    segs = []
    for i, co in enumerate(segment_coefficients(path, spec)):
        st = spec.states[path.states[i]]
        segs.append(Segment(st.lam, st.jobs, c.R[path.states[i]], co.end - co.start, co.tail, c.expm[path.states[i]]))
    return segs


def path_log_mgf(path: BackgroundPath, spec: ModulatedNetworkSpec, theta) -> float:
    """``log M_f(theta)``: sum of the segment contributions."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return float(sum(seg.log_mgf(theta, order=0)[0] for seg in path_segments(path, spec)))


# --- path twists ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathTwist:
    """Twist solved for one background path."""

    path: BackgroundPath
    theta_star_f: np.ndarray
    I_f: float
    log_M_f: float
    twists: tuple[SegmentTwist, ...]
    a: np.ndarray

    @property
    def poisson_means_Q(self) -> np.ndarray:
        """Twisted mean number of arrivals per segment (per unit ``n``)."""
        return np.array([tw.poisson_mean for tw in self.twists])

    @property
    def poisson_means_P(self) -> np.ndarray:
        return np.array([tw.segment.lam * tw.segment.length for tw in self.twists])


def _finish(path, segs, theta, a) -> PathTwist:
    twists = tuple(seg.twisted(theta) for seg in segs)
    log_M = float(sum(tw.segment.lam * (tw.total - tw.segment.length) for tw in twists))
    return PathTwist(path, theta, float(theta @ a - log_M), log_M, twists, a)


def solve_path_twist(path: BackgroundPath, spec: ModulatedNetworkSpec, a, theta0=None) -> PathTwist:
    """Maximize ``<theta, a> - log M_f(theta)`` over ``theta >= 0``.

    Raises :class:`~fluidnet.analytics.NonConvergence`; the offending path is
    attached to the exception as ``path``.
    """
    a = _target(a)
    segs = path_segments(path, spec)
    try:
        sol = maximize_legendre(segs, a, theta0=theta0)
    except Exception as exc:
        exc.path = path
        raise
    return _finish(path, segs, sol.theta_star, a)


def _solve_scalar_batch(segs_per_path, a: float, tol: float = 1e-15, max_iter: int = 200):
    """Vectorized safeguarded Newton for single-node exponential paths.

    The first derivative of ``log M_f`` is increasing and convex in
    ``theta``, so a bracketed Newton iteration from 0 converges fast.
    """
    P = len(segs_per_path)
    kmax = max(len(s) for s in segs_per_path)
    lam = np.zeros((P, kmax))
    mu = np.ones((P, kmax))
    r = np.ones((P, kmax))
    length = np.zeros((P, kmax))
    c = np.zeros((P, kmax))
    for p, segs in enumerate(segs_per_path):
        for i, seg in enumerate(segs):
            lam[p, i] = seg.lam
            mu[p, i] = seg.jobs[0].rate
            r[p, i] = seg.R[0, 0]
            length[p, i] = seg.length
            c[p, i] = seg.tail[0, 0]
    grow = np.expm1(r * length)
    top0 = mu * np.exp(r * length)

    def F(th, k):
        cc, mm, gr, rr, ll = c[k], mu[k], grow[k], r[k], lam[k]
        x = cc * th[:, None]
        top = top0[k] - x
        g = ll * cc * mm * gr / (rr * (mm - x) * top)
        h = ll * cc * cc * mm * gr * (top + mm - x) / (rr * (mm - x) ** 2 * top**2)
        return g.sum(1) - a, h.sum(1)

    # the domain edge min(mu / c) is an upper bracket; F blows up there
    hi = np.min(np.where(c > 0, mu / np.where(c > 0, c, 1.0), np.inf), axis=1)
    lo = np.zeros(P)
    theta = np.zeros(P)
    f0, _ = F(theta, np.arange(P))
    todo = np.flatnonzero(f0 < 0)  # others are not rare: theta = 0
    for _ in range(max_iter):
        if todo.size == 0:
            break
        th = theta[todo]
        with np.errstate(divide="ignore", invalid="ignore"):
            ft, dft = F(th, todo)
            step = th - ft / dft
        lt = np.where(ft < 0, th, lo[todo])
        ht = np.where(ft > 0, th, hi[todo])
        bad = (step < lt) | (step >= ht) | ~np.isfinite(step)
        new = np.where(bad, 0.5 * (lt + ht), step)
        theta[todo], lo[todo], hi[todo] = new, lt, ht
        keep = (np.abs(new - th) > tol * (1 + th)) & (ft != 0)
        todo = todo[keep]
    else:
        raise NonConvergence("batch twist solve did not converge")
    return theta


class PathTwistSolver:
    """Solves twists for many paths; constant paths share one solve.

    A constant path in state ``j`` is the plain network frozen in ``j``, and
    its twist is computed exactly as for that network, so a one-state model
    reproduces the plain pipeline bit for bit.
    """

    def __init__(self, spec: ModulatedNetworkSpec, a):
        self.spec = spec
        self.a = _target(a)
        self.scalar = _cache(spec).scalar_exponential
        self._constant: dict[int, PathTwist] = {}

    def constant(self, path: BackgroundPath) -> PathTwist:
        j = path.states[0]
        pt = self._constant.get(j)
        if pt is None:
            pt = solve_path_twist(path, self.spec, self.a)
            self._constant[j] = pt
        return PathTwist(path, pt.theta_star_f, pt.I_f, pt.log_M_f, pt.twists, pt.a)

    def solve(self, paths) -> list[PathTwist]:
        out: list[PathTwist | None] = [None] * len(paths)
        pending = []
        for i, path in enumerate(paths):
            if path.K == 0:
                out[i] = self.constant(path)
            else:
                pending.append(i)
        if not pending:
            return out
        if self.scalar:
            segs = [path_segments(paths[i], self.spec) for i in pending]
            thetas = _solve_scalar_batch(segs, float(self.a[0]))
            for i, sg, th in zip(pending, segs, thetas):
                out[i] = _finish(paths[i], sg, np.array([th]), self.a)
        else:
            for i in pending:
                out[i] = solve_path_twist(paths[i], self.spec, self.a)
        return out


def sample_modulated_batch(twists: list[PathTwist], spec: ModulatedNetworkSpec, n: int, rng, mode: str = "twisted"):
    """Arrivals for many runs, one :class:`PathTwist` per run.

    Returns ``(Y, log_L, arrivals, seg_run)``; ``seg_run`` maps each entry
    of ``arrivals.counts`` to its run.
    """
    flat = []
    seg_run = []
    for k, pt in enumerate(twists):
        flat.extend(pt.twists)
        seg_run.extend([k] * len(pt.twists))
    seg_run = np.asarray(seg_run, dtype=np.int64)
    size = len(twists)
    L = spec.L
    arr = sample_arrivals(flat, n, rng, mode=mode)
    run_of = seg_run[arr.owner]
    Y = np.zeros((size, L))
    for ell in range(L):
        Y[:, ell] = np.bincount(run_of, weights=arr.X[:, ell], minlength=size)
    if mode == "plain":
        return Y, np.zeros(size), arr, seg_run
    theta = np.array([pt.theta_star_f for pt in twists])
    log_M = np.array([pt.log_M_f for pt in twists])
    log_L = -(Y * theta).sum(1) + n * log_M
    return Y, log_L, arr, seg_run


def sample_modulated_run(path: BackgroundPath, twist: PathTwist, spec: ModulatedNetworkSpec, n: int, rng):
    """One twisted run along ``path``: ``(Y_n(t), log L)``."""
    Y, log_L, _, _ = sample_modulated_batch([twist], spec, n, rng)
    return Y[0], float(log_L[0])


# --- empirical optimum ------------------------------------------------------------


def _better(x, y):
    """The record with the smaller rate; ties by path ordering."""
    if x is None:
        return y
    if y is None:
        return x
    kx = (x[1],) + x[0].sort_key()
    ky = (y[1],) + y[0].sort_key()
    return x if kx <= ky else y


def empirical_optimal_path(records):
    """Path with the smallest rate among ``(path, I_f)`` records.

    Ties are broken by fewest jumps, then lexicographic states, then
    earliest jump times, so the result is independent of record order.
    """
    best = None
    for rec in records:
        best = _better(best, (rec[0], float(rec[1])))
    if best is None:
        raise ValueError("no records")
    return best[0]


def merge_optimal(x, y):
    """Associative, commutative merge of two ``(path, I_f)`` records."""
    return _better(x, y)


# --- forward simulation under the original measure ------------------------------


def simulate_state(spec: ModulatedNetworkSpec, x0, t: float, size: int, rng, shots: str = "poisson"):
    """Draw ``size`` copies of ``X(t)`` started from ``x0`` (original measure).

    With ``shots="jumps"`` jobs arrive only at background jumps, with the
    job law of the state entered. Vectorized over all segments and arrivals.
    """
    c = _cache(spec)
    x0 = np.asarray(x0, dtype=float)
    L, d = spec.L, spec.d
    paths = [sample_path(spec.Q, spec.initial_distribution, t, rng) for _ in range(size)]
    run = np.concatenate([np.full(p.K + 1, k) for k, p in enumerate(paths)])
    state = np.concatenate([p.states for p in paths]).astype(np.int64)
    length = np.concatenate([p.lengths for p in paths])
    first = np.cumsum([0] + [p.K + 1 for p in paths])[:-1]
    nseg = len(state)
    D = np.empty((nseg, L, L))
    for j in range(d):
        sel = state == j
        if sel.any():
            D[sel] = c.expm[j](length[sel])
    tail = np.empty_like(D)
    for k, p in enumerate(paths):
        acc = np.eye(L)
        for i in range(first[k] + p.K, first[k] - 1, -1):
            tail[i] = acc
            acc = D[i] @ acc
    start = D[first] @ tail[first]
    out = np.einsum("kij,i->kj", start, x0)
    if shots == "poisson":
        lam = np.array([st.lam for st in spec.states])[state]
        counts = rng.poisson(lam * length)
        owner = np.repeat(np.arange(nseg), counts)
        h = rng.random(owner.size)
        e = rng.standard_exponential((owner.size, L))
        pos = h * length[owner]
        st_of = state[owner]
        M = np.empty((owner.size, L, L))
        B = np.empty((owner.size, L))
        for j in range(d):
            sel = st_of == j
            if sel.any():
                M[sel] = c.expm[j](pos[sel])
                B[sel] = _job_sizes(spec.states[j].jobs, np.zeros((int(sel.sum()), L)), e[sel])
        X = np.einsum("kij,kjm,ki->km", M, tail[owner], B)
        for ell in range(L):
            out[:, ell] += np.bincount(run[owner], weights=X[:, ell], minlength=size)
    elif shots == "jumps":
        entered = np.ones(nseg, dtype=bool)
        entered[first] = False
        idx = np.flatnonzero(entered)
        e = rng.standard_exponential((idx.size, L))
        B = np.empty((idx.size, L))
        for j in range(d):
            sel = state[idx] == j
            if sel.any():
                B[sel] = _job_sizes(spec.states[j].jobs, np.zeros((int(sel.sum()), L)), e[sel])
        X = np.einsum("kij,ki->kj", D[idx] @ tail[idx], B)
        for ell in range(L):
            out[:, ell] += np.bincount(run[idx], weights=X[:, ell], minlength=size)
    else:
        raise ValueError(f"unknown shot model {shots!r}")
    return out
