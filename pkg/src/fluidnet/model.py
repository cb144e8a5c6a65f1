"""Network and modulation specifications.

A linear fluid network has ``L`` nodes. A Poisson stream of jobs adds a
vector of work to the nodes; node ``l`` drains at rate ``r_l`` times its
content, and a fraction ``p[l, l']`` of the drained fluid moves on to node
``l'`` (``p[l, l]`` is the fraction that leaves the network).

States of a background chain are numbered from 0.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TOL = 1e-12


class SpecError(ValueError):
    """Raised when a specification fails validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RarityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class JobLaw:
    """Law of the work one arrival brings to one node.

    ``kind`` is ``"exponential"`` (parameter ``rate``) or ``"deterministic"``
    (a point mass at ``value``). :meth:`zero` is the point mass at 0.
    """

    kind: str
    rate: float = math.nan
    value: float = 0.0

    @classmethod
    def exponential(cls, rate: float) -> "JobLaw":
        return cls("exponential", rate=float(rate))

    @classmethod
    def deterministic(cls, value: float) -> "JobLaw":
        return cls("deterministic", value=float(value))

    @classmethod
    def zero(cls) -> "JobLaw":
        return cls("deterministic", value=0.0)

    @property
    def is_zero(self) -> bool:
        return self.kind == "deterministic" and self.value == 0.0

    @property
    def mean(self) -> float:
        return 1.0 / self.rate if self.kind == "exponential" else self.value

    @property
    def second_moment(self) -> float:
        if self.kind == "exponential":
            return 2.0 / self.rate**2
        return self.value**2

    @property
    def domain_bound(self) -> float:
        """Supremum of the twists for which the MGF is finite."""
        return self.rate if self.kind == "exponential" else math.inf

    def violations(self, where: str) -> list[str]:
        if self.kind == "exponential":
            if not (self.rate > 0 and math.isfinite(self.rate)):
                return [f"{where}: exponential rate must be positive"]
        elif self.kind == "deterministic":
            if not (self.value >= 0 and math.isfinite(self.value)):
                return [f"{where}: deterministic job size must be non-negative"]
        else:
            return [f"{where}: unknown job law {self.kind!r}"]
        return []

    def to_dict(self) -> dict:
        if self.kind == "exponential":
            return {"kind": "exponential", "rate": self.rate}
        return {"kind": "deterministic", "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "JobLaw":
        kind = d.get("kind")
        if kind == "exponential":
            return cls.exponential(d["rate"])
        if kind == "zero":
            return cls.zero()
        if kind == "deterministic":
            return cls.deterministic(d.get("value", 0.0))
        raise SpecError([f"unknown job law {kind!r}"])


def _as_matrix(rows) -> np.ndarray:
    m = np.array(rows, dtype=float)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class NetworkSpec:
    """Plain (non-modulated) network observed at time ``horizon``."""

    lam: float
    jobs: tuple[JobLaw, ...]
    drain: tuple[float, ...]
    routing: np.ndarray = field(compare=False)
    horizon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        object.__setattr__(self, "drain", tuple(float(r) for r in self.drain))
        object.__setattr__(self, "routing", _as_matrix(self.routing))

    @property
    def L(self) -> int:
        return len(self.jobs)

    @property
    def R(self) -> np.ndarray:
        return build_rate_matrix(self)

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return (
            self.lam == other.lam
            and self.jobs == other.jobs
            and self.drain == other.drain
            and self.horizon == other.horizon
            and np.array_equal(self.routing, other.routing)
        )

    __hash__ = None

    @classmethod
    def single_node(cls, lam, job: JobLaw, r, horizon) -> "NetworkSpec":
        return cls(lam=lam, jobs=(job,), drain=(r,), routing=[[1.0]], horizon=horizon)

    @classmethod
    def tandem(cls, lam, job: JobLaw, r1, r2, horizon) -> "NetworkSpec":
        """Two nodes in series with external input at the first node only."""
        return cls(
            lam=lam,
            jobs=(job, JobLaw.zero()),
            drain=(r1, r2),
            routing=[[0.0, 1.0], [0.0, 1.0]],
            horizon=horizon,
        )

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "horizon": self.horizon,
            "node": [
                {"rate": r, "routing": list(map(float, p)), "job": j.to_dict()}
                for r, p, j in zip(self.drain, self.routing, self.jobs)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        nodes = d["node"]
        return cls(
            lam=float(d["lambda"]),
            jobs=tuple(JobLaw.from_dict(nd["job"]) for nd in nodes),
            drain=tuple(float(nd["rate"]) for nd in nodes),
            routing=[nd["routing"] for nd in nodes],
            horizon=float(d["horizon"]),
        )


@dataclass(frozen=True)
class StateSpec:
    """Dynamics while the background chain sits in one state."""

    lam: float
    jobs: tuple[JobLaw, ...]
    drain: tuple[float, ...]
    routing: np.ndarray = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        object.__setattr__(self, "drain", tuple(float(r) for r in self.drain))
        object.__setattr__(self, "routing", _as_matrix(self.routing))

    def __eq__(self, other):
        if not isinstance(other, StateSpec):
            return NotImplemented
        return (
            self.lam == other.lam
            and self.jobs == other.jobs
            and self.drain == other.drain
            and np.array_equal(self.routing, other.routing)
        )

    __hash__ = None

    @property
    def L(self) -> int:
        return len(self.jobs)

    @property
    def R(self) -> np.ndarray:
        return build_rate_matrix(self)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "node": [
                {"rate": r, "routing": list(map(float, p)), "job": j.to_dict()}
                for r, p, j in zip(self.drain, self.routing, self.jobs)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpec":
        nodes = d["node"]
        return cls(
            lam=float(d["lambda"]),
            jobs=tuple(JobLaw.from_dict(nd["job"]) for nd in nodes),
            drain=tuple(float(nd["rate"]) for nd in nodes),
            routing=[nd["routing"] for nd in nodes],
        )


@dataclass(frozen=True)
class ModulatedNetworkSpec:
    """Network whose arrival rate, job law and routing follow a CTMC.

    The chain starts in ``j0``; alternatively ``initial`` gives a starting
    distribution (the single-node experiments with two symmetric states
    start from the stationary law).
    """

    Q: np.ndarray = field(compare=False)
    states: tuple[StateSpec, ...]
    horizon: float
    j0: int = 0
    initial: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "Q", _as_matrix(self.Q))
        object.__setattr__(self, "states", tuple(self.states))
        if self.initial is not None:
            object.__setattr__(self, "initial", tuple(float(x) for x in self.initial))

    def __eq__(self, other):
        if not isinstance(other, ModulatedNetworkSpec):
            return NotImplemented
        return (
            np.array_equal(self.Q, other.Q)
            and self.states == other.states
            and self.horizon == other.horizon
            and self.j0 == other.j0
            and self.initial == other.initial
        )

    __hash__ = None

    @property
    def d(self) -> int:
        return len(self.states)

    @property
    def L(self) -> int:
        return self.states[0].L

    @property
    def initial_distribution(self) -> np.ndarray:
        if self.initial is not None:
            return np.array(self.initial)
        p = np.zeros(self.d)
        p[self.j0] = 1.0
        return p

    @classmethod
    def from_network(cls, spec: NetworkSpec) -> "ModulatedNetworkSpec":
        st = StateSpec(spec.lam, spec.jobs, spec.drain, spec.routing)
        return cls(Q=[[0.0]], states=(st,), horizon=spec.horizon, j0=0)

    def to_network(self, j: int | None = None) -> NetworkSpec:
        """The plain network obtained by freezing the chain in state ``j``."""
        if j is None:
            if self.d != 1:
                raise ValueError("state must be given when d > 1")
            j = 0
        st = self.states[j]
        return NetworkSpec(st.lam, st.jobs, st.drain, st.routing, self.horizon)

    @classmethod
    def single_node(cls, Q, lams, mus, rs, horizon, j0=0, initial=None):
        states = tuple(
            StateSpec(lam, (JobLaw.exponential(mu),), (r,), [[1.0]])
            for lam, mu, r in zip(lams, mus, rs)
        )
        return cls(Q=Q, states=states, horizon=horizon, j0=j0, initial=initial)

    def to_dict(self) -> dict:
        d = {
            "horizon": self.horizon,
            "generator": [list(map(float, row)) for row in self.Q],
            "state": [s.to_dict() for s in self.states],
        }
        if self.initial is not None:
            d["initial"] = list(self.initial)
        else:
            d["j0"] = self.j0
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModulatedNetworkSpec":
        return cls(
            Q=d["generator"],
            states=tuple(StateSpec.from_dict(s) for s in d["state"]),
            horizon=float(d["horizon"]),
            j0=int(d.get("j0", 0)),
            initial=d.get("initial"),
        )


@dataclass(frozen=True)
class RareTarget:
    """Thresholds ``a`` (per unit of the scaling ``n``) for ``Y_n >= n a``."""

    a: tuple[float, ...]
    n: int = 1

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in np.atleast_1d(self.a)))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.a)


def build_rate_matrix(spec) -> np.ndarray:
    """Rate matrix with ``R[l, l] = r_l`` and ``R[l, l'] = -r_l p[l, l']``."""
    r = np.asarray(spec.drain, dtype=float)
    p = np.asarray(spec.routing, dtype=float)
    R = -r[:, None] * p
    np.fill_diagonal(R, r)
    return R


def _routing_violations(drain, routing, L, where) -> list[str]:
    out = []
    p = np.asarray(routing, dtype=float)
    if p.shape != (L, L):
        return [f"{where}: routing must be {L}x{L}"]
    for l, r in enumerate(drain):
        if not (r > 0 and math.isfinite(r)):
            out.append(f"{where}: drain rate of node {l} must be positive")
    if np.any(p < 0):
        out.append(f"{where}: routing fractions must be non-negative")
    for l, row in enumerate(p):
        if abs(row.sum() - 1.0) > TOL:
            out.append(f"{where}: routing row {l} sums to {row.sum():.12g}, not 1")
    return out


def _jobs_violations(jobs, where) -> list[str]:
    out = []
    for l, job in enumerate(jobs):
        out += job.violations(f"{where}: job law of node {l}")
    if jobs and all(j.is_zero for j in jobs):
        out.append(f"{where}: at least one node needs a non-zero job law")
    return out


def _irreducible(Q: np.ndarray) -> bool:
    d = len(Q)
    adj = (Q > 0) | np.eye(d, dtype=bool)
    reach = adj.copy()
    for _ in range(d):
        reach = reach | ((reach.astype(int) @ adj.astype(int)) > 0)
    return bool(reach.all())


def validate(spec) -> list[str]:
    """Check every invariant of a spec; returns the list of violations."""
    out: list[str] = []
    if isinstance(spec, NetworkSpec):
        if spec.L < 1:
            return ["network needs at least one node"]
        if not (spec.lam > 0):
            out.append("arrival rate must be positive")
        if not (spec.horizon > 0):
            out.append("horizon must be positive")
        out += _jobs_violations(spec.jobs, "network")
        if len(spec.drain) != spec.L:
            out.append("network: one drain rate per node required")
        else:
            out += _routing_violations(spec.drain, spec.routing, spec.L, "network")
        return out
    if isinstance(spec, ModulatedNetworkSpec):
        Q = spec.Q
        d = spec.d
        if Q.shape != (d, d):
            return [f"generator must be {d}x{d}"]
        if not (spec.horizon > 0):
            out.append("horizon must be positive")
        for j in range(d):
            off = np.delete(Q[j], j)
            if np.any(off < 0):
                out.append(f"generator row {j} has a negative off-diagonal entry")
            if abs(Q[j].sum()) > TOL:
                out.append(f"generator row {j} not conservative")
        if d > 1 and not _irreducible(Q):
            out.append("generator is not irreducible")
        if spec.initial is not None:
            p = np.array(spec.initial)
            if p.shape != (d,) or np.any(p < 0) or abs(p.sum() - 1) > TOL:
                out.append("initial distribution must be a probability vector")
        elif not 0 <= spec.j0 < d:
            out.append(f"initial state {spec.j0} out of range")
        L = spec.L
        for j, st in enumerate(spec.states):
            where = f"state {j}"
            if st.L != L:
                out.append(f"{where}: all states need {L} nodes")
                continue
            if not (st.lam >= 0):
                out.append(f"{where}: arrival rate must be non-negative")
            out += _jobs_violations(st.jobs, where)
            out += _routing_violations(st.drain, st.routing, L, where)
        return out
    raise TypeError(f"cannot validate {type(spec).__name__}")


def check(spec):
    """Raise :class:`SpecError` if ``spec`` has violations; return it otherwise."""
    v = validate(spec)
    if v:
        raise SpecError(v)
    return spec


def check_rarity(spec, target: RareTarget) -> bool:
    """True when the target set is rare for the spec.

    For modulated specs only the ``d`` constant background paths are
    inspected, and a :class:`RarityWarning` says so.
    """
    from . import analytics

    a = target.vector
    if isinstance(spec, NetworkSpec):
        m = analytics.mean_vector(spec)
        return not bool(np.all(m >= a))
    warnings.warn(
        "rarity of a modulated target is checked on constant paths only",
        RarityWarning,
        stacklevel=2,
    )
    for j in range(spec.d):
        m = analytics.mean_vector(spec.to_network(j))
        if np.all(m >= a):
            return False
    return True


def as_network_list(spec) -> Sequence[NetworkSpec]:
    if isinstance(spec, NetworkSpec):
        return [spec]
    return [spec.to_network(j) for j in range(spec.d)]
