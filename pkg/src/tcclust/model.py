"""Core types, diagonal Gaussian densities and predictive probability functions.

Component index conventions used throughout the package:

* ``0`` is the junk component, a fixed wide Gaussian ``N(mu, c * sigma1)``;
* ``k >= 1`` are entity components with mean ``phi_k``;
* ``NEW`` (``-1``) stands for a not-yet-instantiated component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping

import numpy as np

JUNK = 0
NEW = -1
JUNK_LABEL = "__junk__"

LOG_2PI = math.log(2.0 * math.pi)


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class TrackletRecord:
    """One observed tracklet: the mean feature vector of its detections."""

    id: int
    features: np.ndarray
    start_frame: int
    end_frame: int
    spatial_center: tuple[float, float] | None = None
    truth_label: str | None = None
    distance: float | None = None  # explicit dist(i, prev(i)); overrides the derived one

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 1:
            raise ContractError(f"tracklet {self.id}: features must be a 1-D vector")
        if self.start_frame < 0 or self.end_frame < self.start_frame:
            raise ContractError(
                f"tracklet {self.id}: bad frame span {self.start_frame}..{self.end_frame}"
            )

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1

    @property
    def is_junk(self) -> bool:
        return self.truth_label == JUNK_LABEL

    def same_as(self, other: "TrackletRecord") -> bool:
        return (
            self.id == other.id
            and self.start_frame == other.start_frame
            and self.end_frame == other.end_frame
            and self.spatial_center == other.spatial_center
            and self.truth_label == other.truth_label
            and self.distance == other.distance
            and np.array_equal(self.features, other.features)
        )


@dataclass
class SequenceContext:
    """Temporal structure derived from a sorted list of tracklets.

    ``successors[i]`` holds every ``j`` with ``prev[j] == i``; ``next[i]`` is the
    earliest of them. Several tracklets can share a predecessor when they
    overlap each other.
    """

    prev: list[int | None]
    next: list[int | None]
    successors: list[tuple[int, ...]]
    conflict_sets: list[frozenset[int]]
    changepoints: list[int]
    segment_of: list[int]
    prev_distance: list[float]

    @property
    def n(self) -> int:
        return len(self.prev)

    @property
    def n_segments(self) -> int:
        return (self.segment_of[-1] + 1) if self.segment_of else 0


@dataclass
class HyperParams:
    """Model constants. Covariances are diagonal and stored as variance vectors."""

    mu: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray
    c: float = 5.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    kappa1: float = 0.001
    kappa2: float = 0.1
    thres: float = 5.0
    segment_gap: int = 100
    pixel_weight: float = 0.1
    min_cluster_size: int = 10
    purity_threshold: float = 0.7
    min_segment_frames: int = 100

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        d = self.mu.shape[0]
        self.sigma0 = np.broadcast_to(np.asarray(self.sigma0, dtype=np.float64), (d,)).copy()
        self.sigma1 = np.broadcast_to(np.asarray(self.sigma1, dtype=np.float64), (d,)).copy()
        self.validate()

    @classmethod
    def isotropic(cls, dim: int, mu: float = 0.0, sigma0: float = 1.0, sigma1: float = 1.0, **kw) -> "HyperParams":
        return cls(mu=np.full(dim, mu), sigma0=np.full(dim, sigma0), sigma1=np.full(dim, sigma1), **kw)

    def validate(self) -> None:
        if np.any(~np.isfinite(self.mu)):
            raise ContractError("mu must be finite")
        for name in ("sigma0", "sigma1"):
            v = getattr(self, name)
            if np.any(~(v > 0)) or np.any(~np.isfinite(v)):
                raise ContractError(f"{name} must be strictly positive and finite")
        if not self.c > 1:
            raise ContractError(f"c must be > 1, got {self.c}")
        # beta == 0 is the no-junk limit used by the CRP baseline
        if not self.alpha > 0 or not self.beta >= 0 or not self.gamma >= 0:
            raise ContractError("alpha must be > 0; beta and gamma must be >= 0")
        if not (0 <= self.kappa1 <= 1 and 0 <= self.kappa2 <= 1):
            raise ContractError("kappa1, kappa2 must lie in [0, 1]")
        if self.kappa1 > self.kappa2:
            raise ContractError("kappa1 must not exceed kappa2")
        if not self.thres > 0 or self.segment_gap < 1:
            raise ContractError("thres must be > 0 and segment_gap >= 1")
        if self.min_cluster_size < 1 or self.min_segment_frames < 1:
            raise ContractError("min_cluster_size and min_segment_frames must be >= 1")
        if not 0 < self.purity_threshold <= 1:
            raise ContractError("purity_threshold must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma2(self) -> np.ndarray:
        return self.c * self.sigma1

    def replace(self, **changes) -> "HyperParams":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return HyperParams(**fields)


@dataclass
class Component:
    phi: np.ndarray
    n: int = 0
    sum_y: np.ndarray | None = None
    n_zc: int = 0

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.sum_y is None:
            self.sum_y = np.zeros(self.phi.shape)


@dataclass
class SegmentTable:
    """TC-CRF bookkeeping.

    ``n_szc[s][k]`` counts tracklets in segment ``s`` with ``Z=k`` and ``C=1``;
    ``members[s][k]`` counts all tracklets in ``s`` labelled ``k``;
    ``active[s]`` is the activation set ``B_s``.
    """

    n_szc: list[dict[int, int]]
    members: list[dict[int, int]]
    active: list[set[int]]

    @classmethod
    def empty(cls, n_segments: int) -> "SegmentTable":
        return cls(
            [dict() for _ in range(n_segments)],
            [dict() for _ in range(n_segments)],
            [set() for _ in range(n_segments)],
        )

    @property
    def seg_count(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for row in self.n_szc:
            for k, v in row.items():
                if v > 0:
                    out[k] = out.get(k, 0) + 1
        return out


@dataclass
class ModelState:
    z: np.ndarray
    c: np.ndarray
    components: dict[int, Component] = field(default_factory=dict)
    segments: SegmentTable | None = None

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    def counts(self) -> dict[int, int]:
        return {k: comp.n for k, comp in self.components.items()}

    def n_zc(self) -> dict[int, int]:
        return {k: comp.n_zc for k, comp in self.components.items()}

    def atoms(self) -> dict[int, np.ndarray]:
        return {k: comp.phi.copy() for k, comp in sorted(self.components.items())}

    @classmethod
    def from_counts(
        cls,
        n_zc: Mapping[int, int],
        dim: int = 1,
        n_szc: Mapping[int, Mapping[int, int]] | None = None,
        seg_count: Mapping[int, int] | None = None,
        n_segments: int = 0,
    ) -> "ModelState":
        """Bare state carrying only the counts a predictive function reads.

        ``seg_count`` is realised by spreading each component over that many
        synthetic segments beyond ``n_segments``; this keeps the table
        self-consistent without needing actual tracklets.
        """
        comps = {k: Component(np.zeros(dim), n=v, n_zc=v) for k, v in n_zc.items()}
        segs = None
        if n_szc is not None or seg_count is not None:
            n_szc = n_szc or {}
            seg_count = dict(seg_count or {})
            base = max([n_segments, *[s + 1 for s in n_szc]])
            extra_needed = {}
            for k, total in seg_count.items():
                inside = sum(1 for s in n_szc if n_szc[s].get(k, 0) > 0)
                extra_needed[k] = max(0, total - inside)
            n_extra = max(extra_needed.values(), default=0)
            segs = SegmentTable.empty(base + n_extra)
            for s, row in n_szc.items():
                for k, v in row.items():
                    segs.n_szc[s][k] = v
                    segs.members[s][k] = v
                    segs.active[s].add(k)
            for k, need in extra_needed.items():
                for j in range(need):
                    s = base + j
                    segs.n_szc[s][k] = 1
                    segs.members[s][k] = 1
                    segs.active[s].add(k)
            for k in seg_count:
                comps.setdefault(k, Component(np.zeros(dim)))
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8), comps, segs)


class Categorical:
    """Finite distribution over component labels (``NEW`` allowed)."""

    def __init__(self, support: Iterable[tuple[int, float]]):
        self.labels: list[int] = []
        weights = []
        for label, w in support:
            self.labels.append(int(label))
            weights.append(float(w))
        # supports are short, so plain Python checks beat numpy reductions here
        if len(set(self.labels)) != len(self.labels):
            raise ContractError("duplicate labels in categorical support")
        if not weights or not all(math.isfinite(w) and w >= 0 for w in weights):
            raise ContractError("weights must be finite and non-negative")
        if not max(weights) > 0:
            raise ContractError("at least one weight must be positive")
        self.weights = np.asarray(weights, dtype=np.float64)

    def __repr__(self) -> str:
        inner = ", ".join(f"{'NEW' if k == NEW else k}: {w:.6g}" for k, w in self.normalized().items())
        return f"Categorical({{{inner}}})"

    def unnormalized(self) -> dict[int, float]:
        return dict(zip(self.labels, self.weights.tolist()))

    def normalized(self) -> dict[int, float]:
        p = self.weights / self.weights.sum()
        return dict(zip(self.labels, p.tolist()))

    def prob(self, label: int) -> float:
        return self.normalized().get(label, 0.0)

    def sample(self, rng: np.random.Generator) -> int:
        p = self.weights / self.weights.sum()
        return self.labels[int(rng.choice(len(p), p=p))]


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def log_gaussian(y, mean, var) -> float:
    """Log-density of ``N(y | mean, diag(var))``."""
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if not (y.shape == mean.shape == var.shape) or y.ndim != 1:
        raise ContractError(f"dimension mismatch: {y.shape}, {mean.shape}, {var.shape}")
    if np.any(~(var > 0)):
        raise ContractError("variance elements must be strictly positive")
    r = y - mean
    return float(-0.5 * (y.shape[0] * LOG_2PI + np.log(var).sum() + (r * r / var).sum()))


def log_gaussian_rows(Y: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Row-wise ``log_gaussian`` for an ``(n, d)`` array; no validation."""
    r = Y - mean
    return -0.5 * (Y.shape[-1] * LOG_2PI + np.log(var).sum() + (r * r / var).sum(axis=-1))


# ---------------------------------------------------------------------------
# Predictive probability functions
# ---------------------------------------------------------------------------


def crp_predictive(counts: Mapping[int, int], alpha: float) -> Categorical:
    """Plain CRP: existing ``k`` weighted by its count, ``NEW`` by ``alpha``."""
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    support = []
    for k, n in sorted(counts.items()):
        if n < 0:
            raise ContractError("counts must be non-negative")
        support.append((k, n))
    support.append((NEW, alpha))
    return Categorical(support)


def tccrp_predictive(state: ModelState, conflict_labels: Collection[int], hyper: HyperParams) -> Categorical:
    """TC-CRP draw for a tracklet with ``C_i = 1``.

    Conflicting entity components get zero mass, junk gets ``beta``, each other
    component its changepoint count ``n_zc`` and a fresh component ``alpha``.
    """
    blocked = set(conflict_labels) - {JUNK}
    support = [(JUNK, hyper.beta)]
    for k, comp in sorted(state.components.items()):
        support.append((k, 0.0 if k in blocked else comp.n_zc))
    support.append((NEW, hyper.alpha))
    return Categorical(support)


def tccrf_predictive(
    state: ModelState,
    segment: int,
    conflict_labels: Collection[int],
    hyper: HyperParams,
    active: Collection[int] | None = None,
    n_fresh: int = 0,
) -> Categorical:
    """TC-CRF draw for a tracklet with ``C_i = 1`` in ``segment``.

    Without ``active`` the activation variable is marginalised jointly with the
    assignment: components already drawn in the segment weigh ``n_szc``,
    components drawn only elsewhere ``alpha * seg_count``, a brand-new
    component ``alpha * gamma``.

    With ``active`` (the sampled ``B_s`` during forward generation) only those
    components are admissible. Components already drawn in the segment weigh
    ``n_szc``; the active-but-unused ones, together with ``n_fresh`` never-seen
    components, share a total mass ``alpha`` equally.
    """
    if state.segments is None:
        raise ContractError("state carries no segment table")
    segs = state.segments
    blocked = set(conflict_labels) - {JUNK}
    here = segs.n_szc[segment] if segment < len(segs.n_szc) else {}
    support = [(JUNK, hyper.beta)]
    if active is None:
        seg_count = segs.seg_count
        for k in sorted(set(seg_count) | set(here)):
            if k in blocked:
                w = 0.0
            elif here.get(k, 0) > 0:
                w = here[k]
            else:
                w = hyper.alpha * seg_count.get(k, 0)
            support.append((k, w))
        support.append((NEW, hyper.alpha * hyper.gamma))
        return Categorical(support)

    active = set(active)
    unused = sorted(k for k in active if here.get(k, 0) == 0)
    pool = len(unused) + n_fresh
    share = hyper.alpha / pool if pool else 0.0
    for k in sorted(active | set(here)):
        if k in blocked or k not in active:
            w = 0.0
        elif here.get(k, 0) > 0:
            w = here[k]
        else:
            w = share
        support.append((k, w))
    if n_fresh:
        support.append((NEW, share * n_fresh))
    return Categorical(support)
