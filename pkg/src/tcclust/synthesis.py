"""Forward samplers for the TC-CRP and TC-CRF tracklet generative processes.

Both samplers first lay out tracklets in time and space (chains of adjacent
tracklets, occasional overlapping bystanders, frame gaps), derive the
sequence context from that layout, and then walk the tracklets in order
drawing change flags, labels and features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .dataset import Dataset, build_context, to_float32
from .model import (
    Categorical,
    JUNK,
    JUNK_LABEL,
    NEW,
    Component,
    ContractError,
    HyperParams,
    ModelState,
    SegmentTable,
    SequenceContext,
    TrackletRecord,
    log_gaussian,
    tccrf_predictive,
    tccrp_predictive,
)


@dataclass
class SynthesisPlan:
    n_tracklets: int
    dim: int
    seed: int = 0
    tracklet_length: int = 10
    mean_chain_length: float = 6.0
    max_chain_gap: int = 20
    overlap_rate: float = 0.05
    segment_rate: float = 0.0
    n_segments: int | None = None
    frame_size: tuple[float, float] = (640.0, 480.0)
    jitter: float = 2.0
    min_separation: float | None = None
    max_components: int | None = None

    def __post_init__(self) -> None:
        if self.n_tracklets < 1 or self.dim < 1 or self.tracklet_length < 1:
            raise ContractError("n_tracklets, dim and tracklet_length must be >= 1")
        if not 0 <= self.overlap_rate <= 1 or not 0 <= self.segment_rate <= 1:
            raise ContractError("overlap_rate and segment_rate must lie in [0, 1]")
        if self.mean_chain_length < 1:
            raise ContractError("mean_chain_length must be >= 1")
        if self.n_segments is not None and not 1 <= self.n_segments <= self.n_tracklets:
            raise ContractError("n_segments must lie in [1, n_tracklets]")
        if self.max_components is not None and self.max_components < 1:
            raise ContractError("max_components must be >= 1")


@dataclass
class IBPRow:
    existing: frozenset[int]
    n_new: int


def entity_label(k: int) -> str:
    return JUNK_LABEL if k == JUNK else f"e{k}"


def frame_layout(plan: SynthesisPlan, hyper: HyperParams, rng: np.random.Generator) -> list[TrackletRecord]:
    """Frame spans and centres for ``plan.n_tracklets`` tracklets (features zeroed)."""
    R = plan.tracklet_length
    W, H = plan.frame_size
    n = plan.n_tracklets
    if plan.n_segments is not None:
        # boundaries at evenly spaced tracklet counts, realised at chain ends
        bounds = [round(n * s / plan.n_segments) for s in range(1, plan.n_segments)]
    else:
        bounds = []
    spans: list[tuple[int, int, float, float]] = []
    frame = 0
    while len(spans) < n:
        length = int(rng.geometric(1.0 / plan.mean_chain_length))
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        for _ in range(length):
            if len(spans) >= n:
                break
            spans.append((frame, frame + R - 1, cx + rng.normal(0, plan.jitter), cy + rng.normal(0, plan.jitter)))
            if len(spans) < n and rng.random() < plan.overlap_rate:
                spans.append((frame, frame + R - 1, rng.uniform(0, W), rng.uniform(0, H)))
            frame += R
        gap = int(rng.integers(0, plan.max_chain_gap + 1))
        new_segment = rng.random() < plan.segment_rate
        if bounds and len(spans) >= bounds[0]:
            while bounds and len(spans) >= bounds[0]:
                bounds.pop(0)
            new_segment = True
        if new_segment:
            gap = hyper.segment_gap + 1 + int(rng.integers(0, plan.max_chain_gap + 1))
        frame += gap
    spans.sort(key=lambda t: (t[0], t[1]))
    return [
        TrackletRecord(id=i, features=np.zeros(plan.dim), start_frame=s, end_frame=e, spatial_center=(float(x), float(y)))
        for i, (s, e, x, y) in enumerate(spans)
    ]


def change_probability(i: int, context: SequenceContext, hyper: HyperParams, segmented: bool) -> float:
    """P(C_i = 1); 1 when there is no predecessor or (TC-CRF) it lies in another segment."""
    p = context.prev[i]
    if p is None:
        return 1.0
    if segmented and context.segment_of[p] != context.segment_of[i]:
        return 1.0
    return hyper.kappa1 if context.prev_distance[i] <= hyper.thres else hyper.kappa2


class _Atoms:
    """Lazily drawn component means, optionally kept a minimum distance apart."""

    def __init__(self, hyper: HyperParams, rng: np.random.Generator, min_separation: float | None):
        self.hyper = hyper
        self.rng = rng
        self.sep = min_separation
        self.phi: dict[int, np.ndarray] = {}

    def draw(self, k: int) -> np.ndarray:
        h = self.hyper
        scale = np.sqrt(h.sigma1)
        for _ in range(10_000):
            phi = h.mu + np.sqrt(h.sigma0) * self.rng.standard_normal(h.dim)
            if self.sep is None or all(
                np.linalg.norm((phi - other) / scale) >= self.sep for other in self.phi.values()
            ):
                break
        else:
            raise RuntimeError("could not place a component mean at the requested separation")
        self.phi[k] = phi
        return phi


def _emit(k: int, atoms: _Atoms, hyper: HyperParams, rng: np.random.Generator) -> np.ndarray:
    if k == JUNK:
        y = hyper.mu + np.sqrt(hyper.sigma2) * rng.standard_normal(hyper.dim)
    else:
        y = atoms.phi[k] + np.sqrt(hyper.sigma1) * rng.standard_normal(hyper.dim)
    # the dataset format stores float32 features
    return to_float32(y)


def _conflict_labels(i: int, context: SequenceContext, z: np.ndarray) -> set[int]:
    return {int(z[j]) for j in context.conflict_sets[i] if j < i} - {JUNK}


def _without_new(dist: Categorical) -> Categorical:
    """Condition a predictive draw on not opening a component."""
    kept = [(k, w) for k, w in zip(dist.labels, dist.weights) if k != NEW]
    return Categorical(kept) if any(w > 0 for _, w in kept) else dist


def _finish(records, context, z, c, atoms: _Atoms, Y, plan, segments=None):
    comps: dict[int, Component] = {}
    for i, k in enumerate(z.tolist()):
        if k == JUNK:
            continue
        comp = comps.setdefault(k, Component(atoms.phi[k].copy()))
        comp.n += 1
        comp.sum_y = comp.sum_y + Y[i]
        comp.n_zc += int(c[i])
    for i, r in enumerate(records):
        r.features = Y[i]
        r.truth_label = entity_label(int(z[i]))
    state = ModelState(z=z, c=c, components=dict(sorted(comps.items())), segments=segments)
    data = Dataset(records, plan.dim, plan.tracklet_length)
    return data, context, state


def generate_tccrp(plan: SynthesisPlan, hyper: HyperParams):
    """Sample a dataset from the TC-CRP generative process.

    Returns ``(dataset, context, truth)``. A change flag of 0 that would copy a
    label already held by an overlapping earlier tracklet is flipped to 1.
    """
    if hyper.dim != plan.dim:
        raise ContractError("plan and hyperparameter dimensions differ")
    rng = np.random.default_rng(plan.seed)
    records = frame_layout(plan, hyper, rng)
    context = build_context(records, hyper)
    n = len(records)
    atoms = _Atoms(hyper, rng, plan.min_separation)
    z = np.zeros(n, dtype=np.int64)
    c = np.zeros(n, dtype=np.int8)
    Y = np.zeros((n, plan.dim))
    work = ModelState(z=z, c=c)
    for i in range(n):
        blocked = _conflict_labels(i, context, z)
        ci = int(rng.random() < change_probability(i, context, hyper, segmented=False))
        if not ci and int(z[context.prev[i]]) in blocked:
            ci = 1
        if ci:
            dist = tccrp_predictive(work, blocked, hyper)
            if plan.max_components is not None and len(atoms.phi) >= plan.max_components:
                dist = _without_new(dist)
            k = dist.sample(rng)
            if k == NEW:
                k = len(atoms.phi) + 1
                atoms.draw(k)
                work.components[k] = Component(atoms.phi[k])
            if k != JUNK:
                work.components[k].n_zc += 1
        else:
            k = int(z[context.prev[i]])
        z[i], c[i] = k, ci
        Y[i] = _emit(k, atoms, hyper, rng)
    return _finish(records, context, z, c, atoms, Y, plan)


def sample_ibp_row(n_prior: int, activation_counts: Mapping[int, int], gamma: float, rng: np.random.Generator) -> IBPRow:
    """Next row of an Indian buffet process given ``n_prior`` earlier rows.

    An existing column ``k`` switches on with probability
    ``activation_counts[k] / (n_prior + 1)``; ``Poisson(gamma / (n_prior + 1))``
    new columns are opened.
    """
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    idx = n_prior + 1
    existing = frozenset(k for k, m in sorted(activation_counts.items()) if m > 0 and rng.random() < m / idx)
    n_new = int(rng.poisson(gamma / idx)) if gamma > 0 else 0
    return IBPRow(existing, n_new)


def generate_tccrf(plan: SynthesisPlan, hyper: HyperParams):
    """Sample a dataset from the TC-CRF generative process.

    Activation sets ``B_s`` are drawn for every segment first; labels in
    segment ``s`` are then restricted to ``B_s``.
    """
    if hyper.dim != plan.dim:
        raise ContractError("plan and hyperparameter dimensions differ")
    rng = np.random.default_rng(plan.seed)
    records = frame_layout(plan, hyper, rng)
    context = build_context(records, hyper)
    n = len(records)
    n_seg = context.n_segments

    active: list[set[int]] = []
    activation_counts: dict[int, int] = {}
    n_dishes = 0
    for s in range(n_seg):
        row = sample_ibp_row(s, activation_counts, hyper.gamma, rng)
        fresh = set(range(n_dishes + 1, n_dishes + 1 + row.n_new))
        n_dishes += row.n_new
        b = set(row.existing) | fresh
        for k in b:
            activation_counts[k] = activation_counts.get(k, 0) + 1
        active.append(b)

    # never-used dishes are interchangeable; they enter the predictive as a count
    fresh_count = [len(b) for b in active]
    dish_segments: dict[int, list[int]] = {}
    for s, b in enumerate(active):
        for k in b:
            dish_segments.setdefault(k, []).append(s)
    fresh_order = [sorted(b) for b in active]
    fresh_pos = [0] * n_seg

    atoms = _Atoms(hyper, rng, plan.min_separation)
    segs = SegmentTable.empty(n_seg)
    segs.active = [set(b) for b in active]
    work = ModelState(z=np.zeros(0, dtype=np.int64), c=np.zeros(0, dtype=np.int8), segments=segs)
    z = np.zeros(n, dtype=np.int64)
    c = np.zeros(n, dtype=np.int8)
    Y = np.zeros((n, plan.dim))
    for i in range(n):
        s = context.segment_of[i]
        blocked = _conflict_labels(i, context, z)
        ci = int(rng.random() < change_probability(i, context, hyper, segmented=True))
        if not ci and int(z[context.prev[i]]) in blocked:
            ci = 1
        if ci:
            used_active = {k for k in active[s] if k in atoms.phi}
            k = tccrf_predictive(work, s, blocked, hyper, active=used_active, n_fresh=fresh_count[s]).sample(rng)
            if k == NEW:
                order = fresh_order[s]
                while order[fresh_pos[s]] in atoms.phi:
                    fresh_pos[s] += 1
                k = order[fresh_pos[s]]
                atoms.draw(k)
                for s2 in dish_segments[k]:
                    fresh_count[s2] -= 1
            if k != JUNK:
                segs.n_szc[s][k] = segs.n_szc[s].get(k, 0) + 1
        else:
            k = int(z[context.prev[i]])
        if k != JUNK:
            segs.members[s][k] = segs.members[s].get(k, 0) + 1
        z[i], c[i] = k, ci
        Y[i] = _emit(k, atoms, hyper, rng)
    return _finish(records, context, z, c, atoms, Y, plan, segments=segs)


# ---------------------------------------------------------------------------
# Sequential scoring of a realised sample
# ---------------------------------------------------------------------------


def sequential_log_prob(
    features: np.ndarray,
    context: SequenceContext,
    truth: ModelState,
    hyper: HyperParams,
    mode: str = "tccrp",
) -> float:
    """Log-probability of ``(C, Z, phi, Y)`` under the forward process, step by step.

    For ``tccrf`` the activation sets in ``truth.segments.active`` are scored
    too. Conflict repairs are scored as forced changes. Returns ``-inf`` for
    samples the process cannot produce.
    """
    if mode not in ("tccrp", "tccrf"):
        raise ValueError(f"unknown mode {mode!r}")
    segmented = mode == "tccrf"
    z, c = truth.z, truth.c
    lp = 0.0
    for k, comp in truth.components.items():
        if comp.n > 0:
            lp += log_gaussian(comp.phi, hyper.mu, hyper.sigma0)

    if segmented:
        active = truth.segments.active
        counts: dict[int, int] = {}
        seen = 0
        for s, b in enumerate(active):
            idx = s + 1
            old = {k for k, m in counts.items() if m > 0}
            for k in sorted(old):
                p = counts[k] / idx
                lp += math.log(p) if k in b else math.log1p(-p) if p < 1 else -math.inf
            new = sorted(b - old)
            if new and (new[0] != seen + 1 or new[-1] != seen + len(new)):
                return -math.inf
            lam = hyper.gamma / idx
            lp += -lam + len(new) * math.log(lam) - math.lgamma(len(new) + 1) if lam > 0 else (0.0 if not new else -math.inf)
            seen += len(new)
            for k in b:
                counts[k] = counts.get(k, 0) + 1

    n_zc: dict[int, int] = {}
    n_szc: list[dict[int, int]] = [dict() for _ in range(context.n_segments)]
    used: set[int] = set()
    for i in range(len(z)):
        k, ci = int(z[i]), int(c[i])
        s = context.segment_of[i]
        blocked = {int(z[j]) for j in context.conflict_sets[i] if j < i} - {JUNK}
        p1 = change_probability(i, context, hyper, segmented)
        p = context.prev[i]
        forced = p is not None and int(z[p]) in blocked
        if ci:
            if not forced:
                lp += math.log(p1) if p1 > 0 else -math.inf
            if segmented:
                b = active[s]
                here = n_szc[s]
                pool = [q for q in b if here.get(q, 0) == 0]
                share = hyper.alpha / len(pool) if pool else 0.0
                total = hyper.beta + sum(
                    (here[q] if here.get(q, 0) > 0 else share) for q in b if q not in blocked
                )
                if k == JUNK:
                    w = hyper.beta
                elif k in blocked or k not in b:
                    return -math.inf
                elif here.get(k, 0) > 0:
                    w = here[k]
                elif k in used:
                    w = share
                else:
                    fresh = [q for q in b if q not in used]
                    if k != min(fresh):
                        return -math.inf
                    w = share * len(fresh)
                lp += math.log(w) - math.log(total)
                if k != JUNK:
                    here[k] = here.get(k, 0) + 1
            else:
                w = {JUNK: hyper.beta}
                for q, m in n_zc.items():
                    if q not in blocked:
                        w[q] = m
                total = sum(w.values()) + hyper.alpha
                if k == JUNK or k in used:
                    if k not in w:
                        return -math.inf
                    lp += math.log(w[k]) - math.log(total)
                else:
                    if k != len(used) + 1:
                        return -math.inf
                    lp += math.log(hyper.alpha) - math.log(total)
            if k != JUNK:
                n_zc[k] = n_zc.get(k, 0) + 1
                used.add(k)
        else:
            if p is None or forced or k != int(z[p]):
                return -math.inf
            lp += math.log1p(-p1) if p1 < 1 else -math.inf
        if k == JUNK:
            lp += log_gaussian(features[i], hyper.mu, hyper.sigma2)
        else:
            lp += log_gaussian(features[i], truth.components[k].phi, hyper.sigma1)
    return lp


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def generate_until(
    plan: SynthesisPlan,
    hyper: HyperParams,
    accept: Callable[[Dataset, SequenceContext, ModelState], bool],
    mode: str = "tccrp",
    max_tries: int = 500,
):
    """Draw datasets with seeds derived from ``plan.seed`` until ``accept`` holds."""
    gen = generate_tccrp if mode == "tccrp" else generate_tccrf
    seeds = np.random.SeedSequence(plan.seed).generate_state(max_tries, dtype=np.uint64)
    for s in seeds.tolist():
        trial = SynthesisPlan(**{**plan.__dict__, "seed": int(s)})
        out = gen(trial, hyper)
        if accept(*out):
            return out
    raise RuntimeError(f"no accepted dataset within {max_tries} draws")


def benchmark_hyper(dim: int = 25, alpha: float = 2.5, beta: float = 1.0, **kw) -> HyperParams:
    """Hyperparameters used by the synthetic recovery benchmark."""
    return HyperParams.isotropic(dim, sigma0=16.0, sigma1=1.0, alpha=alpha, beta=beta, **kw)


def recovery_benchmark(
    seed: int,
    n_tracklets: int = 2000,
    dim: int = 25,
    n_entities: int = 10,
    junk_range: tuple[float, float] = (0.03, 0.07),
    min_entity_size: int = 20,
    hyper: HyperParams | None = None,
):
    """TC-CRP data with exactly ``n_entities`` entities, each well represented.

    The process is capped at ``n_entities`` components. Entity means are at
    least 10 sqrt(sigma1) apart and roughly 5% of tracklets are junk; draws
    that miss these targets are rejected.
    """
    hyper = hyper or benchmark_hyper(dim)
    plan = SynthesisPlan(
        n_tracklets, dim, seed=seed, overlap_rate=0.05, min_separation=10.0, max_components=n_entities
    )

    def accept(ds: Dataset, ctx: SequenceContext, truth: ModelState) -> bool:
        sizes = [comp.n for comp in truth.components.values() if comp.n > 0]
        junk = float(np.mean(truth.z == JUNK))
        return (
            len(sizes) == n_entities
            and min(sizes) >= min_entity_size
            and junk_range[0] <= junk <= junk_range[1]
        )

    return generate_until(plan, hyper, accept)


def segment_benchmark(
    seed: int,
    n_tracklets: int = 2000,
    dim: int = 25,
    n_segments: int = 8,
    gamma: float = 3.0,
    beta: float = 0.1,
    junk_range: tuple[float, float] = (0.02, 0.10),
    min_entities: int = 5,
    min_entity_size: int = 20,
):
    """TC-CRF data over ``n_segments`` shots, each showing a sparse subset of the entities.

    The forward process restarts the competition between junk and entities in
    every segment, so junk is drawn with a small ``beta`` to keep its share
    near the recovery benchmark's. Draws are accepted when junk falls in
    ``junk_range``, at least ``min_entities`` entities have ``min_entity_size``
    tracklets and no segment shows every entity.
    """
    hyper = benchmark_hyper(dim, beta=beta, gamma=gamma)
    plan = SynthesisPlan(
        n_tracklets, dim, seed=seed, overlap_rate=0.05, n_segments=n_segments, min_separation=10.0
    )

    def accept(ds: Dataset, ctx: SequenceContext, truth: ModelState) -> bool:
        sizes = [comp.n for comp in truth.components.values() if comp.n > 0]
        junk = float(np.mean(truth.z == JUNK))
        shown = [set(m) for m in truth.segments.members]
        return (
            junk_range[0] <= junk <= junk_range[1]
            and sum(1 for n in sizes if n >= min_entity_size) >= min_entities
            and all(len(s) < len(sizes) for s in shown)
        )

    return generate_until(plan, hyper, accept, mode="tccrf")
