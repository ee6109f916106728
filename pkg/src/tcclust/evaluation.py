"""Clustering, outlier, linking and summarization metrics against ground truth.

Truth is a per-tracklet label list: an entity name, ``JUNK_LABEL`` for false
detections, or ``None`` when unknown. Unknown tracklets count toward cluster
sizes but never toward a majority.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import JUNK, JUNK_LABEL, HyperParams, ModelState, SequenceContext, TrackletRecord

Labels = Sequence["str | None"]


@dataclass(frozen=True)
class ClusterSummary:
    k: int
    size: int
    majority_label: str | None
    purity_fraction: float
    is_pure: bool
    is_mostly_junk: bool


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    labels: frozenset

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1


@dataclass
class ShotReport:
    segments: list[Segment]
    significant: list[bool]
    true_shots: list[Segment]
    n_significant_segments: int
    shot_coverage: int
    frame_coverage: float
    shot_conciseness: float | None
    shot_representativeness: float | None


@dataclass
class EvalReport:
    significant_clusters: list[ClusterSummary]
    flagged_junk_clusters: list[ClusterSummary]
    n_significant_clusters: int
    purity: float | None
    entity_coverage: int
    tracklet_coverage: float
    outlier_precision: float | None
    outlier_recall_star: int
    linking_fraction: float | None
    linking_fraction_no_singletons: float | None
    conciseness: float | None
    representativeness: float | None
    representativeness_x100: float | None
    n_significant_segments: int
    shot_coverage: int
    frame_coverage: float
    shot_conciseness: float | None
    shot_representativeness: float | None
    extra: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("significant_clusters", "flagged_junk_clusters", "extra")}
        out.update(self.extra)
        return out

    def to_flat(self) -> str:
        """``key = value`` lines; absent values are written as ``NA``."""
        lines = []
        for key, value in self.scalars().items():
            lines.append(f"{key} = {_flat_value(value)}")
        for kind, clusters in (("cluster", self.significant_clusters), ("junk_cluster", self.flagged_junk_clusters)):
            for cl in clusters:
                lines.append(
                    f"{kind}.{cl.k} = size={cl.size} majority={cl.majority_label or 'NA'} "
                    f"fraction={cl.purity_fraction:.6f} pure={int(cl.is_pure)}"
                )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"


def _flat_value(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _as_labels(z) -> np.ndarray:
    if isinstance(z, ModelState):
        z = z.z
    return np.asarray(z, dtype=np.int64)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


# ---------------------------------------------------------------------------
# Cluster metrics
# ---------------------------------------------------------------------------


def summarize_cluster(k: int, members: Labels, hyper: HyperParams) -> ClusterSummary:
    size = len(members)
    counts = Counter(l for l in members if l is not None and l != JUNK_LABEL)
    junk = sum(1 for l in members if l == JUNK_LABEL)
    if counts:
        top = max(counts.values())
        majority = min(l for l, v in counts.items() if v == top)
        frac = top / size
    else:
        majority, frac = None, 0.0
    return ClusterSummary(
        k=k,
        size=size,
        majority_label=majority,
        purity_fraction=frac,
        is_pure=frac >= hyper.purity_threshold,
        is_mostly_junk=junk / size >= hyper.purity_threshold,
    )


def significant_clusters(z, labels: Labels, hyper: HyperParams) -> tuple[list[ClusterSummary], list[ClusterSummary]]:
    """Clusters with at least ``min_cluster_size`` members.

    Returns ``(kept, flagged)``: clusters whose members are mostly junk are
    flagged and left out of ``kept``. The model's junk component never appears.
    """
    z = _as_labels(z)
    if len(z) != len(labels):
        raise ValueError("assignment and truth lengths differ")
    groups: dict[int, list] = {}
    for k, label in zip(z.tolist(), labels):
        if k != JUNK:
            groups.setdefault(k, []).append(label)
    kept, flagged = [], []
    for k in sorted(groups):
        members = groups[k]
        if len(members) < hyper.min_cluster_size:
            continue
        summary = summarize_cluster(k, members, hyper)
        (flagged if summary.is_mostly_junk else kept).append(summary)
    return kept, flagged


def purity_and_coverage(clusters: Sequence[ClusterSummary], labels: Labels, hyper: HyperParams | None = None) -> tuple[float | None, int, float]:
    """``(purity, entity_coverage, tracklet_coverage)``; purity is ``None`` without clusters."""
    pure = [cl for cl in clusters if cl.is_pure]
    purity = _ratio(len(pure), len(clusters))
    entities = {cl.majority_label for cl in pure}
    n = len(labels)
    tracklet_cov = sum(cl.size for cl in pure) / n if n else 0.0
    return purity, len(entities), tracklet_cov


def coverage_ratios(entity_coverage: float, tracklet_coverage: float, n_clusters: int) -> tuple[float | None, float | None]:
    """Conciseness and representativeness: each coverage divided by the cluster count."""
    return _ratio(entity_coverage, n_clusters), _ratio(tracklet_coverage, n_clusters)


def summarization_metrics(clusters: Sequence[ClusterSummary], labels: Labels, hyper: HyperParams | None = None) -> tuple[float | None, float | None]:
    _, entity_cov, tracklet_cov = purity_and_coverage(clusters, labels, hyper)
    return coverage_ratios(entity_cov, tracklet_cov, len(clusters))


def outlier_metrics(z, labels: Labels) -> tuple[float | None, int]:
    """Precision of the junk component and the raw count of true junk it caught."""
    z = _as_labels(z)
    picked = [labels[i] for i in np.flatnonzero(z == JUNK)]
    hits = sum(1 for l in picked if l == JUNK_LABEL)
    return _ratio(hits, len(picked)), hits


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


def truth_tracks(labels: Labels, context: SequenceContext, hyper: HyperParams) -> list[list[int]]:
    """Ground-truth tracks: same-entity tracklets chained through ``prev`` within ``thres``.

    Junk and unlabeled tracklets are left out.
    """
    parent = list(range(len(labels)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, p in enumerate(context.prev):
        if p is None or labels[i] in (None, JUNK_LABEL):
            continue
        if labels[p] == labels[i] and context.prev_distance[i] <= hyper.thres:
            parent[find(i)] = find(p)
    tracks: dict[int, list[int]] = {}
    for i, label in enumerate(labels):
        if label not in (None, JUNK_LABEL):
            tracks.setdefault(find(i), []).append(i)
    return sorted(tracks.values())


def linking_fraction(z, tracks: Sequence[Sequence[int]]) -> tuple[float | None, float | None]:
    """Fraction of tracks labelled by a single cluster, with and without singleton tracks."""
    z = _as_labels(z)
    linked = [len({int(z[i]) for i in t}) == 1 for t in tracks]
    multi = [ok for t, ok in zip(tracks, linked) if len(t) > 1]
    return _ratio(sum(linked), len(linked)), _ratio(sum(multi), len(multi))


# ---------------------------------------------------------------------------
# Shots
# ---------------------------------------------------------------------------


def frame_segments(spans: Sequence[tuple[int, int]], keys: Sequence, first: int, last: int) -> list[Segment]:
    """Cut ``[first, last]`` wherever the set of keys covering a frame changes."""
    n_frames = last - first + 1
    uniq = sorted(set(keys), key=str)
    index = {k: j for j, k in enumerate(uniq)}
    cover = np.zeros((len(uniq), n_frames + 1), dtype=np.int64)
    for (s, e), key in zip(spans, keys):
        j = index[key]
        cover[j, max(s, first) - first] += 1
        cover[j, min(e, last) - first + 1] -= 1
    on = np.cumsum(cover, axis=1)[:, :n_frames] > 0
    if n_frames > 1:
        change = np.flatnonzero(np.any(on[:, 1:] != on[:, :-1], axis=0)) + 1
    else:
        change = np.zeros(0, dtype=np.int64)
    starts = [0, *change.tolist()]
    ends = [*(change - 1).tolist(), n_frames - 1]
    return [
        Segment(first + s, first + e, frozenset(uniq[j] for j in np.flatnonzero(on[:, s])))
        for s, e in zip(starts, ends)
    ]


def shot_segmentation(
    z,
    records: Sequence[TrackletRecord],
    hyper: HyperParams,
    labels: Labels | None = None,
    n_frames: int | None = None,
) -> ShotReport:
    """Temporal segments from cluster labels, scored against truth-label shots.

    The frame range is ``[0, n_frames - 1]`` when ``n_frames`` is given, else
    the span of the records. A true shot counts as covered when a significant
    segment lies inside it.
    """
    z = _as_labels(z)
    if n_frames is not None:
        first, last = 0, max(n_frames - 1, 0)
    elif records:
        first, last = min(r.start_frame for r in records), max(r.end_frame for r in records)
    else:
        first, last = 0, 0
    spans = [(r.start_frame, r.end_frame) for r in records]
    keep = [i for i in range(len(records)) if z[i] != JUNK]
    segments = frame_segments([spans[i] for i in keep], [int(z[i]) for i in keep], first, last)
    significant = [seg.n_frames >= hyper.min_segment_frames for seg in segments]
    sig = [seg for seg, ok in zip(segments, significant) if ok]
    total = last - first + 1
    frame_cov = sum(seg.n_frames for seg in sig) / total
    true_shots: list[Segment] = []
    shot_cov = 0
    if labels is not None:
        keep_t = [i for i in range(len(records)) if labels[i] not in (None, JUNK_LABEL)]
        true_shots = frame_segments([spans[i] for i in keep_t], [labels[i] for i in keep_t], first, last)
        shot_cov = sum(1 for shot in true_shots if any(shot.start <= s.start and s.end <= shot.end for s in sig))
    return ShotReport(
        segments=segments,
        significant=significant,
        true_shots=true_shots,
        n_significant_segments=len(sig),
        shot_coverage=shot_cov,
        frame_coverage=frame_cov,
        shot_conciseness=_ratio(shot_cov, len(sig)),
        shot_representativeness=_ratio(frame_cov, len(sig)),
    )


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


def evaluate(
    z,
    records: Sequence[TrackletRecord],
    context: SequenceContext,
    hyper: HyperParams,
    labels: Labels | None = None,
    n_frames: int | None = None,
) -> EvalReport:
    """Every metric for one assignment; ``labels`` default to the records' truth labels."""
    z = _as_labels(z)
    if labels is None:
        labels = [r.truth_label for r in records]
    if len(labels) != len(z) or len(records) != len(z):
        raise ValueError("assignment, records and truth lengths differ")
    kept, flagged = significant_clusters(z, labels, hyper)
    purity, entity_cov, tracklet_cov = purity_and_coverage(kept, labels, hyper)
    conc, rep = coverage_ratios(entity_cov, tracklet_cov, len(kept))
    precision, recall_star = outlier_metrics(z, labels)
    link, link_multi = linking_fraction(z, truth_tracks(labels, context, hyper))
    shots = shot_segmentation(z, records, hyper, labels, n_frames)
    return EvalReport(
        significant_clusters=kept,
        flagged_junk_clusters=flagged,
        n_significant_clusters=len(kept),
        purity=purity,
        entity_coverage=entity_cov,
        tracklet_coverage=tracklet_cov,
        outlier_precision=precision,
        outlier_recall_star=recall_star,
        linking_fraction=link,
        linking_fraction_no_singletons=link_multi,
        conciseness=conc,
        representativeness=rep,
        representativeness_x100=None if rep is None else 100.0 * rep,
        n_significant_segments=shots.n_significant_segments,
        shot_coverage=shots.shot_coverage,
        frame_coverage=shots.frame_coverage,
        shot_conciseness=shots.shot_conciseness,
        shot_representativeness=shots.shot_representativeness,
    )


