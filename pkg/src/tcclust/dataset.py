"""Tracklet datasets: detection aggregation, sequence context, and file format.

File layout (see README for the byte-level description)::

    TCCLUST-DATASET 1
    dim 25
    tracklet_length 10
    n_frames 2400
    n_records 2000
    encoding text
    end_header
    0 0 9 312.5 88 - alice 0.125 -1.5 ...

Text records carry ``id start end cx cy dist label f_1 .. f_d`` with ``-`` for
absent optional fields. Binary records are little-endian
``int64 id, int64 start, int64 end, float64 cx, float64 cy, float64 dist,
uint16 label_len, label utf-8 bytes, float32 x d`` with NaN for absent floats.
Feature values are float32 in both encodings.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import HyperParams, SequenceContext, TrackletRecord

MAGIC = "TCCLUST-DATASET 1"
_HEADER_KEYS = ("dim", "tracklet_length", "n_frames", "n_records", "encoding")
_FIXED = struct.Struct("<qqqdddH")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None, record: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if record is not None:
            where.append(f"record id {record}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset
        self.record = record


@dataclass
class Dataset:
    records: list[TrackletRecord]
    dim: int
    tracklet_length: int = 10
    n_frames: int | None = None

    def __post_init__(self) -> None:
        if self.n_frames is None:
            self.n_frames = max((r.end_frame for r in self.records), default=-1) + 1

    @property
    def features(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.dim))
        return np.stack([r.features for r in self.records])

    @property
    def labels(self) -> list[str | None]:
        return [r.truth_label for r in self.records]


def sort_key(r: TrackletRecord) -> tuple[int, int, int]:
    return (r.start_frame, r.end_frame, r.id)


def to_float32(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32, keeping float64 storage."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Detections -> tracklets
# ---------------------------------------------------------------------------


def aggregate_detections(
    detections: Sequence[tuple[int, Sequence[float], np.ndarray]],
    R: int,
    radius_factor: float = 0.5,
) -> list[TrackletRecord]:
    """Link per-frame detections into fixed-length tracklets.

    ``detections`` holds ``(frame, (x, y, w, h), vector)`` tuples sorted by
    frame. A detection continues a chain from the previous frame when its box
    centre lies within ``radius_factor * w`` of the chain's last centre
    (nearest chain first). Each run of ``R`` linked detections becomes one
    tracklet whose features are the mean of the run; leftovers shorter than
    ``R`` are dropped.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    last = -math.inf
    for frame, _, _ in detections:
        if frame < last:
            raise ValueError("detections must be sorted by frame")
        last = frame

    # chain: [last_frame, last_center, width, block (list of (frame, center, vec))]
    open_chains: list[list] = []
    blocks: list[list] = []

    def flush(chain) -> None:
        if len(chain[3]) == R:
            blocks.append(chain[3])
            chain[3] = []

    i = 0
    n = len(detections)
    while i < n:
        frame = detections[i][0]
        j = i
        while j < n and detections[j][0] == frame:
            j += 1
        live = [ch for ch in open_chains if ch[0] == frame - 1]
        taken: set[int] = set()
        new_chains = []
        for frame_d, box, vec in detections[i:j]:
            x, y, w, h = box
            center = np.array([x + w / 2.0, y + h / 2.0])
            best, best_d = None, math.inf
            for idx, ch in enumerate(live):
                if idx in taken:
                    continue
                dist = float(np.hypot(*(center - ch[1])))
                if dist <= radius_factor * ch[2] and dist < best_d:
                    best, best_d = idx, dist
            item = (frame_d, center, np.asarray(vec, dtype=np.float64))
            if best is None:
                ch = [frame_d, center, w, [item]]
                new_chains.append(ch)
            else:
                taken.add(best)
                ch = live[best]
                ch[0], ch[1], ch[2] = frame_d, center, w
                ch[3].append(item)
            flush(ch)
        open_chains = [ch for ch in open_chains if ch[0] == frame] + new_chains
        i = j

    out = []
    for block in blocks:
        feats = np.mean([v for _, _, v in block], axis=0)
        cx, cy = np.mean([c for _, c, _ in block], axis=0)
        out.append(
            TrackletRecord(
                id=0,
                features=feats,
                start_frame=int(block[0][0]),
                end_frame=int(block[-1][0]),
                spatial_center=(float(cx), float(cy)),
            )
        )
    out.sort(key=lambda r: (r.start_frame, r.end_frame, r.spatial_center))
    for idx, r in enumerate(out):
        r.id = idx
    return out


# ---------------------------------------------------------------------------
# Sequence context
# ---------------------------------------------------------------------------


def check_sorted(records: Sequence[TrackletRecord]) -> None:
    for a, b in zip(records, records[1:]):
        if sort_key(b) < sort_key(a):
            raise DatasetError("records not sorted by (start_frame, end_frame, id)", record=b.id)


def predecessor_distance(rec: TrackletRecord, prev: TrackletRecord, pixel_weight: float) -> float:
    if rec.distance is not None:
        return float(rec.distance)
    gap = float(rec.start_frame - prev.end_frame - 1)
    if rec.spatial_center is not None and prev.spatial_center is not None:
        dx = rec.spatial_center[0] - prev.spatial_center[0]
        dy = rec.spatial_center[1] - prev.spatial_center[1]
        gap += pixel_weight * math.hypot(dx, dy)
    return gap


def build_context(records: Sequence[TrackletRecord], hyper: HyperParams) -> SequenceContext:
    """Derive prev/next links, conflict sets and temporal segments.

    ``prev(i)`` is the latest earlier tracklet that ends strictly before ``i``
    starts, so it never overlaps ``i``.
    """
    check_sorted(records)
    n = len(records)
    starts = [r.start_frame for r in records]
    ends = [r.end_frame for r in records]
    prev: list[int | None] = [None] * n
    conflicts: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        j = i + 1
        while j < n and starts[j] <= ends[i]:
            conflicts[i].add(j)
            conflicts[j].add(i)
            j += 1
        j = i - 1
        while j >= 0 and ends[j] >= starts[i]:
            j -= 1
        prev[i] = j if j >= 0 else None

    successors: list[list[int]] = [[] for _ in range(n)]
    for i, p in enumerate(prev):
        if p is not None:
            successors[p].append(i)
    nxt = [s[0] if s else None for s in successors]

    dist = [
        predecessor_distance(records[i], records[p], hyper.pixel_weight) if p is not None else math.inf
        for i, p in enumerate(prev)
    ]

    changepoints = [i for i in range(1, n) if starts[i] - starts[i - 1] > hyper.segment_gap]
    segment_of = []
    s = 0
    cps = set(changepoints)
    for i in range(n):
        if i in cps:
            s += 1
        segment_of.append(s)

    return SequenceContext(
        prev=prev,
        next=nxt,
        successors=[tuple(s) for s in successors],
        conflict_sets=[frozenset(c) for c in conflicts],
        changepoints=changepoints,
        segment_of=segment_of,
        prev_distance=dist,
    )


class StreamingContext:
    """Incremental context for records arriving one at a time in sorted order.

    Only links to already-seen records are available: ``prev``, the conflicting
    earlier records, the predecessor distance and the segment index.
    """

    def __init__(self, hyper: HyperParams):
        self.hyper = hyper
        self._recent: list[tuple[int, TrackletRecord]] = []
        self._last_key: tuple[int, int, int] | None = None
        self._last_start: int | None = None
        self._segment = 0
        self.count = 0

    def push(self, rec: TrackletRecord) -> tuple[int | None, frozenset[int], float, int]:
        key = sort_key(rec)
        if self._last_key is not None and key < self._last_key:
            raise DatasetError("record arrived out of order", record=rec.id)
        if self._last_start is not None and rec.start_frame - self._last_start > self.hyper.segment_gap:
            self._segment += 1
        idx = self.count
        conflicts = frozenset(j for j, r in self._recent if r.end_frame >= rec.start_frame)
        prev = None
        dist = math.inf
        for j, r in reversed(self._recent):
            if r.end_frame < rec.start_frame:
                prev = j
                dist = predecessor_distance(rec, r, self.hyper.pixel_weight)
                break
        self._recent.append((idx, rec))
        # keep what can still overlap a later record, plus the latest candidate predecessor
        latest_done = max((pos for pos, (_, r) in enumerate(self._recent) if r.end_frame < rec.start_frame), default=None)
        self._recent = [
            item
            for pos, item in enumerate(self._recent)
            if item[1].end_frame >= rec.start_frame or pos == latest_done
        ]
        self._last_key = key
        self._last_start = rec.start_frame
        self.count += 1
        return prev, conflicts, dist, self._segment


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _fmt_opt(x: float | None) -> str:
    return "-" if x is None else repr(float(x))


def _check_label(label: str | None, rid: int) -> None:
    if label is not None and (label == "" or label == "-" or any(ch.isspace() for ch in label)):
        raise DatasetError(f"label {label!r} must be non-empty, not '-', and contain no whitespace", record=rid)


def write_dataset(dataset: Dataset, path: str | Path, encoding: str = "text") -> None:
    if encoding not in ("text", "binary"):
        raise ValueError(f"unknown encoding {encoding!r}")
    check_sorted(dataset.records)
    header = [
        MAGIC,
        f"dim {dataset.dim}",
        f"tracklet_length {dataset.tracklet_length}",
        f"n_frames {dataset.n_frames}",
        f"n_records {len(dataset.records)}",
        f"encoding {encoding}",
        "end_header",
    ]
    out = bytearray(("\n".join(header) + "\n").encode("ascii"))
    for r in dataset.records:
        if r.features.shape != (dataset.dim,):
            raise DatasetError(f"expected {dataset.dim} features, got {r.features.shape[0]}", record=r.id)
        _check_label(r.truth_label, r.id)
        feats = np.asarray(r.features, dtype=np.float32)
        cx, cy = r.spatial_center if r.spatial_center is not None else (None, None)
        if encoding == "text":
            fields = [
                str(r.id),
                str(r.start_frame),
                str(r.end_frame),
                _fmt_opt(cx),
                _fmt_opt(cy),
                _fmt_opt(r.distance),
                r.truth_label if r.truth_label is not None else "-",
            ]
            fields.extend("%.9g" % v for v in feats.tolist())
            out += (" ".join(fields) + "\n").encode("utf-8")
        else:
            label = (r.truth_label or "").encode("utf-8")
            nan = float("nan")
            out += _FIXED.pack(
                r.id,
                r.start_frame,
                r.end_frame,
                nan if cx is None else float(cx),
                nan if cy is None else float(cy),
                nan if r.distance is None else float(r.distance),
                len(label),
            )
            out += label
            out += feats.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _parse_header(data: bytes) -> tuple[dict, int]:
    pos = 0
    values: dict = {}
    lines = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise DatasetError("truncated header", line=len(lines) + 1, offset=len(data))
        lines.append(data[pos:nl].decode("ascii", errors="replace"))
        pos = nl + 1
        if lines[-1] == "end_header":
            break
        if len(lines) > 32:
            raise DatasetError("header too long or missing end_header", line=len(lines))
    if lines[0] != MAGIC:
        raise DatasetError(f"bad magic {lines[0]!r}", line=1, offset=0)
    for ln, text in enumerate(lines[1:-1], start=2):
        parts = text.split()
        if len(parts) != 2 or parts[0] not in _HEADER_KEYS:
            raise DatasetError(f"malformed header entry {text!r}", line=ln)
        key, val = parts
        if key == "encoding":
            if val not in ("text", "binary"):
                raise DatasetError(f"unknown encoding {val!r}", line=ln)
            values[key] = val
        else:
            try:
                values[key] = int(val)
            except ValueError:
                raise DatasetError(f"header {key} must be an integer, got {val!r}", line=ln) from None
    missing = [k for k in _HEADER_KEYS if k not in values]
    if missing:
        raise DatasetError(f"header missing {', '.join(missing)}", line=len(lines))
    if values["dim"] < 1:
        raise DatasetError("dim must be >= 1", line=2)
    values["_lines"] = len(lines)
    return values, pos


def _opt(tok: str, line: int) -> float | None:
    if tok == "-":
        return None
    try:
        return float(tok)
    except ValueError:
        raise DatasetError(f"bad number {tok!r}", line=line) from None


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    header, pos = _parse_header(data)
    d, n = header["dim"], header["n_records"]
    records: list[TrackletRecord] = []
    if header["encoding"] == "text":
        if n and not data.endswith(b"\n"):
            raise DatasetError("truncated file: last record is not newline-terminated", offset=len(data))
        try:
            body = data[pos:].decode("utf-8").split("\n")
        except UnicodeDecodeError as exc:
            raise DatasetError("record section is not valid UTF-8", offset=pos + exc.start) from None
        if body and body[-1] == "":
            body.pop()
        first_line = header["_lines"] + 1
        if len(body) != n:
            raise DatasetError(
                f"expected {n} records, found {len(body)}",
                line=first_line + len(body),
                offset=len(data),
            )
        for k, text in enumerate(body):
            line = first_line + k
            toks = text.split(" ")
            if len(toks) < 7:
                raise DatasetError("record too short", line=line)
            try:
                rid, start, end = int(toks[0]), int(toks[1]), int(toks[2])
            except ValueError:
                raise DatasetError("bad integer field", line=line) from None
            if len(toks) - 7 != d:
                raise DatasetError(f"expected {d} features, got {len(toks) - 7}", line=line, record=rid)
            cx, cy, dist = _opt(toks[3], line), _opt(toks[4], line), _opt(toks[5], line)
            label = None if toks[6] == "-" else toks[6]
            try:
                feats = np.array([float(t) for t in toks[7:]], dtype=np.float32)
            except ValueError:
                raise DatasetError("bad feature value", line=line, record=rid) from None
            records.append(_make_record(rid, feats, start, end, cx, cy, dist, label, line=line))
    else:
        for _ in range(n):
            if pos + _FIXED.size > len(data):
                raise DatasetError("truncated record header", offset=pos)
            rid, start, end, cx, cy, dist, llen = _FIXED.unpack_from(data, pos)
            pos += _FIXED.size
            if pos + llen + 4 * d > len(data):
                raise DatasetError("truncated record payload", offset=pos, record=rid)
            label = data[pos : pos + llen].decode("utf-8") if llen else None
            pos += llen
            feats = np.frombuffer(data, dtype="<f4", count=d, offset=pos).copy()
            pos += 4 * d
            records.append(
                _make_record(
                    rid,
                    feats,
                    start,
                    end,
                    None if math.isnan(cx) else cx,
                    None if math.isnan(cy) else cy,
                    None if math.isnan(dist) else dist,
                    label,
                    offset=pos,
                )
            )
        if pos != len(data):
            raise DatasetError(f"{len(data) - pos} trailing bytes after last record", offset=pos)
    for a, b in zip(records, records[1:]):
        if sort_key(b) < sort_key(a):
            raise DatasetError("records not sorted by (start_frame, end_frame, id)", record=b.id)
    if len({r.id for r in records}) != len(records):
        raise DatasetError("duplicate record ids")
    return Dataset(records, d, header["tracklet_length"], header["n_frames"])


def _make_record(rid, feats, start, end, cx, cy, dist, label, line=None, offset=None) -> TrackletRecord:
    if (cx is None) != (cy is None):
        raise DatasetError("spatial centre needs both coordinates", line=line, offset=offset, record=rid)
    try:
        return TrackletRecord(
            id=int(rid),
            features=feats.astype(np.float64),
            start_frame=int(start),
            end_frame=int(end),
            spatial_center=None if cx is None else (cx, cy),
            truth_label=label,
            distance=dist,
        )
    except ValueError as exc:
        raise DatasetError(str(exc), line=line, offset=offset, record=rid) from None
