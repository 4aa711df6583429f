"""Scoring: decode frame probabilities into events, then compute
event-based (collar-matched) and segment-based macro F1."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .corpus import SPLIT_VALIDATION, CorpusManifest, EventAnnotation, \
    clip_spectrogram
from .errors import ConfigError
from .frontend import FrontendConfig
from .model import CLASSIFIER, FramePrediction, SedModel


@dataclass(frozen=True)
class DecodeConfig:
    prob_threshold: float = 0.5
    median_filter_frames: int = 9
    min_event_s: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError(f"prob_threshold must be in (0, 1), "
                              f"got {self.prob_threshold}")
        if self.median_filter_frames < 1 or self.median_filter_frames % 2 == 0:
            raise ConfigError(f"median_filter_frames must be odd and positive, "
                              f"got {self.median_filter_frames}")
        if self.min_event_s < 0:
            raise ConfigError(f"min_event_s must be >= 0, got {self.min_event_s}")


@dataclass(frozen=True)
class EventMatchConfig:
    """Collar rule: onsets must agree within ``onset_collar_s``; offsets
    within max(offset_collar_s, offset_collar_frac * event length). The
    length term uses the longer event of the candidate pair, which keeps the
    compatibility relation symmetric (swapping reference and hypothesis
    fixes TP and swaps FP with FN)."""

    onset_collar_s: float = 0.2
    offset_collar_s: float = 0.2
    offset_collar_frac: float = 0.2

    def __post_init__(self):
        if self.onset_collar_s <= 0 or self.offset_collar_s <= 0:
            raise ConfigError("collars must be positive")
        if self.offset_collar_frac < 0:
            raise ConfigError("offset_collar_frac must be >= 0")

    def offset_collar(self, a: EventAnnotation, b: EventAnnotation) -> float:
        length = max(a.offset_s - a.onset_s, b.offset_s - b.onset_s)
        return max(self.offset_collar_s, self.offset_collar_frac * length)

    def compatible(self, a: EventAnnotation, b: EventAnnotation) -> bool:
        return (abs(a.onset_s - b.onset_s) <= self.onset_collar_s
                and abs(a.offset_s - b.offset_s) <= self.offset_collar(a, b))


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


@dataclass
class PerClassMetrics:
    class_name: str
    event: Counts = field(default_factory=Counts)
    segment: Counts = field(default_factory=Counts)


@dataclass
class MetricsReport:
    per_class: list[PerClassMetrics]
    macro_event_f1: float
    macro_segment_f1: float

    @classmethod
    def from_counts(cls, per_class: list[PerClassMetrics]) -> "MetricsReport":
        if not per_class:
            raise ConfigError("report needs at least one class")
        return cls(
            per_class,
            macro_event_f1=float(np.mean([m.event.f1 for m in per_class])),
            macro_segment_f1=float(np.mean([m.segment.f1 for m in per_class])))

    def to_json_dict(self) -> dict:
        return {
            "per_class": [
                {"class_name": m.class_name,
                 "event": {"TP": m.event.tp, "FP": m.event.fp,
                           "FN": m.event.fn, "F1": m.event.f1},
                 "segment": {"TP": m.segment.tp, "FP": m.segment.fp,
                             "FN": m.segment.fn, "F1": m.segment.f1}}
                for m in self.per_class],
            "macro_event_f1": self.macro_event_f1,
            "macro_segment_f1": self.macro_segment_f1,
        }


def decode(pred: FramePrediction, cfg: DecodeConfig) -> list[EventAnnotation]:
    """Frame probabilities -> events: binarize, median-smooth until stable,
    merge runs, drop events shorter than the minimum duration.

    Running the median filter to its fixed point makes decoding idempotent:
    rasterizing the returned events and decoding again gives the same list."""
    probs = pred.frame_probs
    if probs.ndim != 2:
        raise ConfigError(f"expected (frames, classes) probabilities, "
                          f"got shape {probs.shape}")
    hop = pred.frame_hop_s
    events = []
    for k in range(probs.shape[1]):
        binary = (probs[:, k] >= cfg.prob_threshold).astype(np.int64)
        if cfg.median_filter_frames > 1:
            # iterate to the filter's fixed point (root signal) so that
            # decoding its own output reproduces it exactly
            while True:
                smoothed = median_filter(binary, size=cfg.median_filter_frames,
                                         mode="constant", cval=0)
                if np.array_equal(smoothed, binary):
                    break
                binary = smoothed
        padded = np.concatenate([[0], binary, [0]])
        edges = np.flatnonzero(np.diff(padded))
        for start, stop in zip(edges[::2], edges[1::2]):
            onset = start * hop
            offset = stop * hop
            if offset - onset >= cfg.min_event_s:
                events.append(EventAnnotation(k, onset, offset))
    events.sort(key=lambda e: (e.onset_s, e.class_id))
    return events


def _maximum_matching(adjacency: list[list[int]], n_right: int) -> int:
    """Kuhn's augmenting-path maximum bipartite matching; returns its size.
    Left vertices are tried in order, so onset-sorted input keeps the
    earliest-onset preference among equal-size matchings."""
    match_right = [-1] * n_right

    def try_assign(u: int, visited: list[bool]) -> bool:
        for v in adjacency[u]:
            if visited[v]:
                continue
            visited[v] = True
            if match_right[v] == -1 or try_assign(match_right[v], visited):
                match_right[v] = u
                return True
        return False

    size = 0
    for u in range(len(adjacency)):
        if try_assign(u, [False] * n_right):
            size += 1
    return size


def event_f1(reference: list[EventAnnotation], hypothesis: list[EventAnnotation],
             n_classes: int, cfg: EventMatchConfig | None = None,
             ) -> list[Counts]:
    """Collar-based one-to-one event matching, per class.

    A hypothesis may match a reference of the same class iff the onsets agree
    within the onset collar and the offsets within the reference-length
    collar rule. Matching is maximum-cardinality (greedy in onset order with
    augmenting-path repair), so the counts equal the optimal assignment."""
    cfg = cfg or EventMatchConfig()
    out = [Counts() for _ in range(n_classes)]
    for k in range(n_classes):
        refs = sorted((e for e in reference if e.class_id == k),
                      key=lambda e: e.onset_s)
        hyps = sorted((e for e in hypothesis if e.class_id == k),
                      key=lambda e: e.onset_s)
        adjacency = [[j for j, r in enumerate(refs) if cfg.compatible(h, r)]
                     for h in hyps]
        tp = _maximum_matching(adjacency, len(refs))
        out[k] = Counts(tp=tp, fp=len(hyps) - tp, fn=len(refs) - tp)
    return out


def _active_segments(events, k, segment_len_s):
    active = set()
    for e in events:
        if e.class_id != k:
            continue
        first = int(np.floor(e.onset_s / segment_len_s))
        last = int(np.ceil(e.offset_s / segment_len_s))
        for seg in range(first, last):
            # any overlap with [seg, seg+1) activates the segment
            if e.onset_s < (seg + 1) * segment_len_s and \
                    e.offset_s > seg * segment_len_s:
                active.add(seg)
    return active


def segment_f1(reference: list[EventAnnotation],
               hypothesis: list[EventAnnotation], n_classes: int,
               segment_len_s: float = 1.0) -> list[Counts]:
    """Fixed-length segment activity comparison, per class."""
    if segment_len_s <= 0:
        raise ConfigError(f"segment_len_s must be positive, got {segment_len_s}")
    out = []
    for k in range(n_classes):
        ref_active = _active_segments(reference, k, segment_len_s)
        hyp_active = _active_segments(hypothesis, k, segment_len_s)
        out.append(Counts(tp=len(ref_active & hyp_active),
                          fp=len(hyp_active - ref_active),
                          fn=len(ref_active - hyp_active)))
    return out


def score_clips(pairs, n_classes: int, match_cfg: EventMatchConfig | None = None,
                class_names: list[str] | None = None,
                segment_len_s: float = 1.0) -> MetricsReport:
    """Accumulate (reference, hypothesis) event lists over clips into a report."""
    names = class_names or [f"class_{k}" for k in range(n_classes)]
    per_class = [PerClassMetrics(names[k]) for k in range(n_classes)]
    for reference, hypothesis in pairs:
        for k, c in enumerate(event_f1(reference, hypothesis, n_classes,
                                       match_cfg)):
            per_class[k].event.add(c)
        for k, c in enumerate(segment_f1(reference, hypothesis, n_classes,
                                         segment_len_s)):
            per_class[k].segment.add(c)
    return MetricsReport.from_counts(per_class)


def evaluate_run(model: SedModel, manifest: CorpusManifest,
                 frontend_cfg: FrontendConfig,
                 decode_cfg: DecodeConfig | None = None,
                 match_cfg: EventMatchConfig | None = None,
                 split: str = SPLIT_VALIDATION,
                 cache_dir: str | Path | None = None,
                 head: str = CLASSIFIER,
                 ) -> tuple[MetricsReport, list[tuple[str, EventAnnotation]]]:
    """Predict, decode, and score every strongly labeled clip in ``split``.

    Returns the report and the decoded events as (clip_id, event) rows."""
    decode_cfg = decode_cfg or DecodeConfig()
    clips = manifest.split(split)
    if not clips:
        raise ConfigError(f"split {split!r} is empty")
    pairs = []
    decoded_rows = []
    for clip in clips:
        if not clip.events:
            raise ConfigError(f"clip {clip.id} in split {split!r} has no "
                              f"strong labels to score against")
        spec = clip_spectrogram(manifest, clip, frontend_cfg, cache_dir)
        pred = model.predict(spec.frames.astype(np.float32), spec.frame_hop_s,
                             head)
        hypothesis = decode(pred, decode_cfg)
        pairs.append((clip.events, hypothesis))
        decoded_rows.extend((clip.id, e) for e in hypothesis)
    report = score_clips(pairs, manifest.n_classes, match_cfg,
                         manifest.class_names)
    return report, decoded_rows


# ---------------------------------------------------------------------------
# interchange and presentation
# ---------------------------------------------------------------------------

def format_events_tsv(rows: list[tuple[str, EventAnnotation]],
                      class_names: list[str]) -> str:
    """Tab-separated {clip_id, onset, offset, class_name}, one event per line."""
    return "".join(f"{clip_id}\t{e.onset_s:.6f}\t{e.offset_s:.6f}\t"
                   f"{class_names[e.class_id]}\n" for clip_id, e in rows)


def write_events_tsv(path: str | Path,
                     rows: list[tuple[str, EventAnnotation]],
                     class_names: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write(format_events_tsv(rows, class_names))


def read_events_tsv(path: str | Path, class_names: list[str],
                    ) -> dict[str, list[EventAnnotation]]:
    name_to_id = {name: k for k, name in enumerate(class_names)}
    by_clip: dict[str, list[EventAnnotation]] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[3] not in name_to_id:
                raise ConfigError(f"bad events TSV line {line_no}: {line!r}")
            by_clip.setdefault(parts[0], []).append(
                EventAnnotation(name_to_id[parts[3]], float(parts[1]),
                                float(parts[2])))
    for events in by_clip.values():
        events.sort(key=lambda e: (e.onset_s, e.class_id))
    return by_clip


def format_report_table(report: MetricsReport) -> str:
    """Two aligned metric columns (event-based and segment-based F1, %)."""
    name_w = max(len("class"), len("macro"),
                 *(len(m.class_name) for m in report.per_class))
    header = f"{'class':<{name_w}}  {'event_f1':>9}  {'segment_f1':>10}"
    lines = [header, "-" * len(header)]
    for m in report.per_class:
        lines.append(f"{m.class_name:<{name_w}}  {100 * m.event.f1:>8.1f}%"
                     f"  {100 * m.segment.f1:>9.1f}%")
    lines.append("-" * len(header))
    lines.append(f"{'macro':<{name_w}}  {100 * report.macro_event_f1:>8.1f}%"
                 f"  {100 * report.macro_segment_f1:>9.1f}%")
    return "\n".join(lines)


def write_report(out_dir: str | Path, report: MetricsReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(report.to_json_dict(), indent=2) + "\n")
    (out / "metrics.txt").write_text(format_report_table(report) + "\n")
