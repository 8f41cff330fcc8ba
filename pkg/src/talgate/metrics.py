"""Localization quality and language-bias diagnostics.

Average precision uses greedy one-to-one matching in descending score
order (ties broken by video id, start, end) at a fixed temporal IoU
threshold, and all-points interpolation (the precision envelope).  Classes
with no ground truth are excluded from means and logged.

Bias diagnostics: the language-attribution performance drop (lap), output
degeneracy rates (hallucination_rates), the mean gate per difficulty
bucket (mla), and a no-action ambiguity probe (mconf / mlen / acc_at).
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import jsonschema

from .errors import ConfigError, FormatError
from .model import (ModelState, Proposal, _proposal_order, predict_corpus,
                    predict_video, tiou)
from .synthgen import Corpus, Segment

log = logging.getLogger(__name__)

DEFAULT_TIOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
PROBE_SPAN_THRESHOLDS = (0.3, 0.5, 0.7)
HALLUCINATION_TOP_K = 10
_NEAR_DUPLICATE_TIOU = 0.95


def average_precision(proposals: dict[str, list[Proposal]], gt: dict[str, list[Segment]],
                      label: int, threshold: float) -> float | None:
    """All-points interpolated AP for one class at one tIoU threshold.

    Returns None when the class has no ground-truth segments.
    """
    gts = {vid: [s for s in segs if s.label == label] for vid, segs in gt.items()}
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None
    entries = []
    for vid in sorted(proposals):
        for p in proposals[vid]:
            if p.label == label:
                entries.append((p, vid))
    entries.sort(key=lambda t: (-t[0].score, t[1], t[0].start, t[0].end))
    matched = {vid: [False] * len(segs) for vid, segs in gts.items()}
    tp = np.zeros(len(entries))
    fp = np.zeros(len(entries))
    for i, (p, vid) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts.get(vid, [])):
            if matched[vid][j]:
                continue
            v = tiou(p, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= threshold:
            matched[vid][best_j] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    tpc = np.cumsum(tp)
    fpc = np.cumsum(fp)
    recall = tpc / npos
    precision = tpc / np.maximum(tpc + fpc, 1.0)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at(proposals: dict[str, list[Proposal]], gt: dict[str, list[Segment]],
           thresholds=DEFAULT_TIOU_THRESHOLDS) -> tuple[dict[float, float], float]:
    """Mean AP per threshold plus the average over thresholds."""
    if not thresholds:
        raise ConfigError("map_at needs at least one tIoU threshold")
    classes = sorted({s.label for segs in gt.values() for s in segs})
    if not classes:
        raise ConfigError("map_at needs ground truth for at least one class")
    orphaned = sorted({p.label for ps in proposals.values() for p in ps} - set(classes))
    for c in orphaned:
        log.info("class %d has proposals but no ground truth; excluded from mAP", c)
    per_threshold = {}
    for t in thresholds:
        aps = [average_precision(proposals, gt, c, t) for c in classes]
        per_threshold[float(t)] = float(np.mean([a for a in aps if a is not None]))
    return per_threshold, float(np.mean(list(per_threshold.values())))


def lap(state: ModelState, aligned: Corpus, conflicted: Corpus,
        thresholds=DEFAULT_TIOU_THRESHOLDS, relative: bool = False) -> float:
    """Performance drop under conflicting language, in mAP percentage points.

    With ``relative=True`` the drop is instead expressed as a percentage of
    the aligned-corpus mAP (0 when that is 0).
    """
    if len(aligned.videos) != len(conflicted.videos):
        raise ConfigError(f"corpus size mismatch: {len(aligned.videos)} aligned vs {len(conflicted.videos)} conflicted videos")
    gt_a = {v.id: v.gt for v in aligned.videos}
    gt_c = {v.id: v.gt for v in conflicted.videos}
    _, map_aligned = map_at(predict_corpus(state, aligned), gt_a, thresholds)
    _, map_conflicted = map_at(predict_corpus(state, conflicted), gt_c, thresholds)
    if relative:
        return 100.0 * (map_aligned - map_conflicted) / map_aligned if map_aligned > 0 else 0.0
    return 100.0 * (map_aligned - map_conflicted)


def _top_k(props: list[Proposal], k: int) -> list[Proposal]:
    return sorted(props, key=_proposal_order)[:k]


def hallucination_rates(per_video_proposals, top_k: int = HALLUCINATION_TOP_K) -> tuple[float, float]:
    """Degenerate-output rates over per-video top-k proposal lists.

    fixed_rate: fraction of videos whose rounded top-k boundary multiset is
    shared by at least half the corpus (group of identical outputs of size
    >= max(2, ceil(n/2)), counting the video itself).

    infinite_rate: fraction of videos holding >= 3 same-class proposals
    that pairwise overlap with tIoU > 0.95.
    """
    lists = list(per_video_proposals.values()) if isinstance(per_video_proposals, dict) \
        else list(per_video_proposals)
    n = len(lists)
    if n == 0:
        return 0.0, 0.0
    keys = []
    for props in lists:
        top = _top_k(props, top_k)
        keys.append(tuple(sorted((int(round(p.start)), int(round(p.end))) for p in top)))
    counts = Counter(keys)
    need = max(2, math.ceil(n / 2))
    fixed = sum(1 for k in keys if counts[k] >= need) / n

    degenerate = 0
    for props in lists:
        top = _top_k(props, top_k)
        by_label: dict[int, list[Proposal]] = {}
        for p in top:
            by_label.setdefault(p.label, []).append(p)
        found = False
        for group in by_label.values():
            if len(group) < 3:
                continue
            for trio in combinations(group, 3):
                if all(tiou(a, b) > _NEAR_DUPLICATE_TIOU for a, b in combinations(trio, 2)):
                    found = True
                    break
            if found:
                break
        degenerate += found
    return float(fixed), float(degenerate / n)


def mla(frame_lambdas, bucket, gt, frames: str = "positive") -> float:
    """Mean gate value for a difficulty bucket.

    ``frame_lambdas`` and ``gt`` are parallel per-video sequences.  The
    default averages lambda over frames inside ground-truth segments whose
    class is in the bucket; ``frames="all"`` instead averages over every
    frame of videos containing at least one bucket-class segment.
    """
    bucket = set(bucket)
    if not bucket:
        raise ConfigError("mla of an empty difficulty bucket")
    if frames not in ("positive", "all"):
        raise ConfigError(f"frames must be 'positive' or 'all', got {frames!r}")
    if len(frame_lambdas) != len(gt):
        raise ConfigError(f"got {len(frame_lambdas)} lambda tracks for {len(gt)} videos")
    values: list[float] = []
    for lam, segs in zip(frame_lambdas, gt):
        lam = np.asarray(lam, dtype=np.float64).reshape(-1)
        if frames == "all":
            if any(s.label in bucket for s in segs):
                values.extend(lam.tolist())
        else:
            for seg in segs:
                if seg.label in bucket:
                    values.extend(lam[int(seg.start):int(seg.end)].tolist())
    return float(np.mean(values)) if values else 0.0


@dataclass(frozen=True)
class DifficultyBuckets:
    hard: tuple[int, ...]
    medium: tuple[int, ...]
    easy: tuple[int, ...]


def difficulty_buckets(vision_only_ap: dict[int, float]) -> DifficultyBuckets:
    """Tertile split of classes by vision-only AP; ties break by class index.

    The bottom tertile is hard, the top easy.  With fewer than 3 classes
    everything is medium.
    """
    items = sorted(vision_only_ap.items(), key=lambda kv: (kv[1], kv[0]))
    c = len(items)
    if c < 3:
        return DifficultyBuckets((), tuple(sorted(vision_only_ap)), ())
    n = c // 3
    hard = tuple(sorted(cl for cl, _ in items[:n]))
    easy = tuple(sorted(cl for cl, _ in items[c - n:]))
    medium = tuple(sorted(cl for cl, _ in items[n:c - n]))
    return DifficultyBuckets(hard, medium, easy)


@dataclass(frozen=True)
class ProbeStats:
    mconf: float
    mlen: float
    acc_at: dict[float, float]


def ambiguity_probe(state: ModelState, clips, span_thresholds=PROBE_SPAN_THRESHOLDS) -> ProbeStats:
    """Overconfidence probe on no-action clips.

    Keeps only the highest-confidence proposal per clip; a clip with no
    proposals counts as confidence 0 and span 0.  acc_at[t] is the fraction
    of clips whose kept (normalized) span stays below t.
    """
    videos = clips.videos if isinstance(clips, Corpus) else list(clips)
    if not videos:
        raise ConfigError("ambiguity probe needs at least one clip")
    confs, spans = [], []
    for v in videos:
        props = predict_video(state, v)
        frames = v.vis.shape[0]
        if props:
            top = props[0]
            confs.append(float(top.score))
            spans.append(float(top.end - top.start) / frames)
        else:
            log.info("probe clip %s produced no proposals; counted as confidence 0, span 0", v.id)
            confs.append(0.0)
            spans.append(0.0)
    acc = {float(t): float(np.mean([s < t for s in spans])) for t in span_thresholds}
    return ProbeStats(float(np.mean(confs)), float(np.mean(spans)), acc)


_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_OPT_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["map_per_threshold", "map_avg", "lap", "fixed_rate",
                 "infinite_rate", "mla_per_bucket", "mconf", "mlen", "acc_at"],
    "properties": {
        "map_per_threshold": {
            "type": "object",
            "additionalProperties": False,
            "patternProperties": {r"^0\.\d{2}$": _RATE},
        },
        "map_avg": _RATE,
        "lap": {"type": ["number", "null"]},
        "fixed_rate": _RATE,
        "infinite_rate": _RATE,
        "mla_per_bucket": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {"hard": _RATE, "medium": _RATE, "easy": _RATE},
        },
        "mconf": _OPT_RATE,
        "mlen": _OPT_RATE,
        "acc_at": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "patternProperties": {r"^0\.\d{2}$": _RATE},
        },
    },
}


def canonical_json(value) -> str:
    """Deterministic JSON text: sorted keys, floats with 6 decimals."""
    def render(v, depth):
        pad = "  " * depth
        inner = "  " * (depth + 1)
        if v is None:
            return "null"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            if not math.isfinite(v):
                raise FormatError(f"non-finite value {v} in report")
            return f"{float(v):.6f}"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, dict):
            if not v:
                return "{}"
            keys = sorted(v)
            if any(not isinstance(k, str) for k in keys):
                raise FormatError("canonical JSON requires string keys")
            parts = [f"{inner}{json.dumps(k)}: {render(v[k], depth + 1)}" for k in keys]
            return "{\n" + ",\n".join(parts) + f"\n{pad}}}"
        if isinstance(v, (list, tuple)):
            if not v:
                return "[]"
            parts = [f"{inner}{render(x, depth + 1)}" for x in v]
            return "[\n" + ",\n".join(parts) + f"\n{pad}]"
        raise FormatError(f"cannot serialize {type(v).__name__} in report")
    return render(value, 0) + "\n"


@dataclass(eq=False)
class MetricsReport:
    map_per_threshold: dict[float, float]
    map_avg: float
    fixed_rate: float
    infinite_rate: float
    lap: float | None = None
    mla_per_bucket: dict[str, float] | None = None
    mconf: float | None = None
    mlen: float | None = None
    acc_at: dict[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "map_per_threshold": {f"{t:.2f}": v for t, v in self.map_per_threshold.items()},
            "map_avg": self.map_avg,
            "lap": self.lap,
            "fixed_rate": self.fixed_rate,
            "infinite_rate": self.infinite_rate,
            "mla_per_bucket": dict(self.mla_per_bucket) if self.mla_per_bucket is not None else None,
            "mconf": self.mconf,
            "mlen": self.mlen,
            "acc_at": {f"{t:.2f}": v for t, v in self.acc_at.items()} if self.acc_at is not None else None,
        }

    def to_json(self) -> str:
        payload = self.to_dict()
        validate_report(payload)
        return canonical_json(payload)


def validate_report(payload: dict) -> dict:
    try:
        jsonschema.validate(payload, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"metrics report violates schema: {exc.message}") from exc
    return payload
