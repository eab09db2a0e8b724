"""Grounding losses, Recall@K / mIoU metrics and view-stratified reports.

IoUs are computed in exact rational arithmetic on the float inputs and
rounded once, so thresholds compare exactly (IoU >= theta, closed, with theta
read as its shortest decimal form) and means do not depend on keystep order.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .calib_io import ScoredSpan
from .distill.train import alignment_stats
from .errors import ContractError, ValidationError
from .ranking import RankingTimeline, rank_frequencies

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)
DURATION_FLOOR = 1e-6
BUCKETS = ("B", "M", "W")
OTHER = "O"


# ---------------------------------------------------------------------------
# spans


def _span(a) -> tuple[float, float]:
    if isinstance(a, ScoredSpan):
        s, e = a.start, a.end
    else:
        s, e = a
    s, e = float(s), float(e)
    if not (math.isfinite(s) and math.isfinite(e)):
        raise ContractError(f"span [{s}, {e}] is not finite")
    if s > e:
        raise ContractError(f"span start {s} > end {e}")
    return s, e


def _iou_exact(a, b) -> Fraction:
    (s1, e1), (s2, e2) = _span(a), _span(b)
    s1, e1, s2, e2 = (Fraction(x) for x in (s1, e1, s2, e2))
    inter = max(Fraction(0), min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0 else Fraction(0)


def span_iou(a, b) -> float:
    """``|a ∩ b| / |a ∪ b|`` for closed intervals; 0 when the union is empty."""
    return float(_iou_exact(a, b))


@dataclass(frozen=True)
class SpanPrediction:
    """Predicted span relative to a chunk: center and duration in [0, 1]."""

    keystep_id: str
    center: float
    duration: float

    def __post_init__(self):
        for name in ("center", "duration"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")

    def to_span(self, T: float) -> tuple[float, float]:
        """Absolute span ``[(c - d/2) T, (c + d/2) T]`` clamped to ``[0, T]``."""
        d = max(self.duration, DURATION_FLOOR)
        return max((self.center - d / 2) * T, 0.0), min((self.center + d / 2) * T, T)

    @classmethod
    def from_span(cls, keystep_id: str, start: float, end: float, T: float) -> "SpanPrediction":
        return cls(keystep_id, (start + end) / (2 * T), (end - start) / T)


@dataclass(frozen=True)
class GroundingWeights:
    lambda_c: float = 1.0
    lambda_d: float = 1.0
    lambda_iou: float = 1.0
    lambda_infonce: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValidationError(f"{k} must be non-negative, got {v}")


# ---------------------------------------------------------------------------
# losses


def iou_loss(pred: SpanPrediction, gt, T: float) -> tuple[float, float, float]:
    """``(1 - IoU, dL/dc, dL/dd)`` for a relative prediction against an absolute span.

    Clamps pass gradient on their interior side only. When the spans are
    disjoint the loss is 1 but the gradient comes from the signed overlap,
    so it still pulls the prediction toward the ground truth.
    """
    if not T > 0:
        raise ContractError(f"chunk length must be positive, got {T}")
    gs, ge = _span(gt)
    c, d_raw = pred.center, pred.duration
    d = max(d_raw, DURATION_FLOOR)
    s_raw, e_raw = (c - d / 2) * T, (c + d / 2) * T
    s, e = max(s_raw, 0.0), min(e_raw, T)
    ds_on, de_on, dd_on = float(s_raw >= 0), float(e_raw <= T), float(d_raw >= DURATION_FLOOR)

    L, G = e - s, ge - gs
    lo, hi = max(s, gs), min(e, ge)
    o = hi - lo
    U = L + G - o
    inter = max(o, 0.0)
    loss = 1.0 - inter / (L + G - inter)  # L > 0 thanks to the duration floor

    d_io = (L + G) / (U * U)  # dIoU/d overlap
    d_iL = -o / (U * U)  # dIoU/d length
    d_e = d_io * (e <= ge) + d_iL
    d_s = -d_io * (s >= gs) - d_iL
    dc = T * (d_e * de_on + d_s * ds_on)
    dd = 0.5 * T * dd_on * (d_e * de_on - d_s * ds_on)
    return loss, -dc, -dd


def relative_target(gt, T: float) -> tuple[float, float]:
    s, e = _span(gt)
    return (s + e) / (2 * T), (e - s) / T


def grounding_loss(
    preds: Sequence[SpanPrediction],
    gts: Mapping[str, tuple],
    weights: GroundingWeights = GroundingWeights(),
    T: float = 1.0,
) -> float:
    """Mean over keysteps of ``λc|ĉ-c| + λd|d̂-d| + λiou (1 - IoU)``."""
    if not preds:
        raise ContractError("grounding loss needs at least one prediction")
    ids = [p.keystep_id for p in preds]
    if len(set(ids)) != len(ids) or set(ids) != set(gts):
        raise ContractError("predictions and ground truth disagree on keystep ids")
    total = 0.0
    for p in preds:
        c, d = relative_target(gts[p.keystep_id], T)
        term = weights.lambda_c * abs(p.center - c) + weights.lambda_d * abs(p.duration - d)
        if weights.lambda_iou:
            term += weights.lambda_iou * iou_loss(p, gts[p.keystep_id], T)[0]
        total += term
    return total / len(preds)


def combined_loss(l_ground: float, l_infonce: float, weights: GroundingWeights = GroundingWeights()) -> float:
    for name, v in (("grounding", l_ground), ("InfoNCE", l_infonce)):
        if not (math.isfinite(v) and v >= 0):
            raise ContractError(f"{name} loss must be finite and non-negative, got {v}")
    return l_ground + weights.lambda_infonce * l_infonce


# ---------------------------------------------------------------------------
# metrics


def ranked(spans: Sequence) -> list:
    """Highest confidence first; without confidences (or on ties) listing order wins."""
    spans = list(spans)
    if spans and all(isinstance(s, ScoredSpan) and s.confidence is not None for s in spans):
        return sorted(spans, key=lambda s: -s.confidence)
    return spans


def _check_ids(preds: Mapping, gts: Mapping) -> None:
    if not gts:
        raise ContractError("no ground-truth keysteps")
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise ContractError(f"keystep ids differ: missing predictions {missing}, unknown ids {extra}")
    empty = sorted(k for k in gts if not len(preds[k]))
    if empty:
        raise ContractError(f"keysteps without predictions: {empty}")


def best_ious(preds: Mapping[str, Sequence], gts: Mapping[str, tuple], k: int = 1) -> dict[str, Fraction]:
    """Per keystep, the best exact IoU among its top-``k`` predictions."""
    if k < 1:
        raise ContractError(f"K must be at least 1, got {k}")
    _check_ids(preds, gts)
    return {kid: max(_iou_exact(p, gts[kid]) for p in ranked(preds[kid])[:k]) for kid in gts}


def _threshold(theta: float) -> Fraction:
    """The threshold as written in decimal, so ``0.4`` means exactly 2/5."""
    return Fraction(repr(float(theta)))


def _recall(ious: Sequence[Fraction], theta: float) -> float:
    th = _threshold(theta)
    return float(Fraction(sum(1 for x in ious if x >= th), len(ious)))


def _mean(ious: Sequence[Fraction]) -> float:
    return float(sum(ious, Fraction(0)) / len(ious))


def recall_at_k(preds: Mapping[str, Sequence], gts: Mapping[str, tuple], theta: float, k: int = 1) -> float:
    """Fraction of keysteps whose top-``k`` predictions hold one with IoU >= ``theta``."""
    return _recall(list(best_ious(preds, gts, k).values()), theta)


def miou(preds: Mapping[str, Sequence], gts: Mapping[str, tuple]) -> float:
    """Mean IoU of the top-1 prediction per keystep."""
    return _mean(list(best_ious(preds, gts, 1).values()))


# ---------------------------------------------------------------------------
# view stratification


def assign_buckets(timeline: RankingTimeline) -> dict[str, int]:
    """Best, middle and worst exo view of one take from rank frequencies.

    B is the view most often ranked first among the exo views, W the view
    (other than B) most often last, M the view (other than B and W) most often
    at the median exo position. Ties go to the lower view id. M is absent
    with fewer than three exo views, W with fewer than two.
    """
    if not timeline:
        raise ContractError("empty ranking timeline")
    counts = rank_frequencies(timeline)
    exo = sorted(timeline[0].order[1:])
    n = len(exo)
    if n == 0:
        raise ContractError("ranking has no exo views")

    def most(pos: int, pool) -> int:
        return min(pool, key=lambda v: (-counts[v][pos], v))

    out = {"B": most(1, exo)}
    if n >= 2:
        out["W"] = most(n, [v for v in exo if v != out["B"]])
    if n >= 3:
        out["M"] = most((n + 1) // 2, [v for v in exo if v not in (out["B"], out["W"])])
    return out


@dataclass(frozen=True)
class ViewResult:
    """Grounding output of one view of one take."""

    take_id: str
    view_id: int
    predictions: Mapping[str, Sequence]
    ground_truth: Mapping[str, tuple]


def stratify_by_view(
    timelines: Mapping[str, RankingTimeline], results: Sequence[ViewResult]
) -> tuple[dict[str, list], list[str]]:
    """Group results into B/M/W buckets, plus ``O`` for every other view.

    Returns ``(buckets, notes)``; notes record takes where a bucket is empty.
    """
    buckets: dict[str, list] = {b: [] for b in (*BUCKETS, OTHER)}
    notes = []
    assignment = {}
    for take_id in sorted(timelines):
        a = assign_buckets(timelines[take_id])
        for b in BUCKETS:
            if b not in a:
                notes.append(f"take {take_id}: {len(timelines[take_id][0].order) - 1} exo views, no {b} bucket")
        assignment[take_id] = {v: b for b, v in a.items()}
    for r in results:
        if r.take_id not in assignment:
            raise ContractError(f"no rankings for take {r.take_id}")
        buckets[assignment[r.take_id].get(r.view_id, OTHER)].append(r)
    return buckets, notes


@dataclass
class BucketMetrics:
    n_keysteps: int
    recall: dict
    miou: float


@dataclass
class EvalReport:
    thresholds: tuple
    k: int
    overall: BucketMetrics
    buckets: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def recall(self) -> dict:
        return self.overall.recall

    @property
    def miou(self) -> float:
        return self.overall.miou

    def to_dict(self) -> dict:
        def m(b: BucketMetrics):
            return {
                "n_keysteps": b.n_keysteps,
                "recall": {repr(float(t)): v for t, v in b.recall.items()},
                "miou": b.miou,
            }

        return {
            "thresholds": [float(t) for t in self.thresholds],
            "k": self.k,
            "all": m(self.overall),
            "buckets": {name: m(b) for name, b in self.buckets.items()},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bucket,theta,recall,miou,n_keysteps\n")
        rows = [("all", self.overall), *self.buckets.items()]
        for name, b in rows:
            for t in self.thresholds:
                buf.write(f"{name},{float(t)!r},{b.recall[t]!r},{b.miou!r},{b.n_keysteps}\n")
        return buf.getvalue()


def _metrics(results: Sequence[ViewResult], thresholds, k: int) -> BucketMetrics:
    top_k, top_1 = [], []
    for r in results:
        top_k += best_ious(r.predictions, r.ground_truth, k).values()
        top_1 += best_ious(r.predictions, r.ground_truth, 1).values()
    return BucketMetrics(len(top_k), {t: _recall(top_k, t) for t in thresholds}, _mean(top_1))


def evaluate(
    results: Sequence[ViewResult],
    timelines: Mapping[str, RankingTimeline] | None = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    k: int = 1,
) -> EvalReport:
    """Recall@K at each threshold and mIoU, overall and per view bucket when rankings are given."""
    thresholds = tuple(sorted(float(t) for t in thresholds))
    if not thresholds or any(not (0.0 < t <= 1.0) for t in thresholds):
        raise ContractError(f"thresholds must lie in (0, 1], got {thresholds}")
    if not results:
        raise ContractError("nothing to evaluate")
    report = EvalReport(thresholds, k, _metrics(results, thresholds, k))
    if timelines is not None:
        groups, report.notes = stratify_by_view(timelines, results)
        report.buckets = {b: _metrics(rs, thresholds, k) for b, rs in groups.items() if rs}
    return report


# ---------------------------------------------------------------------------
# feature alignment by view quality


def alignment_report(takes, timelines, head, gamma: float = 0.1, seed: int = 0) -> dict[str, tuple[float, float]]:
    """``{stratum: (avg neg cosine, mean InfoNCE)}`` over exo anchors, with the
    synchronous ego feature as positive. Strata are B/M/W per take, ``O`` for
    the remaining exo views and ``all`` for everything."""
    records = alignment_stats(head, takes, timelines, gamma, seed)
    bucket_of = [{v: b for b, v in assign_buckets(tl).items()} for tl in timelines]
    groups: dict[str, list] = {"all": records}
    for r in records:
        groups.setdefault(bucket_of[r.take_idx].get(r.view_id, OTHER), []).append(r)
    out = {}
    for name in ("all", *BUCKETS, OTHER):
        rs = groups.get(name)
        if not rs:
            continue
        negs = [c for r in rs for c in r.neg_cosines]
        out[name] = (
            float(np.mean(negs)) if negs else float("nan"),
            float(np.mean([r.infonce for r in rs])),
        )
    return out
