"""Curriculum-scheduled cross-view distillation of a projection head."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..calib_io import Take
from ..curriculum import CurriculumSchedule, phase_at, positive_rank
from ..errors import ConfigurationError, DegenerateInputError, NumericError, SamplingError, ValidationError
from ..ranking import RankingTimeline
from .head import ProjectionHead
from .losses import NORM_FLOOR, info_nce_batched
from .targets import draw_second, negative_keystep_seconds, same_view_negative

log = logging.getLogger(__name__)

_INIT_STREAM = 0x5EED
_EVAL_STREAM = 0xE7A1

CSV_HEADER = "epoch,phase,mean_infonce,avg_neg_cosine,avg_pos_cosine"


@dataclass(frozen=True)
class DistillConfig:
    gamma: float = 0.1
    lambda_infonce: float = 1.0
    seed: int = 0
    head_dims: tuple | None = None
    learning_rate: float = 0.1
    epochs: int = 200

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")

    def dims_for(self, feature_dim: int) -> tuple:
        if self.head_dims is None:
            return (feature_dim, feature_dim, feature_dim)
        dims = tuple(int(d) for d in self.head_dims)
        if dims[0] != feature_dim:
            dims = (feature_dim, *dims)
        return dims


@dataclass
class EpochMetrics:
    epoch: int
    phase: int
    train_infonce: float
    mean_infonce: float
    avg_neg_cosine: float
    avg_pos_cosine: float


@dataclass
class DistillResult:
    head: ProjectionHead
    metrics: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(metrics: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for m in metrics:
        buf.write(f"{m.epoch},{m.phase},{m.mean_infonce!r},{m.avg_neg_cosine!r},{m.avg_pos_cosine!r}\n")
    return buf.getvalue()


def epoch_rng(seed: int, epoch: int, take_idx: int, view_id: int) -> np.random.Generator:
    """Independent stream per (epoch, take, view), so work can be split without changing results."""
    return np.random.default_rng([seed, epoch, take_idx, view_id])


# ---------------------------------------------------------------------------
# anchor layout


@dataclass
class _TakeIndex:
    """Flat feature table of one take plus the per-anchor candidate seconds for
    same-view negatives (these depend only on raw features and keysteps)."""

    take: Take
    timeline: RankingTimeline
    table: np.ndarray
    offsets: dict
    neg_seconds: dict

    @classmethod
    def build(cls, take: Take, timeline: RankingTimeline) -> "_TakeIndex":
        if len(timeline) != take.duration_s:
            raise ValidationError(
                f"take {take.take_id}: {len(timeline)} rankings for {take.duration_s} seconds"
            )
        views = take.view_ids
        for r in timeline:
            if sorted(r.order) != sorted(views):
                raise ValidationError(f"take {take.take_id}: ranking at t={r.timestamp} covers other views")
        table = np.concatenate([take.streams[v].features for v in views])
        if np.any(np.linalg.norm(table, axis=1) < NORM_FLOOR):
            raise DegenerateInputError(f"take {take.take_id}: zero-norm feature rows")
        T = take.duration_s
        offsets = {v: i * T for i, v in enumerate(views)}
        neg_seconds = {}
        for v in views:
            feats = take.streams[v].features
            for t in range(T):
                neg_seconds[v, t] = negative_keystep_seconds(feats[t], t, take.keysteps, T)
        return cls(take, timeline, table, offsets, neg_seconds)

    def row(self, view: int, t: int) -> int:
        return self.offsets[view] + t


def _epoch_layout(idx: _TakeIndex, phase: int, rng_for) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices into ``idx.table``: anchors (n,), positives (n, 1), negatives (n, 2) with -1 padding.

    Mirrors ``select_targets`` exactly, anchor by anchor.
    """
    take = idx.take
    T = take.duration_s
    anchors, pos, neg = [], [], []
    for v in take.view_ids:
        rng = rng_for(v)
        for t in range(T):
            order = idx.timeline[t].order
            r = order.index(v)
            pv = order[positive_rank(r, phase, len(order))]
            worst = order[-1]
            negs = [idx.row(worst, t)] if worst not in (v, pv) else []
            cand = idx.neg_seconds[v, t]
            if cand is not None:
                negs.append(idx.row(v, draw_second(cand, rng)))
            anchors.append(idx.row(v, t))
            pos.append([idx.row(pv, t)])
            neg.append(negs + [-1] * (2 - len(negs)))
    return np.array(anchors), np.array(pos), np.array(neg)


def _loss_and_grads(head: ProjectionHead, table, anchors, pos, neg, gamma, with_grad=True):
    out, acts = head.forward(table, keep=True)
    n = len(anchors)
    g_mask = neg >= 0
    safe_neg = np.where(g_mask, neg, anchors[:, None])
    res = info_nce_batched(
        out[anchors], out[pos], np.ones(pos.shape, bool), out[safe_neg], g_mask, gamma, with_grad
    )
    if not with_grad:
        return float(np.mean(res)), None
    losses, dF, dQ, dG = res
    d_out = np.zeros_like(out)
    np.add.at(d_out, anchors, dF / n)
    np.add.at(d_out, pos.reshape(-1), dQ.reshape(-1, dQ.shape[-1]) / n)
    np.add.at(d_out, safe_neg[g_mask], dG[g_mask] / n)
    return float(np.mean(losses)), head.backward(acts, d_out)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class AnchorAlignment:
    take_idx: int
    view_id: int
    t: int
    neg_cosines: tuple
    pos_cosine: float
    infonce: float


def alignment_stats(
    head: ProjectionHead,
    takes: Sequence[Take],
    timelines: Sequence[RankingTimeline],
    gamma: float = 0.1,
    seed: int = 0,
) -> list[AnchorAlignment]:
    """Per exo anchor: cosines to its negatives and InfoNCE with the synchronous
    ego feature as the positive. Negatives are the worst-ranked view (unless
    the anchor is that view) and a same-view feature from the least similar
    other keystep. Draws are fixed by ``seed`` so repeated calls agree."""
    records = []
    for ti, (take, timeline) in enumerate(zip(takes, timelines)):
        T = take.duration_s
        projected = {v: head(take.streams[v].features) for v in take.view_ids}
        ego = projected[take.ego_view_id]
        for v in take.exo_ids:
            rng = np.random.default_rng([seed, _EVAL_STREAM, ti, v])
            raw = take.streams[v].features
            for t in range(T):
                worst = timeline[t].order[-1]
                negs = [projected[worst][t]] if worst != v else []
                try:
                    negs.append(projected[v][same_view_negative(raw[t], t, take.keysteps, T, rng)])
                except SamplingError:
                    pass
                records.append(_score_anchor(ti, v, t, projected[v][t], ego[t], negs, gamma))
    return records


def _score_anchor(ti, v, t, f, ego, negs, gamma):
    def cos(a, b):
        return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), NORM_FLOOR))

    neg_cos = tuple(cos(f, g) for g in negs)
    s_pos = cos(f, ego)
    z = np.array([s_pos, *neg_cos]) / gamma
    loss = float(logsumexp(z) - z[0])
    return AnchorAlignment(ti, v, t, neg_cos, s_pos, max(loss, 0.0))


def summarize(records: Sequence[AnchorAlignment]) -> tuple[float, float, float]:
    """``(mean InfoNCE, avg negative cosine, avg positive cosine)``."""
    if not records:
        return float("nan"), float("nan"), float("nan")
    negs = [c for r in records for c in r.neg_cosines]
    return (
        float(np.mean([r.infonce for r in records])),
        float(np.mean(negs)) if negs else float("nan"),
        float(np.mean([r.pos_cosine for r in records])),
    )


def latent_alignment(head: ProjectionHead, take: Take, latent: np.ndarray, views=None) -> float:
    """Mean cosine between projected exo features and the projected clean latent
    of the same second.

    Both sides are centered on their take means first, so a head that maps
    every input to one direction scores 0 rather than 1.
    """
    z = head(np.asarray(latent, dtype=np.float64))
    z = z - z.mean(axis=0)
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    vals = []
    for v in views or take.exo_ids:
        p = head(take.streams[v].features)
        p = p - p.mean(axis=0)
        pn = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), NORM_FLOOR)
        vals.append(np.sum(pn * zn, axis=1))
    return float(np.mean(np.concatenate(vals)))


# ---------------------------------------------------------------------------
# training loop


def train_distill(
    takes: Sequence[Take],
    timelines: Sequence[RankingTimeline],
    schedule: CurriculumSchedule,
    config: DistillConfig = DistillConfig(),
    eval_takes: Sequence[Take] | None = None,
    eval_timelines: Sequence[RankingTimeline] | None = None,
    head: ProjectionHead | None = None,
) -> DistillResult:
    """Train a projection head with curriculum-scheduled InfoNCE distillation.

    Each epoch first records alignment metrics on the evaluation takes (the
    training takes when none are given) with the current head, then takes one
    gradient step per training take on the mean InfoNCE over every
    (view, second) anchor of that take.
    """
    if not takes:
        raise ConfigurationError("no takes to train on")
    if len(timelines) != len(takes):
        raise ConfigurationError("need exactly one ranking timeline per take")
    if schedule.total_epochs != config.epochs:
        raise ConfigurationError(
            f"schedule covers {schedule.total_epochs} epochs, config asks for {config.epochs}"
        )
    dims = {t.dim for t in takes}
    if len(dims) != 1:
        raise ConfigurationError(f"takes disagree on feature dim: {sorted(dims)}")
    D = dims.pop()
    if eval_takes is None:
        eval_takes, eval_timelines = takes, timelines
    elif eval_timelines is None or len(eval_timelines) != len(eval_takes):
        raise ConfigurationError("need one ranking timeline per evaluation take")

    indices = [_TakeIndex.build(t, tl) for t, tl in zip(takes, timelines)]
    if head is None:
        head = ProjectionHead.init(config.dims_for(D), np.random.default_rng([config.seed, _INIT_STREAM]))
    else:
        head = head.copy()
    if head.input_dim != D:
        raise ConfigurationError(f"head expects dim {head.input_dim}, features have {D}")

    result = DistillResult(head)
    for epoch in range(config.epochs):
        phase = phase_at(schedule, epoch)
        ev = summarize(alignment_stats(head, eval_takes, eval_timelines, config.gamma, config.seed))
        train_losses = []
        for ti, idx in enumerate(indices):
            anchors, pos, neg = _epoch_layout(
                idx, phase, lambda v, ti=ti: epoch_rng(config.seed, epoch, ti, v)
            )
            loss, grads = _loss_and_grads(head, idx.table, anchors, pos, neg, config.gamma)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericError(f"non-finite loss at epoch {epoch}, take {idx.take.take_id}")
            train_losses.append(loss)
            if config.learning_rate > 0:
                head.step([config.lambda_infonce * g for g in grads], config.learning_rate)
        result.metrics.append(EpochMetrics(epoch, phase, float(np.mean(train_losses)), *ev))
        if epoch % 25 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d phase %d train %.4f eval %.4f", epoch, phase, train_losses[-1], ev[0])
    return result
