"""Choosing positives and negatives for one source feature."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..calib_io import FeatureStream, KeystepSet
from ..curriculum import positive_rank
from ..errors import ConfigurationError, ContractError, DegenerateInputError, SamplingError
from ..ranking import ViewRanking

CROSS_VIEW_POS = "cross-view-pos"
CROSS_VIEW_NEG = "cross-view-neg"
SAME_VIEW_NEG = "same-view-neg"


@dataclass(frozen=True)
class FeatureRef:
    """A feature row addressed by (view, second)."""

    view_id: int
    t: int
    tag: str = ""


@dataclass
class DistillTriple:
    anchor: FeatureRef
    positives: list
    negatives: list
    features: Mapping[FeatureRef, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.positives:
            raise ConfigurationError("a distillation triple needs at least one positive")
        key = (self.anchor.view_id, self.anchor.t)
        if any((r.view_id, r.t) == key for r in (*self.positives, *self.negatives)):
            raise ConfigurationError("anchor appears among its own targets")

    def vectors(self):
        """``(anchor, Q, G)`` as arrays, for the loss functions."""
        f = self.features
        return (
            f[self.anchor],
            np.stack([f[r] for r in self.positives]),
            np.stack([f[r] for r in self.negatives]) if self.negatives else np.zeros((0, len(f[self.anchor]))),
        )


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ContractError(f"cannot compare a {a.shape} feature with a {b.shape} keystep embedding")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return float(a @ b / (na * nb))


def negative_keystep_seconds(feature, tau: int, keysteps: KeystepSet, n_seconds: int) -> range | None:
    """Seconds of the keystep least similar to ``feature``, among keysteps whose
    interval excludes ``tau`` and holds at least one whole second of the stream.
    Ties keep the first keystep listed. ``None`` when nothing is eligible."""
    feature = np.asarray(feature, dtype=np.float64)
    best, best_cos = None, np.inf
    for k in keysteps:
        if k.contains(tau):
            continue
        secs = k.seconds(n_seconds)
        if len(secs) == 0:
            continue
        c = _cos(feature, k.embedding)
        if c < best_cos:
            best, best_cos = secs, c
    return best


def draw_second(secs: range, rng: np.random.Generator) -> int:
    return int(secs[int(rng.integers(len(secs)))])


def same_view_negative(feature, tau: int, keysteps: KeystepSet, n_seconds: int, rng: np.random.Generator) -> int:
    """Second to draw the same-view negative from, sampled uniformly inside the
    least similar other keystep."""
    secs = negative_keystep_seconds(feature, tau, keysteps, n_seconds)
    if secs is None:
        raise SamplingError(f"no keystep outside t={tau} to sample a same-view negative from")
    return draw_second(secs, rng)


def select_targets(
    ranking: ViewRanking,
    source_view: int,
    phase: int,
    streams: Mapping[int, FeatureStream],
    keysteps: KeystepSet,
    rng: np.random.Generator,
) -> DistillTriple:
    """Build the positive set and negative set for ``source_view`` at ``ranking.timestamp``.

    The positive comes from the view the curriculum picks for this phase. The
    negatives are the synchronous feature of the worst-ranked view (skipped
    when that view is the source or the positive) and one feature of the same
    view during the least similar other keystep (skipped when none is
    eligible).
    """
    order = ranking.order
    if len(order) < 2:
        raise ConfigurationError("distillation needs at least two views")
    tau = ranking.timestamp
    r = order.index(source_view)
    pos_view = order[positive_rank(r, phase, len(order))]
    worst = order[-1]

    anchor = FeatureRef(source_view, tau)
    feats = {anchor: streams[source_view].features[tau]}
    pos = FeatureRef(pos_view, tau, CROSS_VIEW_POS)
    feats[pos] = streams[pos_view].features[tau]
    negatives = []
    if worst not in (source_view, pos_view):
        ref = FeatureRef(worst, tau, CROSS_VIEW_NEG)
        feats[ref] = streams[worst].features[tau]
        negatives.append(ref)
    stream = streams[source_view]
    try:
        t_neg = same_view_negative(feats[anchor], tau, keysteps, stream.T, rng)
    except SamplingError:
        pass
    else:
        ref = FeatureRef(source_view, t_neg, SAME_VIEW_NEG)
        feats[ref] = stream.features[t_neg]
        negatives.append(ref)
    return DistillTriple(anchor, [pos], negatives, feats)
