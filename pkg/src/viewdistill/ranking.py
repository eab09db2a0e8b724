"""Activity-centric view ranking from camera geometry.

Every second the exo cameras are split into those facing the camera wearer
and those behind them (by the XY-plane cosine between gaze directions), and
each block is sorted by how well the camera is aimed at the estimated
hand-object interaction (HOI) point in front of the ego camera. The ego view
always comes first.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .calib_io import EGO_VIEW_ID, Frame, Pose, Take, parse_ranking_cache, serialize_ranking_cache
from .errors import ContractError, DegenerateGeometryError, InterpolationError, ValidationError

XY_DEGENERATE = 1e-9


class GazeAxis(enum.Enum):
    PLUS_Z = "PlusZ"
    MINUS_Z = "MinusZ"


@dataclass(frozen=True)
class HoiConfig:
    d_ego_hand: float = 0.6
    gaze_axis: GazeAxis = GazeAxis.PLUS_Z
    front_tie_epsilon: float = 0.0

    def __post_init__(self):
        if not self.d_ego_hand > 0:
            raise ValidationError(f"d_ego_hand must be positive, got {self.d_ego_hand}")
        if not isinstance(self.gaze_axis, GazeAxis):
            object.__setattr__(self, "gaze_axis", GazeAxis(self.gaze_axis))


@dataclass(frozen=True)
class ViewRanking:
    timestamp: int
    order: tuple
    scores: Mapping[int, float] = field(default_factory=dict)
    front_mask: Mapping[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))
        if len(set(self.order)) != len(self.order):
            raise ValidationError(f"t={self.timestamp}: ranking repeats a view")

    @property
    def exo_order(self) -> tuple:
        return self.order[1:]

    def rank_of(self, view_id: int) -> int:
        return self.order.index(view_id)


RankingTimeline = list  # list[ViewRanking], one per second starting at 0


# ---------------------------------------------------------------------------
# geometry


def invert(pose: Pose) -> Pose:
    """Swap between camera-from-world and world-from-camera: ``[Rᵀ | -Rᵀt]``."""
    r = pose.rotation.T
    other = Frame.WORLD_FROM_CAMERA if pose.frame is Frame.CAMERA_FROM_WORLD else Frame.CAMERA_FROM_WORLD
    return Pose(r, -r @ pose.translation, other)


def to_world(pose: Pose) -> Pose:
    if pose.frame is not Frame.CAMERA_FROM_WORLD:
        raise ContractError(f"to_world expects a CameraFromWorld pose, got {pose.frame.value}")
    return invert(pose)


def to_camera(pose: Pose) -> Pose:
    if pose.frame is not Frame.WORLD_FROM_CAMERA:
        raise ContractError(f"to_camera expects a WorldFromCamera pose, got {pose.frame.value}")
    return invert(pose)


def gaze_vector(pose_world: Pose, axis: GazeAxis = GazeAxis.PLUS_Z) -> np.ndarray:
    if pose_world.frame is not Frame.WORLD_FROM_CAMERA:
        raise ContractError("gaze_vector expects a WorldFromCamera pose")
    g = pose_world.rotation[:, 2].copy()
    return -g if axis is GazeAxis.MINUS_Z else g


def hoi_center(ego_world: Pose, cfg: HoiConfig = HoiConfig()) -> np.ndarray:
    return ego_world.translation + cfg.d_ego_hand * gaze_vector(ego_world, cfg.gaze_axis)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def hoi_alignment(exo_world: Pose, p_center, axis: GazeAxis = GazeAxis.PLUS_Z) -> float:
    """Cosine between the exo camera's gaze and the direction to the HOI point."""
    to_center = np.asarray(p_center, dtype=np.float64) - exo_world.translation
    if np.linalg.norm(to_center) < 1e-12:
        raise DegenerateGeometryError("HOI center coincides with the camera position")
    return _cosine(gaze_vector(exo_world, axis), to_center)


def cos_xy(a, b) -> float:
    """Cosine of the XY projections; 0 when either projection vanishes."""
    a = np.asarray(a, dtype=np.float64)[:2]
    b = np.asarray(b, dtype=np.float64)[:2]
    na = np.hypot(*a)
    nb = np.hypot(*b)
    if na < XY_DEGENERATE or nb < XY_DEGENERATE:
        return 0.0
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def partition_front_back(ego_gaze, exo_gazes: Mapping[int, np.ndarray], epsilon: float = 0.0):
    """Return ``(front_ids, back_ids)`` in input order.

    A view is in front (faces the camera wearer) iff the XY cosine of its gaze
    with the ego gaze is <= ``epsilon``.
    """
    front, back = [], []
    for vid, g in exo_gazes.items():
        (front if cos_xy(ego_gaze, g) <= epsilon else back).append(vid)
    return front, back


def _sorted_block(ids: Sequence[int], scores: Mapping[int, float]) -> list[int]:
    return sorted(ids, key=lambda v: (-scores[v], v))


def rank_views(
    ego_pose: Pose,
    exo_poses: Mapping[int, Pose],
    cfg: HoiConfig = HoiConfig(),
    timestamp: int = 0,
    ego_view_id: int = EGO_VIEW_ID,
) -> ViewRanking:
    """Rank all views at one instant.

    Poses may be given in either frame; camera-from-world poses are converted.
    """
    if ego_pose is None:
        raise InterpolationError(f"no ego pose at t={timestamp}")
    if not exo_poses:
        raise ValidationError("at least one exo camera is required")

    def world(p: Pose) -> Pose:
        return to_world(p) if p.frame is Frame.CAMERA_FROM_WORLD else p

    ego_w = world(ego_pose)
    ego_gaze = gaze_vector(ego_w, cfg.gaze_axis)
    p_center = hoi_center(ego_w, cfg)
    exo_w = {vid: world(p) for vid, p in exo_poses.items()}
    gazes = {vid: gaze_vector(p, cfg.gaze_axis) for vid, p in exo_w.items()}
    scores = {vid: hoi_alignment(p, p_center, cfg.gaze_axis) for vid, p in exo_w.items()}
    front, back = partition_front_back(ego_gaze, gazes, cfg.front_tie_epsilon)
    order = (ego_view_id, *_sorted_block(front, scores), *_sorted_block(back, scores))
    front_set = set(front)
    mask = {vid: vid in front_set for vid in exo_w}
    return ViewRanking(int(timestamp), order, scores, mask)


def rank_take(take: Take, cfg: HoiConfig = HoiConfig()) -> RankingTimeline:
    missing = [t for t in range(take.duration_s) if take.ego_track.pose_at(t) is None]
    if missing:
        shown = ", ".join(map(str, missing[:20])) + (" ..." if len(missing) > 20 else "")
        raise InterpolationError(f"take {take.take_id}: ego pose missing at seconds {shown}")
    return [
        rank_views(take.ego_track.pose_at(t), take.exo_poses, cfg, t, take.ego_view_id)
        for t in range(take.duration_s)
    ]


# ---------------------------------------------------------------------------
# ablations and cache


def reverse_timeline(timeline: RankingTimeline) -> RankingTimeline:
    """Reverse the exo part of every ranking; the ego view stays first."""
    return [ViewRanking(r.timestamp, (r.order[0], *reversed(r.order[1:]))) for r in timeline]


def shuffle_timeline(timeline: RankingTimeline, seed: int) -> RankingTimeline:
    """Shuffle the exo part of every ranking uniformly, reproducibly from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for r in timeline:
        exo = list(r.order[1:])
        perm = rng.permutation(len(exo))
        out.append(ViewRanking(r.timestamp, (r.order[0], *(exo[i] for i in perm))))
    return out


def timeline_to_cache(timeline: RankingTimeline) -> str:
    return serialize_ranking_cache((r.timestamp, r.order) for r in timeline)


def timeline_from_cache(text: str | bytes) -> RankingTimeline:
    rows = parse_ranking_cache(text)
    for i, (t, _) in enumerate(rows):
        if t != i:
            raise ValidationError(f"ranking cache must list contiguous seconds from 0; found {t} at row {i}")
    return [ViewRanking(t, order) for t, order in rows]


def rank_frequencies(timeline: RankingTimeline) -> dict[int, list[int]]:
    """Per view, how many seconds it spent at each rank position."""
    n = len(timeline[0].order)
    counts: dict[int, list[int]] = {v: [0] * n for v in timeline[0].order}
    for r in timeline:
        for pos, vid in enumerate(r.order):
            counts[vid][pos] += 1
    return counts


def check_ranking(r: ViewRanking, view_ids: Sequence[int], ego_view_id: int = EGO_VIEW_ID) -> None:
    """Raise ``AssertionError`` if a scored ranking breaks a structural invariant."""
    assert sorted(r.order) == sorted(view_ids), "order is not a permutation of the views"
    assert r.order[0] == ego_view_id, "ego view is not first"
    exo = r.order[1:]
    fronts = [i for i, v in enumerate(exo) if r.front_mask[v]]
    backs = [i for i, v in enumerate(exo) if not r.front_mask[v]]
    if fronts and backs:
        assert max(fronts) < min(backs), "a back view precedes a front view"
    for block in (fronts, backs):
        s = [r.scores[exo[i]] for i in block]
        assert all(a >= b for a, b in zip(s, s[1:])), "scores increase within a block"
