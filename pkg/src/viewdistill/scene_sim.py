"""Synthetic multi-view takes with ray-cast visibility ground truth.

World frame is Z-up, meters. Cameras look along their +Z axis (x right,
y down). The camera wearer's body is a single vertical capsule under the ego
camera; the hand-object workspace is a cloud of points around a spot in
front of the ego camera. A point is visible to an exo camera when it is
inside the camera's frustum and the straight segment to it misses the
capsule.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .calib_io import (
    EGO_VIEW_ID,
    FeatureStream,
    Frame,
    Keystep,
    KeystepSet,
    Pose,
    PoseTrack,
    Take,
)
from .errors import FormatError, ParseError, ValidationError

WORLD_UP = np.array([0.0, 0.0, 1.0])


class EgoPath(enum.Enum):
    STATIC = "Static"
    ORBIT = "Orbit"
    RANDOM_WALK = "RandomWalk"


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass(frozen=True)
class SceneConfig:
    n_exo: int = 4
    duration_s: int = 30
    arena_radius: float = 3.0
    ego_path: EgoPath = EgoPath.RANDOM_WALK
    seed: int = 0
    # camera wearer
    head_height: float = 1.6
    body_radius: float = 0.22
    body_top_offset: float = 0.12
    body_bottom: float = 0.1
    pitch_deg: float = 40.0
    hand_distance: float = 0.6
    # workspace cloud
    hoi_points: int = 64
    hoi_radius: float = 0.15
    # exo rig
    exo_height: tuple = (1.0, 2.2)
    aim_jitter: float = 0.5
    hfov_deg: float = 90.0
    # features
    feature_dim: int = 16
    noise_sigma: float = 0.1
    keystep_len: tuple = (3, 8)
    # keystep types shared by every take drawn with the same vocab_seed;
    # 0 gives each keystep its own random direction
    vocab_size: int = 8
    vocab_seed: int = 0

    def __post_init__(self):
        if self.n_exo < 1:
            raise ValidationError("need at least one exo camera")
        if self.duration_s < 1:
            raise ValidationError("duration must be at least one second")
        for name in ("arena_radius", "body_radius", "hoi_radius", "hand_distance"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.hoi_points < 8:
            raise ValidationError("HOI cloud needs at least 8 points")
        if self.feature_dim < 1 or self.noise_sigma < 0 or self.vocab_size < 0:
            raise ValidationError("bad feature settings")
        if not isinstance(self.ego_path, EgoPath):
            object.__setattr__(self, "ego_path", EgoPath(self.ego_path))


@dataclass(eq=False)
class SyntheticTake:
    take: Take
    visible_fraction: np.ndarray  # (T, n_exo), columns follow take.exo_ids
    latent: np.ndarray  # (T, D) unit action vectors
    hoi_clouds: np.ndarray  # (T, n_points, 3)
    bodies: list  # Capsule per second
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)

    def visibility_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,view_id,visible_fraction\n")
        for t in range(self.visible_fraction.shape[0]):
            for j, vid in enumerate(self.take.exo_ids):
                buf.write(f"{t},{vid},{float(self.visible_fraction[t, j])!r}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# geometry


def look_rotation(forward) -> np.ndarray:
    """World-from-camera rotation whose +Z column is ``forward`` and +X is level."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, WORLD_UP)
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= n
    down = np.cross(f, right)
    return np.column_stack([right, down, f])


def camera_pose(position, forward) -> Pose:
    """Camera-from-world pose of a camera at ``position`` looking along ``forward``."""
    r_wc = look_rotation(forward)
    return Pose(r_wc.T, -r_wc.T @ np.asarray(position, dtype=np.float64), Frame.CAMERA_FROM_WORLD)


def segment_capsule_hits(origin, points: np.ndarray, capsule: Capsule) -> np.ndarray:
    """Boolean per point: does the segment ``origin -> point`` touch the capsule?

    Closest approach between two segments, clamped to both parameter ranges.
    """
    p0 = np.asarray(origin, dtype=np.float64)
    d1 = points - p0
    d2 = capsule.b - capsule.a
    r = p0 - capsule.a
    a = np.einsum("ij,ij->i", d1, d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
    t = (b * s + f) / e if e > 0 else np.zeros_like(s)
    low = t < 0
    high = t > 1
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(low, np.clip(-c / a, 0.0, 1.0), s)
        s = np.where(high, np.clip((b - c) / a, 0.0, 1.0), s)
    closest_seg = p0 + s[:, None] * d1
    closest_axis = capsule.a + t[:, None] * d2
    dist = np.linalg.norm(closest_seg - closest_axis, axis=1)
    return dist <= capsule.radius


def in_frustum(position, r_wc: np.ndarray, points: np.ndarray, hfov_deg: float = 90.0) -> np.ndarray:
    """Square frustum: the same half-angle horizontally and vertically."""
    local = (points - np.asarray(position)) @ r_wc
    half = np.tan(np.radians(hfov_deg) / 2)
    z = local[:, 2]
    return (z > 0) & (np.abs(local[:, 0]) <= half * z) & (np.abs(local[:, 1]) <= half * z)


def visible_fraction(position, r_wc, points, capsule: Capsule | None, hfov_deg: float = 90.0) -> float:
    ok = in_frustum(position, r_wc, points, hfov_deg)
    if capsule is not None:
        ok &= ~segment_capsule_hits(position, points, capsule)
    return float(np.mean(ok))


# ---------------------------------------------------------------------------
# generation


def _ego_states(cfg: SceneConfig, rng: np.random.Generator):
    """Per-second (x, y, yaw, pitch) of the camera wearer's head."""
    T = cfg.duration_s
    limit = 0.45 * cfg.arena_radius
    base_pitch = np.radians(cfg.pitch_deg)
    pos0 = rng.uniform(-0.3, 0.3, size=2) * cfg.arena_radius
    yaw0 = rng.uniform(-np.pi, np.pi)
    out = np.zeros((T, 4))
    if cfg.ego_path is EgoPath.STATIC:
        out[:] = [pos0[0], pos0[1], yaw0, base_pitch]
    elif cfg.ego_path is EgoPath.ORBIT:
        radius = 0.3 * cfg.arena_radius
        omega = rng.choice([-1.0, 1.0]) * 2 * np.pi / max(T, 8)
        for t in range(T):
            ang = yaw0 + omega * t
            out[t] = [radius * np.cos(ang), radius * np.sin(ang), ang + np.pi, base_pitch]
    else:
        pos, yaw = pos0.copy(), yaw0
        for t in range(T):
            if t:
                pos = pos + rng.normal(0.0, 0.15, size=2)
                n = np.linalg.norm(pos)
                if n > limit:
                    pos *= limit / n
                yaw = yaw + rng.normal(0.0, 0.5)
            pitch = np.clip(base_pitch + rng.normal(0.0, 0.1), np.radians(15), np.radians(70))
            out[t] = [pos[0], pos[1], yaw, pitch]
    return out


def _gaze(yaw: float, pitch: float) -> np.ndarray:
    return np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])


def _exo_rig(cfg: SceneConfig, rng: np.random.Generator):
    n = cfg.n_exo
    offset = rng.uniform(0, 2 * np.pi)
    spread = np.pi / n
    cams = {}
    for i in range(n):
        ang = offset + 2 * np.pi * i / n + rng.uniform(-0.4, 0.4) * spread
        pos = np.array([cfg.arena_radius * np.cos(ang), cfg.arena_radius * np.sin(ang), rng.uniform(*cfg.exo_height)])
        rad, phi = cfg.aim_jitter * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
        aim = np.array([rad * np.cos(phi), rad * np.sin(phi), rng.uniform(0.8, 1.2)])
        cams[i + 1] = (pos, look_rotation(aim - pos))
    return cams


def _ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * np.cbrt(rng.uniform(size=(n, 1)))


def _keystep_intervals(cfg: SceneConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    lo, hi = cfg.keystep_len
    spans, t = [], 0
    while t < cfg.duration_s:
        n = int(rng.integers(lo, hi + 1))
        spans.append((t, min(t + n, cfg.duration_s)))
        t += n
    return spans


def generate_scene(cfg: SceneConfig = SceneConfig()) -> SyntheticTake:
    """Build a synthetic take: geometry, visibility ground truth and features."""
    ss = np.random.SeedSequence(cfg.seed)
    geo_rng, cloud_rng, feat_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    T = cfg.duration_s

    rig = _exo_rig(cfg, geo_rng)
    states = _ego_states(cfg, geo_rng)
    intervals = _keystep_intervals(cfg, geo_rng)

    ego_poses, clouds, bodies = [], [], []
    vis = np.zeros((T, cfg.n_exo))
    for t, (x, y, yaw, pitch) in enumerate(states):
        head = np.array([x, y, cfg.head_height])
        g = _gaze(yaw, pitch)
        ego_poses.append(camera_pose(head, g))
        center = head + cfg.hand_distance * g
        cloud = center + _ball(cloud_rng, cfg.hoi_points, cfg.hoi_radius)
        body = Capsule(
            np.array([x, y, cfg.head_height - cfg.body_top_offset]),
            np.array([x, y, cfg.body_bottom]),
            cfg.body_radius,
        )
        clouds.append(cloud)
        bodies.append(body)
        for j, (pos, r_wc) in enumerate(rig.values()):
            vis[t, j] = visible_fraction(pos, r_wc, cloud, body, cfg.hfov_deg)

    exo = {vid: camera_pose(pos, r_wc[:, 2]) for vid, (pos, r_wc) in rig.items()}
    latent, embeddings = _latent_actions(cfg, intervals, feat_rng)
    streams = emit_streams(vis, latent, cfg.noise_sigma, feat_rng, list(exo))
    keysteps = KeystepSet(
        tuple(Keystep(f"k{j}", embeddings[j], float(s), float(e)) for j, (s, e) in enumerate(intervals))
    )
    take = Take(
        f"synthetic-{cfg.seed}",
        PoseTrack(np.arange(T), tuple(ego_poses)),
        exo,
        streams,
        keysteps,
        T,
    )
    return SyntheticTake(take, vis, latent, np.stack(clouds), bodies, cfg)


def keystep_vocabulary(size: int, dim: int, vocab_seed: int = 0) -> np.ndarray:
    """``(size, dim)`` unit keystep directions, identical for every scene with the same seed."""
    v = np.random.default_rng([vocab_seed, 0x70CAB, dim]).normal(size=(size, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _latent_actions(cfg: SceneConfig, intervals, rng: np.random.Generator):
    """Unit action vector per second: the keystep's direction plus a small random
    walk inside its interval. Returns (latent, per-keystep embeddings).

    Keystep directions come from the shared vocabulary (consecutive keysteps
    never repeat a type) or, with ``vocab_size == 0``, are drawn fresh.
    """
    D = cfg.feature_dim
    vocab = keystep_vocabulary(cfg.vocab_size, D, cfg.vocab_seed) if cfg.vocab_size else None
    latent = np.zeros((cfg.duration_s, D))
    embeddings = []
    prev = -1
    for s, e in intervals:
        if vocab is None:
            k = rng.normal(size=D)
            k /= np.linalg.norm(k)
        else:
            choices = [i for i in range(len(vocab)) if i != prev] or [0]
            prev = int(choices[int(rng.integers(len(choices)))])
            k = vocab[prev]
        embeddings.append(k)
        drift = np.zeros(D)
        for t in range(s, e):
            drift = drift + rng.normal(0.0, 0.1 / np.sqrt(D), size=D)
            a = k + drift
            latent[t] = a / np.linalg.norm(a)
    return latent, np.stack(embeddings)


def emit_streams(visibility: np.ndarray, latent: np.ndarray, sigma: float, rng: np.random.Generator, exo_ids):
    """Per-view streams ``visible_fraction * latent + noise``; the ego view sees everything."""
    T, D = latent.shape
    streams = {EGO_VIEW_ID: FeatureStream(EGO_VIEW_ID, latent + sigma * rng.normal(size=(T, D)))}
    for j, vid in enumerate(exo_ids):
        rows = visibility[:, j : j + 1] * latent + sigma * rng.normal(size=(T, D))
        streams[vid] = FeatureStream(vid, rows)
    return streams


def visibility_oracle(scene: SyntheticTake, view_id: int, tau: int) -> float:
    """Recompute the visible fraction of one exo camera at one second from stored geometry."""
    pose = scene.take.exo_poses[view_id]
    r_wc = pose.rotation.T
    position = -r_wc @ pose.translation
    return visible_fraction(position, r_wc, scene.hoi_clouds[tau], scene.bodies[tau], scene.config.hfov_deg)


def synth_features(scene: SyntheticTake, dim: int, sigma: float, seed: int) -> dict:
    """Fresh per-view streams for ``scene``.

    Reuses the scene's latent actions when ``dim`` matches them, otherwise
    draws a new latent over the same keystep intervals.
    """
    return _resynth(scene, dim, sigma, seed)[0]


def with_features(scene: SyntheticTake, dim: int, sigma: float, seed: int) -> SyntheticTake:
    """Copy of ``scene`` whose streams, latent and keystep embeddings come from ``synth_features``."""
    streams, latent, keysteps = _resynth(scene, dim, sigma, seed)
    take = replace(scene.take, streams=streams, keysteps=keysteps)
    return replace(scene, take=take, latent=latent, config=replace(scene.config, feature_dim=dim, noise_sigma=sigma))


def _resynth(scene: SyntheticTake, dim: int, sigma: float, seed: int):
    rng = np.random.default_rng(seed)
    keysteps = scene.take.keysteps
    latent = scene.latent
    if latent.shape[1] != dim:
        cfg = replace(scene.config, feature_dim=dim)
        intervals = [(int(k.start_s), int(k.end_s)) for k in keysteps]
        latent, emb = _latent_actions(cfg, intervals, rng)
        keysteps = KeystepSet(tuple(replace(k, embedding=emb[j]) for j, k in enumerate(keysteps)))
    streams = emit_streams(scene.visible_fraction, latent, sigma, rng, scene.take.exo_ids)
    return streams, latent, keysteps


# ---------------------------------------------------------------------------
# oracle agreement


def tie_aware_spearman(order_scores) -> float:
    """Spearman correlation between a strict ranking and an oracle score per item.

    ``order_scores`` lists the oracle score of each item in ranking order,
    best first. The oracle ordering sorts by descending score; items the
    oracle scores equally keep their ranking order, so tied items never
    count as disagreements. Both orderings are then permutations, and the
    no-ties formula ``1 - 6 sum d^2 / (n (n^2 - 1))`` applies.
    """
    v = np.asarray(order_scores, dtype=np.float64)
    n = len(v)
    if n < 2:
        raise ValueError("need at least two items")
    oracle = np.argsort(-v, kind="stable")
    pos = np.empty(n)
    pos[oracle] = np.arange(n)
    d = pos - np.arange(n)
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))


def ranking_visibility_correlation(timeline, scene: SyntheticTake) -> float:
    return table_correlation(timeline, scene.visible_fraction, scene.take.exo_ids)


def table_correlation(timeline, visibility: np.ndarray, exo_ids) -> float:
    """Mean over seconds of the tie-aware Spearman correlation between the exo
    ranking order and the visible fractions (rows = seconds, columns follow
    ``exo_ids``).

    Seconds where every exo view has the same visible fraction carry no
    ordering information and are skipped; returns NaN if all are skipped.
    """
    col = {int(vid): j for j, vid in enumerate(exo_ids)}
    if len(timeline) > len(visibility):
        raise ValidationError(f"{len(timeline)} rankings but visibility for {len(visibility)} seconds")
    vals = []
    for r in timeline:
        exo = r.order[1:]
        if len(exo) < 2:
            continue
        try:
            v = np.array([visibility[r.timestamp, col[vid]] for vid in exo])
        except KeyError as err:
            raise ValidationError(f"t={r.timestamp}: no visibility for view {err.args[0]}") from None
        if np.ptp(v) == 0:
            continue
        vals.append(tie_aware_spearman(v))
    return float(np.mean(vals)) if vals else float("nan")


def parse_visibility_csv(text: str | bytes) -> tuple[list[int], np.ndarray]:
    """Inverse of ``SyntheticTake.visibility_csv``: ``(exo_ids, table)``."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as err:
            raise FormatError(f"visibility file is not UTF-8: {err}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "t,view_id,visible_fraction":
        raise ParseError("missing header t,view_id,visible_fraction", 1)
    cells: dict[tuple[int, int], float] = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", lineno)
        try:
            t, vid, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"bad number in {ln.strip()!r}", lineno) from None
        if t < 0 or vid < 0 or not (0.0 <= v <= 1.0):
            raise ValidationError(f"line {lineno}: value out of range")
        if (t, vid) in cells:
            raise ValidationError(f"line {lineno}: duplicate entry for t={t}, view {vid}")
        cells[t, vid] = v
    if not cells:
        raise ValidationError("visibility file has no rows")
    exo_ids = sorted({vid for _, vid in cells})
    T = max(t for t, _ in cells) + 1
    if len(cells) != T * len(exo_ids):
        raise ValidationError("visibility table is incomplete")
    table = np.empty((T, len(exo_ids)))
    for (t, vid), v in cells.items():
        table[t, exo_ids.index(vid)] = v
    return exo_ids, table
