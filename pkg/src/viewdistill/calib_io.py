"""Readers and writers for calibration, trajectory, feature, keystep and ranking files.

Text formats are whitespace separated, one record per line, ``#`` starts a
comment. Floats are written with ``repr`` so that a value survives a
serialize/parse cycle bit-exactly.

Feature stream binary layout (little endian)::

    offset  size  field
    0       4     magic  b"VDFS"
    4       2     u16 version (1)
    6       4     u32 view_id
    10      4     u32 T (rows)
    14      4     u32 D (columns)
    18      4*T*D f32 payload, row-major
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    FormatError,
    ParseError,
    ResolutionError,
    TruncationError,
    ValidationError,
)

EGO_VIEW_ID = 0

ORTHO_KEEP_TOL = 1e-6
ORTHO_REPAIR_TOL = 1e-3

FEATURE_MAGIC = b"VDFS"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHIII")


class Frame(enum.Enum):
    CAMERA_FROM_WORLD = "CameraFromWorld"
    WORLD_FROM_CAMERA = "WorldFromCamera"


def orthonormality_error(rotation: np.ndarray) -> float:
    """Max-abs entry of ``RᵀR - I``."""
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def normalize_rotation(matrix) -> np.ndarray:
    """Return a rotation that satisfies the loaded-pose invariant.

    Matrices already orthonormal within 1e-6 are returned unchanged, so that
    exact inputs round-trip bit-for-bit. Matrices within 1e-3 are projected
    onto the nearest rotation; anything worse, or a reflection, raises
    ``ValidationError``.
    """
    r = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(r)):
        raise ValidationError("rotation contains non-finite values")
    err = orthonormality_error(r)
    if err > ORTHO_REPAIR_TOL:
        raise ValidationError(f"rotation is not orthonormal (|RᵀR - I| = {err:.3g})")
    if np.linalg.det(r) <= 0:
        raise ValidationError("rotation has negative determinant")
    if err > ORTHO_KEEP_TOL:
        r = nearest_rotation(r)
    return r


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    frame: Frame = Frame.CAMERA_FROM_WORLD

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not isinstance(self.frame, Frame):
            raise ValidationError(f"pose frame must be a Frame, got {self.frame!r}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        if orthonormality_error(r) > ORTHO_KEEP_TOL or np.linalg.det(r) <= 0:
            raise ValidationError("pose rotation is not a proper rotation")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame: Frame = Frame.CAMERA_FROM_WORLD) -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (
            self.frame is other.frame
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class PoseTrack:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise ValidationError("timestamps and poses differ in length")
        if len(ts) == 0:
            raise ValidationError("pose track is empty")
        if np.any(np.diff(ts) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def pose_at(self, t: int) -> Pose | None:
        i = int(np.searchsorted(self.timestamps, t))
        if i < len(self.timestamps) and self.timestamps[i] == t:
            return self.poses[i]
        return None


@dataclass(frozen=True, eq=False)
class FeatureStream:
    view_id: int
    features: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty T x D matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValidationError("feature stream contains NaN or Inf")
        if not 0 <= int(self.view_id) < 2**32:
            raise ValidationError(f"view_id out of range: {self.view_id}")
        f.setflags(write=False)
        object.__setattr__(self, "view_id", int(self.view_id))
        object.__setattr__(self, "features", f)

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class Keystep:
    keystep_id: str
    embedding: np.ndarray
    start_s: float
    end_s: float
    embedding_ref: str = ""

    def seconds(self, limit: int | None = None) -> range:
        """Integer seconds ``t`` with ``start_s <= t < end_s``."""
        lo = math.ceil(self.start_s)
        hi = math.ceil(self.end_s)
        if limit is not None:
            hi = min(hi, limit)
        return range(max(lo, 0), max(hi, 0))

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass(frozen=True, eq=False)
class KeystepSet:
    entries: tuple = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for k in entries:
            if not k.start_s < k.end_s:
                raise ValidationError(f"keystep {k.keystep_id}: start {k.start_s} >= end {k.end_s}")
            if not np.all(np.isfinite(k.embedding)):
                raise ValidationError(f"keystep {k.keystep_id}: embedding is not finite")
            if k.keystep_id in seen:
                raise ValidationError(f"duplicate keystep id {k.keystep_id}")
            seen.add(k.keystep_id)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True, eq=False)
class Take:
    take_id: str
    ego_track: PoseTrack
    exo_poses: Mapping[int, Pose]
    streams: Mapping[int, FeatureStream]
    keysteps: KeystepSet
    duration_s: int
    ego_view_id: int = EGO_VIEW_ID

    def __post_init__(self):
        exo = dict(sorted(self.exo_poses.items()))
        streams = dict(sorted(self.streams.items()))
        if len(exo) < 1:
            raise ValidationError("take needs at least one exo camera")
        if self.ego_view_id in exo:
            raise ValidationError(f"exo view id {self.ego_view_id} collides with the ego view")
        if self.ego_view_id not in streams:
            raise ValidationError("ego feature stream missing")
        dims = {s.dim for s in streams.values()}
        if len(dims) > 1:
            raise ValidationError(f"streams disagree on feature dim: {sorted(dims)}")
        for vid, s in streams.items():
            if s.view_id != vid:
                raise ValidationError(f"stream keyed {vid} carries view_id {s.view_id}")
            if s.T != self.duration_s:
                raise ValidationError(f"stream {vid} has {s.T} rows, take lasts {self.duration_s} s")
        object.__setattr__(self, "exo_poses", exo)
        object.__setattr__(self, "streams", streams)

    @property
    def exo_ids(self) -> list[int]:
        return list(self.exo_poses)

    @property
    def view_ids(self) -> list[int]:
        return [self.ego_view_id, *self.exo_poses]

    @property
    def dim(self) -> int:
        return next(iter(self.streams.values())).dim


# ---------------------------------------------------------------------------
# text helpers


def _fmt(x: float) -> str:
    return repr(float(x))


def _text(data: str | bytes) -> str:
    if isinstance(data, (bytes, bytearray)):
        try:
            return bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"input is not valid UTF-8: {exc}") from None
    return data


def _records(text: str | bytes) -> Iterable[tuple[int, list[str]]]:
    text = _text(text)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _floats(tokens: Sequence[str], lineno: int) -> list[float]:
    out = []
    for tok in tokens:
        try:
            v = float(tok)
        except ValueError:
            raise ParseError(f"not a number: {tok!r}", lineno) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value: {tok!r}", lineno)
        out.append(v)
    return out


def _uint(tok: str, lineno: int, what: str) -> int:
    if not tok.isdigit() or not tok.isascii():
        raise ParseError(f"{what} must be a non-negative integer, got {tok!r}", lineno)
    v = int(tok)
    if v >= 2**32:
        raise ParseError(f"{what} out of range: {tok}", lineno)
    return v


def _pose_from_tokens(tokens: Sequence[str], lineno: int) -> Pose:
    vals = _floats(tokens, lineno)
    try:
        rot = normalize_rotation(np.array(vals[:9]))
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    return Pose(rot, np.array(vals[9:]), Frame.CAMERA_FROM_WORLD)


def _pose_tokens(pose: Pose) -> str:
    return " ".join(_fmt(v) for v in (*pose.rotation.reshape(-1), *pose.translation))


# ---------------------------------------------------------------------------
# calibration


def parse_calibration(text: str) -> dict[int, Pose]:
    """Parse ``exo <view_id> <r11..r33> <tx ty tz>`` lines into camera-from-world poses."""
    cams: dict[int, Pose] = {}
    for lineno, toks in _records(text):
        if toks[0] != "exo":
            raise ParseError(f"expected 'exo', got {toks[0]!r}", lineno)
        if len(toks) != 14:
            raise ParseError(f"expected view id and 12 numbers, got {len(toks) - 1} fields", lineno)
        vid = _uint(toks[1], lineno, "view_id")
        if vid in cams:
            raise ValidationError(f"line {lineno}: duplicate view_id {vid}")
        cams[vid] = _pose_from_tokens(toks[2:], lineno)
    return cams


def serialize_calibration(cameras: Mapping[int, Pose]) -> str:
    lines = []
    for vid, pose in cameras.items():
        if pose.frame is not Frame.CAMERA_FROM_WORLD:
            raise ContractError("calibration files store camera-from-world poses")
        lines.append(f"exo {int(vid)} {_pose_tokens(pose)}")
    return "".join(line + "\n" for line in lines)


def normalize_calibration(text: str) -> str:
    """Canonical text form: comments and blank lines dropped, tokens re-spaced,
    numbers rewritten in shortest round-trip notation.

    Works purely on tokens, so it is an independent check on the parser.
    """
    out = []
    for _, toks in _records(text):
        nums = " ".join(_fmt(float(t)) for t in toks[2:])
        out.append(f"exo {int(toks[1])} {nums}\n")
    return "".join(out)


# ---------------------------------------------------------------------------
# ego trajectory


def parse_ego_trajectory(text: str) -> PoseTrack:
    stamps: list[int] = []
    poses: list[Pose] = []
    for lineno, toks in _records(text):
        if len(toks) != 13:
            raise ParseError(f"expected timestamp and 12 numbers, got {len(toks)} fields", lineno)
        (t,) = _floats(toks[:1], lineno)
        if t != int(t) or t < 0:
            raise ValidationError(f"line {lineno}: timestamps must be non-negative whole seconds, got {toks[0]}")
        t = int(t)
        if stamps and t == stamps[-1]:
            raise ValidationError(f"line {lineno}: duplicate timestamp {t}")
        if stamps and t < stamps[-1]:
            raise ValidationError(f"line {lineno}: timestamps decrease ({stamps[-1]} -> {t})")
        stamps.append(t)
        poses.append(_pose_from_tokens(toks[1:], lineno))
    if not stamps:
        raise ValidationError("trajectory file has no poses")
    return PoseTrack(np.array(stamps), tuple(poses))


def serialize_ego_trajectory(track: PoseTrack) -> str:
    return "".join(f"{int(t)} {_pose_tokens(p)}\n" for t, p in zip(track.timestamps, track.poses))


# ---------------------------------------------------------------------------
# feature streams


def read_feature_stream(data: bytes) -> FeatureStream:
    if len(data) < _FEATURE_HEADER.size:
        raise TruncationError(f"header needs {_FEATURE_HEADER.size} bytes, got {len(data)}")
    magic, version, view_id, T, D = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}")
    if T < 1 or D < 1:
        raise FormatError(f"empty feature stream (T={T}, D={D})")
    expected = T * D * 4
    payload = len(data) - _FEATURE_HEADER.size
    if payload != expected:
        raise TruncationError(f"payload is {payload} bytes, header promises {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(T, D)
    if not np.all(np.isfinite(values)):
        raise ValidationError("feature payload contains NaN or Inf")
    return FeatureStream(view_id, values.astype(np.float64))


def write_feature_stream(stream: FeatureStream) -> bytes:
    T, D = stream.features.shape
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, stream.view_id, T, D)
    return header + stream.features.astype("<f4").tobytes()


def load_feature_stream(path) -> FeatureStream:
    return read_feature_stream(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# keysteps


def parse_keystep_annotations(
    text: str,
    embeddings: Mapping[str, np.ndarray] | Callable[[str], np.ndarray] | None,
) -> KeystepSet:
    """Parse ``id<TAB>start<TAB>end<TAB>file:row`` records.

    ``embeddings`` maps an embedding file name to its T x D matrix (or is a
    callable doing the lookup). A missing file or row raises
    ``ResolutionError``.
    """
    entries = []
    cache: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(_text(text).splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", lineno)
        kid, start_tok, end_tok, ref = (f.strip() for f in fields)
        if not kid:
            raise ParseError("empty keystep id", lineno)
        start, end = _floats([start_tok, end_tok], lineno)
        if not start < end:
            raise ValidationError(f"line {lineno}: keystep {kid} has start {start} >= end {end}")
        fname, sep, row_tok = ref.rpartition(":")
        if not sep or not fname:
            raise ParseError(f"embedding reference must be file:row, got {ref!r}", lineno)
        row = _uint(row_tok, lineno, "embedding row")
        if fname not in cache:
            cache[fname] = _resolve(embeddings, fname, lineno)
        table = cache[fname]
        if row >= table.shape[0]:
            raise ResolutionError(f"line {lineno}: {fname} has {table.shape[0]} rows, row {row} requested")
        entries.append(Keystep(kid, table[row].copy(), start, end, ref))
    return KeystepSet(tuple(entries))


def _resolve(embeddings, fname: str, lineno: int) -> np.ndarray:
    try:
        if embeddings is None:
            raise KeyError(fname)
        table = embeddings(fname) if callable(embeddings) else embeddings[fname]
    except (KeyError, FileNotFoundError, OSError):
        raise ResolutionError(f"line {lineno}: embedding file {fname!r} not found") from None
    return np.atleast_2d(np.asarray(table, dtype=np.float64))


def serialize_keystep_annotations(keysteps: KeystepSet) -> str:
    lines = []
    for k in keysteps:
        if not k.embedding_ref:
            raise ContractError(f"keystep {k.keystep_id} has no embedding reference")
        lines.append(f"{k.keystep_id}\t{_fmt(k.start_s)}\t{_fmt(k.end_s)}\t{k.embedding_ref}\n")
    return "".join(lines)


def embedding_resolver(base_dir) -> Callable[[str], np.ndarray]:
    """Resolve embedding references against feature-stream files in ``base_dir``."""
    base = Path(base_dir)

    def lookup(name: str) -> np.ndarray:
        path = base / name
        if not path.is_file():
            raise FileNotFoundError(name)
        return load_feature_stream(path).features

    return lookup


@dataclass(frozen=True)
class ScoredSpan:
    start: float
    end: float
    confidence: float | None = None


def parse_spans(text: str, with_confidence: bool = False) -> dict[str, list[ScoredSpan]]:
    """Read keystep-format lines as bare spans, ignoring embedding references.

    Prediction files carry a fifth column with a confidence score. A keystep
    id may repeat in prediction files; order of appearance is kept.
    """
    out: dict[str, list[ScoredSpan]] = {}
    n_fields = 5 if with_confidence else 4
    for lineno, raw in enumerate(_text(text).splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in raw.rstrip("\r\n").split("\t")]
        if len(fields) != n_fields:
            raise ParseError(f"expected {n_fields} tab-separated fields, got {len(fields)}", lineno)
        kid = fields[0]
        if not kid:
            raise ParseError("empty keystep id", lineno)
        start, end = _floats(fields[1:3], lineno)
        if start > end:
            raise ValidationError(f"line {lineno}: span start {start} > end {end}")
        conf = _floats(fields[4:5], lineno)[0] if with_confidence else None
        if not with_confidence and kid in out:
            raise ValidationError(f"line {lineno}: duplicate keystep id {kid}")
        out.setdefault(kid, []).append(ScoredSpan(start, end, conf))
    return out


def serialize_predictions(preds: Mapping[str, Sequence[ScoredSpan]]) -> str:
    lines = []
    for kid, spans in preds.items():
        for s in spans:
            conf = 1.0 if s.confidence is None else s.confidence
            lines.append(f"{kid}\t{_fmt(s.start)}\t{_fmt(s.end)}\t-\t{_fmt(conf)}\n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# ranking cache


def parse_ranking_cache(text: str) -> list[tuple[int, list[int]]]:
    rows: list[tuple[int, list[int]]] = []
    for lineno, toks in _records(text):
        if len(toks) < 2:
            raise ParseError("expected a timestamp followed by view ids", lineno)
        t = _uint(toks[0], lineno, "timestamp")
        order = [_uint(tok, lineno, "view_id") for tok in toks[1:]]
        if len(set(order)) != len(order):
            raise ValidationError(f"line {lineno}: view id repeated in ranking")
        if rows and t <= rows[-1][0]:
            raise ValidationError(f"line {lineno}: timestamps must be strictly increasing")
        if rows and sorted(order) != sorted(rows[0][1]):
            raise ValidationError(f"line {lineno}: ranking covers a different view set")
        rows.append((t, order))
    return rows


def serialize_ranking_cache(rows: Iterable[tuple[int, Sequence[int]]]) -> str:
    return "".join(f"{int(t)} " + " ".join(str(int(v)) for v in order) + "\n" for t, order in rows)


# ---------------------------------------------------------------------------
# files


def write_atomic(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
        fh.write(data)
    tmp.replace(path)


@dataclass
class TakeFiles:
    """Standard file names inside a take directory."""

    root: Path
    calibration: str = "calibration.txt"
    trajectory: str = "trajectory.txt"
    keysteps: str = "keysteps.tsv"
    embeddings: str = "keystep_embeddings.vdfs"
    rankings: str = "rankings.txt"
    visibility: str = "visibility.csv"
    features_dir: str = "features"
    extra: dict = field(default_factory=dict)

    def stream_path(self, view_id: int) -> Path:
        return self.root / self.features_dir / f"view_{view_id}.vdfs"


def save_take(take: Take, root) -> TakeFiles:
    files = TakeFiles(Path(root))
    write_atomic(files.root / files.calibration, serialize_calibration(take.exo_poses))
    write_atomic(files.root / files.trajectory, serialize_ego_trajectory(take.ego_track))
    for vid, stream in take.streams.items():
        write_atomic(files.stream_path(vid), write_feature_stream(stream))
    if len(take.keysteps):
        table = np.stack([k.embedding for k in take.keysteps])
        write_atomic(files.root / files.embeddings, write_feature_stream(FeatureStream(0, table)))
        rows = [
            Keystep(k.keystep_id, k.embedding, k.start_s, k.end_s, f"{files.embeddings}:{i}")
            for i, k in enumerate(take.keysteps)
        ]
        write_atomic(files.root / files.keysteps, serialize_keystep_annotations(KeystepSet(tuple(rows))))
    return files


def load_take(root, take_id: str | None = None) -> Take:
    files = TakeFiles(Path(root))
    exo = parse_calibration((files.root / files.calibration).read_text(encoding="utf-8"))
    track = parse_ego_trajectory((files.root / files.trajectory).read_text(encoding="utf-8"))
    streams = {}
    for path in sorted((files.root / files.features_dir).glob("view_*.vdfs")):
        s = load_feature_stream(path)
        streams[s.view_id] = s
    ks_path = files.root / files.keysteps
    keysteps = KeystepSet()
    if ks_path.is_file():
        keysteps = parse_keystep_annotations(
            ks_path.read_text(encoding="utf-8"), embedding_resolver(files.root)
        )
    if EGO_VIEW_ID not in streams:
        raise ValidationError(f"{files.root}: ego stream view_{EGO_VIEW_ID}.vdfs missing")
    T = streams[EGO_VIEW_ID].T
    return Take(take_id or files.root.name, track, exo, streams, keysteps, T)
