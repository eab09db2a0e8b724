"""Shared helpers for the test suite: valid-file generators and fuzz inputs."""

from __future__ import annotations

import numpy as np

from viewdistill import calib_io as cio
from viewdistill.distill.head import ProjectionHead
from viewdistill.ranking import rank_take, timeline_to_cache
from viewdistill.scene_sim import SceneConfig, generate_scene

NASTY_TOKENS = [
    "", " ", "\t", "nan", "inf", "-inf", "1e999", "-0", "-1", "0x10", "1_000",
    "9" * 40, "١٢", "é", "\x00", "#", ":", "a:b:c", "\r", " ", "--", "1.5.2",
    "PlusZ", "CameraFromWorld", "WorldFromCamera", "t,view_id,visible_fraction",
]


def random_valid_files(rng: np.random.Generator, n: int) -> dict[str, list[bytes]]:
    """``n`` valid inputs for each fuzzed parser, built from random synthetic scenes."""
    out: dict[str, list[bytes]] = {k: [] for k in (
        "calibration", "trajectory", "features", "keysteps", "ground_truth",
        "predictions", "rankings", "visibility", "head",
    )}
    for _ in range(n):
        scene = generate_scene(
            SceneConfig(seed=int(rng.integers(1 << 30)), n_exo=int(rng.integers(1, 6)), duration_s=int(rng.integers(1, 10)))
        )
        take = scene.take
        out["calibration"].append(cio.serialize_calibration(take.exo_poses).encode())
        out["trajectory"].append(cio.serialize_ego_trajectory(take.ego_track).encode())
        out["features"].append(cio.write_feature_stream(take.streams[0]))
        lines, gt, pr = [], [], []
        for i, k in enumerate(take.keysteps):
            lines.append(f"{k.keystep_id}\t{k.start_s!r}\t{k.end_s!r}\temb.vdfs:{i % 4}\n")
            gt.append(f"{k.keystep_id}\t{k.start_s!r}\t{k.end_s!r}\t-\n")
            pr.append(f"{k.keystep_id}\t{k.start_s!r}\t{k.end_s!r}\t-\t{float(rng.uniform())!r}\n")
        out["keysteps"].append("".join(lines).encode())
        out["ground_truth"].append("".join(gt).encode())
        out["predictions"].append("".join(pr).encode())
        out["rankings"].append(timeline_to_cache(rank_take(take)).encode())
        out["visibility"].append(scene.visibility_csv().encode())
        dims = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(2, 4))))
        out["head"].append(ProjectionHead.init(dims, rng).to_bytes())
    return out


def _mutate_bytes(rng: np.random.Generator, data: bytes) -> bytes:
    b = bytearray(data)
    for _ in range(int(rng.integers(1, 6))):
        op = int(rng.integers(5))
        pos = int(rng.integers(len(b) + 1))
        if op == 0 and b:
            b[min(pos, len(b) - 1)] = int(rng.integers(256))
        elif op == 1:
            b[pos:pos] = bytes(rng.integers(0, 256, size=int(rng.integers(1, 8)), dtype=np.uint8))
        elif op == 2:
            del b[pos : pos + int(rng.integers(1, 16))]
        elif op == 3:
            b = b[:pos]
        else:
            b[pos:pos] = b[: int(rng.integers(0, 32))]
    return bytes(b)


def _mutate_tokens(rng: np.random.Generator, data: bytes) -> bytes:
    text = data.decode("utf-8", errors="replace")
    parts = text.replace("\t", " \t ").split(" ")
    if not parts:
        return data
    for _ in range(int(rng.integers(1, 4))):
        i = int(rng.integers(len(parts)))
        parts[i] = NASTY_TOKENS[int(rng.integers(len(NASTY_TOKENS)))]
    return " ".join(parts).replace(" \t ", "\t").encode("utf-8", errors="replace")


def fuzz_inputs(rng: np.random.Generator, valid: list[bytes], n: int):
    """``n`` byte strings: a third random, a third byte mutations, a third token mutations."""
    for i in range(n):
        kind = i % 3
        if kind == 0:
            yield bytes(rng.integers(0, 256, size=int(rng.integers(0, 256)), dtype=np.uint8))
        else:
            base = valid[int(rng.integers(len(valid)))]
            yield _mutate_bytes(rng, base) if kind == 1 else _mutate_tokens(rng, base)
