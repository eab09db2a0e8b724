import json
import subprocess
import sys

import numpy as np
import pytest

from viewdistill import cli
from viewdistill.calib_io import parse_ranking_cache, parse_spans
from viewdistill.distill.head import ProjectionHead


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def take_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("takes")
    for seed in (0, 1):
        assert cli.main(["simulate", "--out", str(root / f"t{seed}"), "--seed", str(seed), "--duration", "12"]) == 0
        d = root / f"t{seed}"
        assert cli.main(["rank", "--calib", str(d / "calibration.txt"), "--traj", str(d / "trajectory.txt"),
                         "--out", str(d / "rankings.txt")]) == 0
    return root


def test_help_lists_commands():
    res = subprocess.run([sys.executable, "-m", "viewdistill.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("rank", "schedule", "train-distill", "eval-ground", "simulate", "correlate"):
        assert name in res.stdout


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["schedule", "--bogus"])
    assert exc.value.code == 2


def test_schedule_outputs(capsys, tmp_path):
    assert run(capsys, "schedule", 200, 5, 0.5)[1].splitlines()[0] == "[25,25,25,25,100]"
    assert run(capsys, "schedule", 11, 3, 0.5)[1].splitlines()[0] == "[3,2,6]"
    assert run(capsys, "schedule", "--epochs", 10, "--phases", 1)[1].splitlines()[0] == "[10]"
    code, _, _ = run(capsys, "schedule", 200, 5, "--out", tmp_path / "s.json")
    assert code == 0
    assert json.loads((tmp_path / "s.json").read_text())["boundaries"] == [0, 25, 50, 75, 100]


def test_schedule_errors(capsys):
    code, _, err = run(capsys, "schedule", 3, 5)
    assert code == 2 and "error" in err
    code, _, err = run(capsys, "schedule")
    assert code == 2


def test_config_file_and_precedence(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# schedule\nepochs = 11\nphases=3\nfinal_frac=0.5\n")
    assert run(capsys, "schedule", "--config", cfg)[1].splitlines()[0] == "[3,2,6]"
    # an explicit flag beats the file
    assert run(capsys, "schedule", "--config", cfg, "--epochs", 200, "--phases", 5)[1].splitlines()[0] == "[25,25,25,25,100]"
    cfg.write_text("epochs=10\nwarp=9\n")
    code, _, err = run(capsys, "schedule", "--config", cfg)
    assert code == 2 and "warp" in err


def test_missing_required(capsys):
    code, _, err = run(capsys, "correlate", "--rankings", "x")
    assert code == 2 and "--visibility" in err


def test_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "rank", "--calib", tmp_path / "nope", "--traj", tmp_path / "nope", "--out", tmp_path / "r")
    assert code == 2


def test_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--out", str(tmp_path / name), "--seed", "7", "--duration", "9"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_rank_and_ablations(capsys, take_dir):
    d = take_dir / "t0"
    base = parse_ranking_cache((d / "rankings.txt").read_text())
    assert len(base) == 12 and all(order[0] == 0 for _, order in base)
    code, out, _ = run(capsys, "rank", "--calib", d / "calibration.txt", "--traj", d / "trajectory.txt",
                       "--out", d / "rev.txt", "--reverse")
    assert code == 0 and out.startswith("view r0")
    rev = parse_ranking_cache((d / "rev.txt").read_text())
    assert all(r[1][1:] == b[1][1:][::-1] for r, b in zip(rev, base))
    code, _, _ = run(capsys, "rank", "--calib", d / "calibration.txt", "--traj", d / "trajectory.txt",
                     "--out", d / "x.txt", "--reverse", "--random")
    assert code == 2


def test_correlate(capsys, take_dir):
    d = take_dir / "t0"
    code, out, _ = run(capsys, "correlate", "--rankings", d / "rankings.txt", "--visibility", d / "visibility.csv")
    assert code == 0
    rho = float(out.split()[1])
    assert -1 <= rho <= 1


def test_train_distill(capsys, take_dir, tmp_path):
    args = ["train-distill", take_dir / "t0", "--eval-take", take_dir / "t1", "--epochs", 6, "--phases", 3,
            "--head-dims", "8", "--seed", 2]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0 and out.startswith("epochs 6")
    run(capsys, *args, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    head = ProjectionHead.from_bytes((tmp_path / "a" / "head.vdph").read_bytes())
    assert head.input_dim == 16 and head.output_dim == 8
    assert len((tmp_path / "a" / "metrics.csv").read_text().splitlines()) == 7


def test_eval_ground(capsys, take_dir, tmp_path):
    d = take_dir / "t0"
    gts = parse_spans((d / "keysteps.tsv").read_text().replace("keystep_embeddings", "e"))
    gt_file = tmp_path / "gt.tsv"
    gt_file.write_text("".join(f"{k}\t{v[0].start!r}\t{v[0].end!r}\t-\n" for k, v in gts.items()))
    rng = np.random.default_rng(0)
    specs = []
    for vid in range(5):
        lines = []
        for k, v in gts.items():
            shift = float(rng.uniform(0, 2))
            lines.append(f"{k}\t{v[0].start + shift!r}\t{v[0].end + shift!r}\t-\t0.5\n")
        p = tmp_path / f"pred{vid}.tsv"
        p.write_text("".join(lines))
        specs.append(f"{vid}:{p}")
    code, out, _ = run(capsys, "eval-ground", *specs, "--keysteps", gt_file, "--rankings", d / "rankings.txt",
                       "--thresholds", "0.3,0.5", "--out", tmp_path / "rep")
    assert code == 0
    assert out.splitlines()[0].startswith("R@1 IoU>=0.3")
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert set(report["buckets"]) >= {"B", "W"}
    assert report["all"]["n_keysteps"] == 5 * len(gts)
    csv = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert csv[0] == "bucket,theta,recall,miou,n_keysteps"
    # with rankings every file must name its view
    code, _, err = run(capsys, "eval-ground", tmp_path / "pred0.tsv", "--keysteps", gt_file,
                       "--rankings", d / "rankings.txt", "--out", tmp_path / "rep2")
    assert code == 2 and "view" in err


def test_bad_thresholds(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval-ground", "x", "--keysteps", "y", "--out", str(tmp_path), "--thresholds", "0.3,abc"])
    assert exc.value.code == 2
