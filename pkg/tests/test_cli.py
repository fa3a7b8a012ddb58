import filecmp
import json
from pathlib import Path

import pytest

from graphvid.cli import main
from graphvid.numerics import tensorio


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end run: data, VQ, VSG, prior."""
    root = tmp_path_factory.mktemp("pipe")
    d = {k: root / k for k in ("data", "vq", "vsg", "prior")}
    assert main(["gen-data", "--out", str(d["data"]), "--episodes", "10", "--seed", "7"]) == 0
    assert main(["train-vq", "--data", str(d["data"]), "--out", str(d["vq"]), "--steps", "3"]) == 0
    assert main(["pretrain-vsg", "--data", str(d["data"]), "--out", str(d["vsg"]), "--steps", "2"]) == 0
    assert main(["train-prior", "--data", str(d["data"]), "--vq", str(d["vq"]), "--vsg", str(d["vsg"]),
                 "--out", str(d["prior"]), "--steps", "2"]) == 0
    return d


def test_gen_data_layout_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--episodes", "4", "--seed", "7"]) == 0
    assert main(["gen-data", "--out", str(b), "--episodes", "4", "--seed", "7", "--workers", "2"]) == 0
    assert sorted(p.name for p in (a / "episodes").iterdir()) == ["0000", "0001", "0002", "0003"]
    ep = a / "episodes" / "0000"
    assert (ep / "track.json").exists() and (ep / "meta.json").exists() and len(list((ep / "frames").iterdir())) == 8
    assert json.loads((a / "run.json").read_text())["seed"] == 7
    assert json.loads((a / "config.json").read_text())["data"]["episodes"] == 4
    assert tree_bytes(a) == tree_bytes(b)


def test_training_commands_stream_csv(pipeline, tmp_path, capsys):
    assert main(["train-vq", "--data", str(pipeline["data"]), "--out", str(tmp_path / "vq"), "--steps", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "stage,step,loss,recon,codebook,commitment"
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["vq", "1"], ["vq", "2"]]
    for name in ("manifest.json", "config.json", "run.json"):
        assert (tmp_path / "vq" / name).exists()


def test_checkpoints_hold_config_and_seed(pipeline):
    for stage in ("vq", "vsg", "prior"):
        run = json.loads((pipeline[stage] / "run.json").read_text())
        cfg = json.loads((pipeline[stage] / "config.json").read_text())
        assert run["seed"] == cfg[stage]["seed"]
    assert json.loads((pipeline["vsg"] / "config.json").read_text())["vsg"]["steps"] == 2


def test_synthesize_is_byte_identical(pipeline, tmp_path):
    ep = pipeline["data"] / "episodes" / "0001"
    args = ["--start", str(ep / "frames" / "0000.ssgt"), "--track", str(ep / "track.json"),
            "--vq", str(pipeline["vq"]), "--prior", str(pipeline["prior"]), "--seed", "3"]
    assert main(["synthesize", *args, "--out", str(tmp_path / "s1")]) == 0
    assert main(["synthesize", *args, "--out", str(tmp_path / "s2")]) == 0
    assert tree_bytes(tmp_path / "s1") == tree_bytes(tmp_path / "s2")
    idx, K = tensorio.load_latents(tmp_path / "s1" / "latents.lat")
    assert idx.shape == (8, 16) and K == 64
    assert len(list((tmp_path / "s1" / "frames").glob("*.ssgt"))) == 8
    assert main(["synthesize", *args[:-1], "4", "--out", str(tmp_path / "s3")]) == 0
    assert not filecmp.cmp(tmp_path / "s1" / "latents.lat", tmp_path / "s3" / "latents.lat", shallow=False)


def test_synthesize_accepts_pgm_start(pipeline, tmp_path):
    ep = pipeline["data"] / "episodes" / "0001"
    common = ["--track", str(ep / "track.json"), "--vq", str(pipeline["vq"]), "--prior", str(pipeline["prior"])]
    assert main(["synthesize", "--start", str(ep / "frames" / "0000.ssgt"), *common, "--out", str(tmp_path / "a")]) == 0
    pgm = tmp_path / "a" / "frames" / "0000.pgm"
    assert pgm.read_bytes().startswith(b"P5\n16 16\n255\n")
    assert main(["synthesize", "--start", str(pgm), *common, "--out", str(tmp_path / "b")]) == 0


def test_evaluate_writes_metrics(pipeline, tmp_path, capsys):
    assert main(["evaluate", "--data", str(pipeline["data"]), "--vq", str(pipeline["vq"]), "--prior",
                 str(pipeline["prior"]), "--evaluator", str(pipeline["vsg"]), "--out", str(tmp_path / "ev"),
                 "--repeats", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric,mean,std,repeats,config_hash"
    assert [ln.split(",")[0] for ln in out[1:]] == ["fvd_proxy", "ssim", "oracle_pass"]
    assert all(ln.split(",")[3] == "2" for ln in out[1:])
    assert (tmp_path / "ev" / "metrics.csv").read_text().splitlines() == out


def test_unknown_flag_exits_two_with_usage(capsys):
    assert main(["gen-data", "--out", "x", "--foo"]) == 2
    assert "usage:" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["fly"]) == 2


def test_bad_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"vq": {"K": 1}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    bad.write_text('{"vq": {"nope": 1}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_checkpoint_exits_one(pipeline, tmp_path, capsys):
    ep = pipeline["data"] / "episodes" / "0000"
    code = main(["synthesize", "--start", str(ep / "frames" / "0000.ssgt"), "--track", str(ep / "track.json"),
                 "--vq", str(tmp_path / "missing"), "--prior", str(pipeline["prior"]), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "no checkpoint" in capsys.readouterr().err


def test_wrong_checkpoint_kind_exits_one(pipeline, tmp_path):
    code = main(["train-prior", "--data", str(pipeline["data"]), "--vq", str(pipeline["vsg"]),
                 "--out", str(tmp_path / "p"), "--steps", "1"])
    assert code == 1


def test_joint_prior_training_without_vsg_checkpoint(pipeline, tmp_path):
    assert main(["train-prior", "--data", str(pipeline["data"]), "--vq", str(pipeline["vq"]),
                 "--out", str(tmp_path / "p"), "--steps", "1", "--order", "3"]) == 0
    cfg = json.loads((tmp_path / "p" / "config.json").read_text())
    assert cfg["prior"]["joint_vsg"] is True and cfg["prior"]["order"] == 3
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["order"] == 3
