import json

import pytest
import yaml

from mrti.cli import main
from mrti.diffusion import read_blob_file

TINY = {
    "version": 1,
    "corpus": {"jitters": 2},
    "model": {"hidden": 32, "enc_hidden": 16},
    "pretrain": {"steps": 20, "batch_size": 8, "warmup": 5},
    "inversion": {"steps": 10, "batch_size": 4, "T": 4},
    "sample": {"n": 2},
    "eval": {"samples_per_point": 4, "seeds": [0], "t_grid": [0.0, 0.5]},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["pipeline", "--config", str(cfg), "--run-dir", str(root / "run")]) == 0
    return root


def test_pipeline_writes_snapshot_and_artifacts(run):
    out = run / "run"
    for name in ("config.yaml", "model.ckpt", "concept.concept", "report.json", "eval_samples.f8",
                 "samples/prompt0.f8", "timings.json"):
        assert (out / name).exists(), name
    assert yaml.safe_load((out / "config.yaml").read_text())["pretrain"]["steps"] == 20


def test_invert_single_bucket_then_inspect(run, capsys):
    out = run / "inv"
    rc = main(["invert", "--checkpoint", str(run / "run" / "model.ckpt"), "--run-dir", str(out), "--buckets", "1",
               "--config", str(run / "tiny.yaml")])
    assert rc == 0
    assert (out / "config.yaml").exists()
    capsys.readouterr()
    assert main(["inspect", str(out / "concept.concept")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["T"] == 1


def test_unknown_pseudo_word_is_usage_error(run, capsys):
    rc = main(["sample", "--checkpoint", str(run / "run" / "model.ckpt"), "--concept",
               str(run / "run" / "concept.concept"), "--prompt", "a photo of <dot>", "--run-dir", str(run / "s")])
    assert rc == 2
    assert "dot" in capsys.readouterr().err


def test_unknown_word_is_usage_error(run, capsys):
    rc = main(["compile", "--checkpoint", str(run / "run" / "model.ckpt"), "--prompt", "a zebra"])
    assert rc == 2
    assert "zebra" in capsys.readouterr().err


def test_compile_emit_json(run, capsys):
    rc = main(["compile", "--checkpoint", str(run / "run" / "model.ckpt"), "--concept",
               str(run / "run" / "concept.concept"), "--prompt", "a <concept|0.3|>", "--emit-json"])
    assert rc == 0
    data = json.loads(capsys.readouterr().out)
    assert data["slots"][0]["policy"] == "fixed" and data["slots"][0]["t_fixed"] == 0.3


def test_sample_with_trace(run):
    out = run / "s2"
    rc = main(["sample", "--checkpoint", str(run / "run" / "model.ckpt"), "--concept",
               str(run / "run" / "concept.concept"), "--prompt", "a photo of <concept(0.5)>", "--n", "3",
               "--run-dir", str(out), "--trace", str(run / "trace.json")])
    assert rc == 0
    header, blob = read_blob_file(out / "samples.f8")
    assert header["shape"] == [3, 256] and blob.size == 768
    trace = json.loads((run / "trace.json").read_text())
    assert len(trace["records"]) == 100


def test_runtime_and_usage_exit_codes(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "missing.ckpt")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: 1\nbogus: 1\n")
    assert main(["pipeline", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == 2
    assert main(["no-such-command"]) == 2
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(b"not a checkpoint")
    assert main(["inspect", str(corrupt)]) == 3
