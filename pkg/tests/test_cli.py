import json

import pytest

from structsyn.cli import run


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("STRUCTSYN_DATA_ROOT", raising=False)
    monkeypatch.delenv("STRUCTSYN_OUTPUT_ROOT", raising=False)
    return tmp_path


def _gen(out, count=4, seed=7):
    return run(["phantom", "generate", "--count", str(count), "--size", "32", "--seed", str(seed), "--out", out])


def test_phantom_generate_writes_records_and_manifest(workdir):
    assert _gen("d") == 0
    assert len(list((workdir / "d").glob("*/s000_mr.f32"))) == 4
    manifest = json.loads((workdir / "d" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["count"] == 4 and manifest["version"]


def test_same_seed_gives_identical_files(workdir):
    _gen("a")
    _gen("b")
    for f in (workdir / "a").rglob("*.f32"):
        assert f.read_bytes() == (workdir / "b" / f.relative_to(workdir / "a")).read_bytes()


def test_refuses_to_overwrite_without_force(workdir, capsys):
    assert _gen("d") == 0
    assert _gen("d", count=2) == 2
    assert "--force" in capsys.readouterr().err
    assert len(list((workdir / "d").iterdir())) == 5
    assert run(["phantom", "generate", "--count", "2", "--size", "32", "--out", "d", "--force"]) == 0
    assert len(list((workdir / "d").glob("sub*"))) == 2


def test_usage_errors_exit_one_and_write_nothing(workdir, capsys):
    assert run(["bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert run(["phantom", "generate", "--count", "2", "--out", "x", "--unknown"]) == 1
    assert run([]) == 1
    assert list(workdir.iterdir()) == []


def test_runtime_failure_exits_two(workdir):
    assert run(["eval", "--checkpoint", "missing", "--data", "nowhere"]) == 2


def test_train_eval_infer_report_cycle(workdir, capsys):
    _gen("d")
    (workdir / "c.json").write_text(json.dumps({"epochs": 1, "adaon_steps": 3, "augment": False,
                                                "checkpoint_every": 0}))
    assert run(["train", "--config", "c.json", "--data", "d", "--out", "r", "--seed", "5"]) == 0
    manifest = json.loads((workdir / "r" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["seed"] == 5
    capsys.readouterr()
    assert run(["eval", "--checkpoint", "r/last", "--data", "d", "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)
    on_disk = json.loads((workdir / "r" / "eval" / "report.json").read_text())
    assert printed == on_disk and "full" in on_disk
    assert run(["infer", "--checkpoint", "r", "--input", "d/sub0000/s000_mr.f32", "--out", "inf"]) == 0
    assert (workdir / "inf" / "s000_mr_synct.f32").stat().st_size == 32 * 32 * 4
    assert run(["report", "--inputs", "r/eval/report.json", "r/eval/report.json", "--out", "rep"]) == 0
    assert "full_2" in (workdir / "rep" / "table.txt").read_text()


def test_manifest_reproduces_training_run(workdir):
    _gen("d")
    (workdir / "c.json").write_text(json.dumps({"epochs": 1, "adaon_steps": 3, "augment": False,
                                                "checkpoint_every": 0}))
    assert run(["train", "--config", "c.json", "--data", "d", "--out", "r1"]) == 0
    argv = json.loads((workdir / "r1" / "manifest.json").read_text())["argv"]
    argv[argv.index("--out") + 1] = "r2"
    assert run(argv) == 0

    def logs(d):
        return [{k: v for k, v in json.loads(line).items() if k != "seconds"}
                for line in (workdir / d / "train_log.jsonl").read_text().splitlines()]
    assert logs("r1") == logs("r2")


def test_environment_roots(workdir, monkeypatch):
    monkeypatch.setenv("STRUCTSYN_OUTPUT_ROOT", str(workdir / "outs"))
    assert _gen("d") == 0
    assert (workdir / "outs" / "d" / "manifest.json").exists()
    monkeypatch.setenv("STRUCTSYN_DATA_ROOT", str(workdir / "outs"))
    (workdir / "c.json").write_text(json.dumps({"epochs": 0, "adaon_steps": 2, "augment": False}))
    assert run(["train", "--config", "c.json", "--data", "d", "--out", "r"]) == 0
    assert (workdir / "outs" / "r" / "last.pt").exists()
