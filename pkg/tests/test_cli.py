import json

import numpy as np
import pytest

from mgvit.cli import main
from mgvit.maskgen import read_mask_csv

SMALL = ["--set", "data.image_height=16", "--set", "data.image_width=16",
         "--set", "data.base_samples_per_class=12", "--set", "data.novel_samples_per_class=6",
         "--set", "data.distractors=1"]
FAST = ["--set", "embed_dim=16", "--set", "num_layers=2", "--set", "stage1_epochs=2",
        "--set", "joint_epochs=2", "--set", "initial_finetune_epochs=1", "--set", "k_shot=2",
        "--set", "topk=4", "--set", "neighborhood_size=8", "--set", "batch_size=16"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "-q", "--seed", "1", "--output-dir", str(data)] + SMALL) == 0
    s1 = root / "s1"
    assert main(["pretrain", "-q", "--seed", "1", "--data", str(data), "--output-dir", str(s1)] + FAST) == 0
    return root, data, s1 / "stage1.ckpt"


def run(args, workspace, out):
    root, data, ckpt = workspace
    return main(args + ["-q", "--seed", "1", "--data", str(data), "--output-dir", str(root / out)] + FAST)


def test_gen_data_layout(workspace):
    _, data, _ = workspace
    meta = json.loads((data / "base" / "meta.json").read_text())
    assert meta["seed"] == 1 and meta["spec"]["image_height"] == 16 and meta["split"] == "base"
    assert len((data / "novel" / "manifest.jsonl").read_text().splitlines()) == 24


def test_pretrain_outputs(workspace):
    root, _, ckpt = workspace
    info = json.loads((ckpt.parent / "stage1.json").read_text())
    assert len(info["loss_trace"]) == 2 and info["config"]["embed_dim"] == 16


def test_pretrain_resume_matches(workspace):
    root, _, ckpt = workspace
    assert run(["pretrain", "--resume"], workspace, "s1") == 0
    # already complete: resuming changes nothing
    a = json.loads((root / "s1" / "stage1.json").read_text())
    assert len(a["loss_trace"]) == 2


def test_select_finetune_evaluate(workspace):
    root, _, ckpt = workspace
    assert run(["select-shots", "--checkpoint", str(ckpt)], workspace, "sel") == 0
    task = json.loads((root / "sel" / "task.json").read_text())
    assert task["k_shot"] == 2 and task["config"]["seed"] == 1
    assert run(["finetune", "--checkpoint", str(ckpt), "--task-file", str(root / "sel" / "task.json")],
               workspace, "ft") == 0
    report = json.loads((root / "ft" / "report.json").read_text())
    assert report["task"]["shot_ids"] == task["shot_ids"]
    assert run(["evaluate", "--checkpoint", str(root / "ft" / "finetuned.ckpt"),
                "--task-file", str(root / "sel" / "task.json")], workspace, "ev") == 0
    ev = json.loads((root / "ev" / "eval.json").read_text())
    assert ev["metrics"]["ACC"] == report["metrics"]["ACC"] and ev["mg_flow"] is True


def test_finetune_deterministic(workspace):
    root, _, ckpt = workspace
    texts = []
    for out in ("ft1", "ft2"):
        assert run(["finetune", "--checkpoint", str(ckpt)], workspace, out) == 0
        rep = json.loads((root / out / "report.json").read_text())
        rep.pop("wall_clock")
        texts.append(json.dumps(rep, sort_keys=True))
    assert texts[0] == texts[1]
    assert (root / "ft1" / "finetuned.ckpt").read_bytes() == (root / "ft2" / "finetuned.ckpt").read_bytes()


def test_salience_files(workspace):
    root, data, ckpt = workspace
    assert run(["salience", "--checkpoint", str(ckpt), "--sample", "7", "--sample", "3"],
               workspace, "sal") == 0
    for sid in (7, 3):
        pgm = (root / "sal" / f"{sid}.salience.pgm").read_text().splitlines()
        assert pgm[0] == "P2" and any('"seed": 1' in line for line in pgm if line.startswith("#"))
        bits = read_mask_csv(root / "sal" / f"{sid}.mask.csv")
        assert bits.shape == (4, 4) and bits.sum() == 4
    assert run(["salience", "--checkpoint", str(ckpt), "--sample", "9999"], workspace, "sal2") == 1


def test_ablate_writes_rows(workspace):
    root, _, _ = workspace
    assert run(["ablate"], workspace, "abl") == 0
    summary = json.loads((root / "abl" / "ablation.json").read_text())
    assert set(summary["rows"]) == {"random+neighborhood+mask", "active", "active+neighborhood",
                                    "active+neighborhood+mask", "ft-full"}
    for name in summary["rows"]:
        rep = json.loads((root / "abl" / f"{name}.report.json").read_text())
        assert rep["config"]["seed"] == 1


def test_exit_codes(workspace, tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["gen-data", "--bogus"]) == 1
    assert main(["pretrain", "-q", "--output-dir", str(tmp_path)]) == 1
    assert main(["pretrain", "-q", "--data", str(tmp_path / "none"), "--output-dir", str(tmp_path)]) == 1
    assert main(["gen-data", "-q", "--set", "seed=abc", "--output-dir", str(tmp_path)]) == 1
    assert main(["gen-data", "-q", "--set", "noequals", "--output-dir", str(tmp_path)]) == 1
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    root, data, _ = workspace
    assert main(["evaluate", "-q", "--data", str(data), "--checkpoint", str(tmp_path / "bad.ckpt"),
                 "--output-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "offset 0" in err


def test_inputs_untouched(workspace):
    _, data, ckpt = workspace
    before = sorted((p.name, p.stat().st_mtime_ns) for p in data.rglob("*"))
    raw = ckpt.read_bytes()
    run(["evaluate", "--checkpoint", str(ckpt)], workspace, "ev2")
    assert sorted((p.name, p.stat().st_mtime_ns) for p in data.rglob("*")) == before
    assert ckpt.read_bytes() == raw


def test_internal_error_exit_code(monkeypatch, tmp_path):
    import mgvit.cli as cli

    def boom(*_):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.HANDLERS, "gen-data", boom)
    assert main(["gen-data", "-q", "--output-dir", str(tmp_path)]) == 2
