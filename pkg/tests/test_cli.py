import csv
import json
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from sceneenc import cli
from sceneenc import diffcore as dc
from sceneenc.data import BenchmarkConfig
from sceneenc.trainer import NumericalAbort, TrainConfig, load_checkpoint

ROOT = Path(__file__).resolve().parents[1]
FAST_TRAIN = {"epochs": 2, "encoder_widths": [8, 16], "head_widths": [16], "descriptor_widths": [8], "M": 8,
              "k": 4}
TINY_BENCH = {"points_per_scene": 96, "n_train": 6, "n_val": 3, "n_test": 3}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


def manifest(out):
    return json.loads((Path(out) / cli.MANIFEST_NAME).read_text())


@pytest.fixture
def tiny(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", seed=4, benchmark=TINY_BENCH, train=FAST_TRAIN)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    return cfg, tmp_path / "data"


def test_template_ships_every_default():
    raw = cli.read_config(ROOT / "docs" / "config.template.json")
    assert raw["train"] == TrainConfig().to_dict()
    bench = asdict(BenchmarkConfig())
    bench["templates"] = list(bench["templates"])
    assert raw["benchmark"] == bench
    assert raw["ablate"] == cli.ABLATE_DEFAULTS and raw["gradcheck"] == cli.GRADCHECK_DEFAULTS


def test_gen_default_and_rerun_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert len(files) == 300
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    m = manifest(tmp_path / "a")
    assert m["exit_code"] == 0 and m["config"]["train"] == TrainConfig().to_dict()
    assert len(m["artifacts"]) == 301


def test_gen_missing_parent_exits_2_and_still_writes_manifest(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    target = tmp_path / "nope" / "data"
    assert cli.main(["gen", "--out", str(target)]) == 2
    assert str(tmp_path / "nope") in capsys.readouterr().err
    m = json.loads((tmp_path / f"sceneenc-gen-{cli.MANIFEST_NAME}").read_text())
    assert m["exit_code"] == 2 and m["finished"]


@pytest.mark.parametrize("sections,field", [
    ({"train": {"lr": -1}}, "train.lr"),
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"benchmark": {"n_train": 0}}, "benchmark.n_train"),
    ({"benchmark": {"templates": ["room_a"]}}, "benchmark.templates"),
    ({"ablate": {"seeds": 0}}, "ablate.seeds"),
    ({"extra": {}}, "extra"),
])
def test_config_errors_exit_2_naming_field(tmp_path, capsys, sections, field):
    cfg = write_config(tmp_path / "c.json", **sections)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_commented_config_is_accepted(tmp_path):
    (tmp_path / "c.json").write_text('// comment\n{\n  // another\n  "seed": 3\n}\n')
    assert cli.read_config(tmp_path / "c.json") == {"seed": 3}


def test_train_smoke_run_under_two_minutes(tmp_path):
    cfg = write_config(tmp_path / "c.json", benchmark={"n_train": 20, "n_val": 5, "n_test": 5},
                       train={"epochs": 5})
    data, out = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen", "--config", cfg, "--out", str(data)]) == 0
    start = time.perf_counter()
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    assert time.perf_counter() - start < 120
    for name in ("checkpoint.ckpt", "history.csv", "loss_curve.svg", cli.MANIFEST_NAME):
        assert (out / name).exists(), name
    assert (out / "loss_curve.svg").read_text().startswith("<svg")
    rows = list(csv.DictReader((out / "history.csv").open()))
    assert len(rows) == 5 and "val_iou_curtain" in rows[0]


def test_eval_matches_history_row(tiny, tmp_path):
    cfg, data = tiny
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    assert cli.main(["eval", "--data", str(data), "--out", str(out), "--split", "val"]) == 0
    rows = {(r["row"], r["name"]): r["value"] for r in csv.DictReader((out / "metrics.csv").open())}
    last = load_checkpoint(out / "checkpoint.ckpt").history[-1]
    assert float(rows[("summary", "miou")]) == last["val_miou"]
    assert float(rows[("summary", "noise")]) == last["val_noise"]
    assert rows[("summary", "scene_encoder")] == "active"


def test_bypassed_scene_encoder_is_reported(tiny, tmp_path):
    _, data = tiny
    cfg = write_config(tmp_path / "off.json", train={**FAST_TRAIN, "scene_encoder": False, "rsl": False})
    out = tmp_path / "off"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    assert cli.main(["eval", "--data", str(data), "--out", str(out)]) == 0
    text = (out / "metrics.csv").read_text()
    assert "summary,scene_encoder,bypassed" in text
    assert "summary,descriptor_f1,\n" in text


def test_train_and_eval_are_byte_identical(tiny, tmp_path):
    cfg, data = tiny
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
        assert cli.main(["eval", "--data", str(data), "--out", str(out)]) == 0
    for name in ("checkpoint.ckpt", "history.csv", "loss_curve.svg", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_paper_exact_flag_resolves_both_switches(tiny, tmp_path):
    cfg, data = tiny
    out = tmp_path / "pe"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out), "--paper-exact"]) == 0
    tc = manifest(out)["config"]["train"]
    assert tc["descriptor_variant"] == "paper_exact" and tc["eq3_exact"] is True


def test_seed_flag_overrides(tiny, tmp_path):
    cfg, data = tiny
    out = tmp_path / "s"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out), "--seed", "9"]) == 0
    m = manifest(out)
    assert m["seed"] == 9 and m["config"]["train"]["seed"] == 9


def test_numerical_abort_exits_3(tiny, tmp_path, monkeypatch):
    cfg, data = tiny

    def boom(config, dataset, progress=None):
        raise NumericalAbort(2, "rs", 0)

    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 3
    assert "rs" in manifest(out)["message"]


def test_missing_dataset_exits_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert manifest(tmp_path / "o")["exit_code"] == 2


def test_gradcheck_passes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "group cls/des0" in text and "exactly zero" in text
    assert manifest(tmp_path)["result"]["failures"] == []


def test_gradcheck_without_stop_gradient_flags_descriptor_head(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--no-stop-gradient"]) == 0
    out = capsys.readouterr().out
    assert "INFO cls/des" in out and "reaches descriptor head" in out


def test_gradcheck_detects_corrupted_backward_rule(tmp_path, monkeypatch, capsys):
    good = dc.PRIMITIVES["mul"]

    def wrong(adj, ins, out, **attrs):
        a, b = good.backward(adj, ins, out, **attrs)
        return a * 1.01, b

    monkeypatch.setitem(dc.PRIMITIVES, "mul", dc.Primitive(good.forward, wrong))
    cfg = write_config(tmp_path / "c.json", gradcheck={"trials": 5})
    assert cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "primitive mul" in err


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    cfg = write_config(out / "c.json", benchmark=TINY_BENCH, train={**FAST_TRAIN, "epochs": 1},
                       ablate={"seeds": 2})
    assert cli.main(["ablate", "--config", cfg, "--out", str(out / "one")]) == 0
    assert cli.main(["ablate", "--config", cfg, "--out", str(out / "two"), "--threads", "2"]) == 0
    return out


def test_ablation_table_layout(ablation):
    text = (ablation / "one" / "ablation.csv").read_text()
    lines = text.splitlines()
    assert lines[0].startswith("#") and "55.6 / +SE 58.6 / +RSL 58.7 / +both 62.8" in lines[0]
    assert lines[1].startswith("#") and "random 60.2" in lines[1] and "62.8" in lines[1]
    rows = list(csv.DictReader(lines[2:]))
    assert [r["cell"] for r in rows] == [c[0] for c in cli.CELLS]
    assert all(r["n_seeds"] == "2" for r in rows)
    assert rows[3]["miou_mean"] == rows[4]["miou_mean"]
    assert (ablation / "one" / "ablation.svg").read_text().startswith("<svg")


def test_ablation_parallel_workers_match_serial(ablation):
    for name in ("ablation.csv", cli.ABLATION_RUNS, "ablation.svg"):
        assert (ablation / "one" / name).read_bytes() == (ablation / "two" / name).read_bytes()


def test_report_regenerates(ablation, capsys):
    before = (ablation / "one" / "ablation.csv").read_bytes()
    (ablation / "one" / "ablation.csv").unlink()
    assert cli.main(["report", "--out", str(ablation / "one")]) == 0
    assert (ablation / "one" / "ablation.csv").read_bytes() == before
    assert "+both random" in capsys.readouterr().out


def test_report_with_nothing_exits_2(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sceneenc", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "sceneenc" in res.stdout
    res = subprocess.run([sys.executable, "-m", "sceneenc", "gen", "--out", str(tmp_path / "x" / "y")],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 2


def test_log_env_variable(tmp_path, monkeypatch):
    env = {"SCENEENC_LOG": "INFO", "PATH": "/usr/bin:/bin"}
    cfg = write_config(tmp_path / "c.json", benchmark=TINY_BENCH, train={**FAST_TRAIN, "epochs": 1})
    subprocess.run([sys.executable, "-m", "sceneenc", "gen", "--config", cfg, "--out", str(tmp_path / "d")],
                   check=True, capture_output=True)
    res = subprocess.run([sys.executable, "-m", "sceneenc", "train", "--config", cfg, "--data",
                          str(tmp_path / "d"), "--out", str(tmp_path / "r")], capture_output=True, text=True,
                         env=env)
    assert res.returncode == 0 and "epoch 0" in res.stderr
